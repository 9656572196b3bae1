/// Linear warmup from zero to `base_lr`, then cosine decay to zero at `total`.
/// `step` is clamped to `[0, total]`.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64, total: u64) -> f64 {
    let step = step.min(total);
    if warmup > 0 && step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_decay_landmarks() {
        assert!((lr_at(512, 0.01, 512, 3000) - 0.01).abs() < 1e-15);
        assert!((lr_at(256, 0.01, 512, 3000) - 0.005).abs() < 1e-15);
        assert!(lr_at(3000, 0.01, 512, 3000).abs() < 1e-12);
        assert_eq!(lr_at(0, 0.01, 512, 3000), 0.0);
        // clamped past the end
        assert!(lr_at(10_000, 0.01, 512, 3000).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_the_warmup_boundary() {
        let a = lr_at(511, 0.01, 512, 3000);
        let b = lr_at(512, 0.01, 512, 3000);
        let c = lr_at(513, 0.01, 512, 3000);
        assert!((b - a).abs() < 0.01 / 512.0 + 1e-12);
        assert!((c - b).abs() < 1e-5);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert!((lr_at(0, 0.02, 0, 100) - 0.02).abs() < 1e-15);
    }
}
