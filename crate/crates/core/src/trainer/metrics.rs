//! Image-quality and grounding metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("psnr over {} and {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM over the valid region and all channels, with an 11x11
/// Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03 and unit data range.
/// Images are row-major with interleaved channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    if a.len() != width * height * channels || b.len() != a.len() {
        return Err(Error::Shape("ssim: image sizes differ".into()));
    }
    if width < 11 || height < 11 {
        return Err(Error::InvalidArgument("ssim needs images of at least 11x11".into()));
    }
    let w = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (width - 10, height - 10);
    let mut total = 0.0;
    for c in 0..channels {
        let px = |img: &[f64], x: usize, y: usize| img[(y * width + x) * channels + c];
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (j, wj) in w.iter().enumerate() {
                    for (i, wi) in w.iter().enumerate() {
                        let k = wi * wj;
                        let (va, vb) = (px(a, x + i, y + j), px(b, x + i, y + j));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (ow * oh * channels) as f64)
}

/// Mean absolute depth error over pixels whose opacity exceeds 0.5; `None`
/// when no pixel qualifies.
pub fn depth_l1(pred: &[f64], gt: &[f64], acc: &[f64]) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for ((p, g), a) in pred.iter().zip(gt).zip(acc) {
        if *a > 0.5 {
            s += (p - g).abs();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(rename = "depthL1")]
    pub depth_l1: f64,
    pub miou: f64,
    #[serde(rename = "lossBreakdown", default)]
    pub loss_breakdown: std::collections::BTreeMap<String, f64>,
}
