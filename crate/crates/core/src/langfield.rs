//! Interaction-aware language embeddings: a per-object table over κ bins,
//! a deterministic hashed text embedder, Huber supervision, relevancy
//! heatmaps and grounding masks.

use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::diffcore::{ParamStore, SegmentId};
use crate::error::{Error, Result};
use crate::probfield::{select_index, ControlState};

/// `alpha x bins x dim` embedding grid stored as an
/// `(alpha * bins) x dim` parameter segment. Bin `b` sits at
/// `kappa = b / (bins - 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageTable {
    pub alpha: usize,
    pub bins: usize,
    pub dim: usize,
    pub seg: SegmentId,
}

impl LanguageTable {
    pub fn new(store: &mut ParamStore, name: &str, alpha: usize, bins: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if bins < 2 || dim == 0 || alpha == 0 {
            return Err(Error::InvalidArgument(format!(
                "language table needs alpha >= 1, bins >= 2, dim >= 1 (got {alpha}, {bins}, {dim})"
            )));
        }
        let dist = Normal::new(0.0, 0.01).expect("valid normal");
        let values = (0..alpha * bins * dim).map(|_| dist.sample(rng)).collect();
        let seg = store.register(name, alpha * bins, dim, values)?;
        Ok(Self { alpha, bins, dim, seg })
    }

    pub fn parameter_count(&self) -> usize {
        self.alpha * self.bins * self.dim
    }

    pub fn entry<'a>(&self, store: &'a ParamStore, u: usize, bin: usize) -> &'a [f64] {
        let start = (u * self.bins + bin) * self.dim;
        &store.seg_values(self.seg)[start..start + self.dim]
    }
}

/// Linear interpolation between the two κ bins of object `u`. Negative `u`
/// (background) yields the zero vector; κ is clamped to `[0, 1]`.
pub fn lang_lookup(table: &LanguageTable, store: &ParamStore, u: i64, kappa_u: f64) -> Vec<f64> {
    if u < 0 {
        return vec![0.0; table.dim];
    }
    let u = u as usize;
    assert!(u < table.alpha, "object {u} out of range");
    let x = kappa_u.clamp(0.0, 1.0) * (table.bins - 1) as f64;
    let b0 = (x.floor() as usize).min(table.bins - 2);
    let t = x - b0 as f64;
    let e0 = table.entry(store, u, b0);
    if t == 0.0 {
        return e0.to_vec();
    }
    let e1 = table.entry(store, u, b0 + 1);
    if t == 1.0 {
        return e1.to_vec();
    }
    e0.iter().zip(e1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Deterministic stand-in for a text encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl TextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = XxHash64::with_seed(self.seed);
        h.write(token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        embed_text(text, self)
    }
}

/// Lowercased whitespace tokens, each hashed to a Gaussian vector; the mean
/// is L2-normalised.
pub fn embed_text(text: &str, embedder: &TextEmbedder) -> Result<Vec<f64>> {
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot embed empty text".into()));
    }
    let mut acc = vec![0.0; embedder.dim];
    for tok in &tokens {
        acc.iter_mut().zip(embedder.token_vector(tok)).for_each(|(a, b)| *a += b);
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::NonFinite {
            context: format!("embedding of {text:?} has zero norm"),
        });
    }
    Ok(acc.into_iter().map(|a| a / norm).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Per-component Huber loss, summed.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "huber: dimension mismatch");
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d <= delta {
                0.5 * d * d
            } else {
                delta * (d - 0.5 * delta)
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    /// Weighted sum of per-sample lookups along the ray.
    Composite,
    /// Single lookup for the most probable object of the composited class map.
    #[default]
    MaxProbRetrieval,
}

/// Per-sample routing used to render an embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRoute {
    pub u: i64,
    pub weight: f64,
}

/// Renders one ray's embedding. `prob_map` is the ray's composited class map
/// (`alpha` objects then background).
pub fn render_embedding(
    routes: &[SampleRoute],
    prob_map: &[f64],
    table: &LanguageTable,
    store: &ParamStore,
    mode: EmbedMode,
    kappa: &ControlState,
    threshold: f64,
) -> Vec<f64> {
    match mode {
        EmbedMode::Composite => {
            let mut out = vec![0.0; table.dim];
            for r in routes.iter().filter(|r| r.u >= 0 && r.weight != 0.0) {
                let e = lang_lookup(table, store, r.u, kappa.kappa[r.u as usize]);
                out.iter_mut().zip(e).for_each(|(o, v)| *o += r.weight * v);
            }
            out
        }
        EmbedMode::MaxProbRetrieval => {
            let u = select_index(prob_map, threshold);
            if u < 0 {
                vec![0.0; table.dim]
            } else {
                lang_lookup(table, store, u, kappa.kappa[u as usize])
            }
        }
    }
}

/// Cosine of every pixel embedding with `query`; zero-norm pixels score 0.
pub fn relevancy(pixels: &[Vec<f64>], query: &[f64]) -> Vec<f64> {
    pixels.iter().map(|p| cosine(p, query)).collect()
}

pub fn miou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("mask sizes {} and {}", pred.len(), gt.len())));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over several `(pred, gt)` object masks.
pub fn mean_iou(pairs: &[(Vec<bool>, Vec<bool>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("mean IoU over no objects".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += miou(p, g)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub width: usize,
    pub height: usize,
    pub heatmap: Vec<f64>,
    pub mask: Vec<bool>,
    pub best_object: i64,
    pub score: f64,
}

/// Thresholds the heatmap and names the object whose labelled pixels inside
/// the mask have the highest mean relevancy. `labels` holds each pixel's
/// routed object (`-1` for background). An empty mask gives object `-1`.
pub fn ground(heatmap: Vec<f64>, labels: &[i64], alpha: usize, width: usize, height: usize, threshold: f64) -> GroundingResult {
    assert_eq!(heatmap.len(), width * height);
    assert_eq!(labels.len(), heatmap.len());
    let mask: Vec<bool> = heatmap.iter().map(|&h| h >= threshold).collect();
    let mut sums = vec![0.0; alpha];
    let mut counts = vec![0usize; alpha];
    for ((&m, &h), &l) in mask.iter().zip(&heatmap).zip(labels) {
        if m && l >= 0 && (l as usize) < alpha {
            sums[l as usize] += h;
            counts[l as usize] += 1;
        }
    }
    let mut best = -1i64;
    let mut score = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(-1.0);
    let mut best_mean = f64::NEG_INFINITY;
    for o in 0..alpha {
        if counts[o] > 0 {
            let mean = sums[o] / counts[o] as f64;
            if mean > best_mean {
                best_mean = mean;
                best = o as i64;
            }
        }
    }
    if best >= 0 {
        score = best_mean;
    }
    GroundingResult {
        width,
        height,
        heatmap,
        mask,
        best_object: best,
        score,
    }
}

/// Captions for an object: `closed <name>` below κ = 0.5, `open <name>` otherwise.
pub fn state_caption(captions: &(String, String), kappa: f64) -> &str {
    if kappa < 0.5 {
        &captions.0
    } else {
        &captions.1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(alpha: usize) -> (ParamStore, LanguageTable) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = LanguageTable::new(&mut store, "lang", alpha, 8, 16, &mut rng).unwrap();
        let n = store.len();
        store.values_mut().copy_from_slice(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        (store, t)
    }

    #[test]
    fn embedder_is_deterministic_and_normalized() {
        let e = TextEmbedder::new(7, 16);
        let a = e.embed("Open Door").unwrap();
        assert_eq!(a, e.embed("open   door").unwrap());
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(e.embed("   ").is_err());
        assert_ne!(a, TextEmbedder::new(8, 16).embed("open door").unwrap());
    }

    #[test]
    fn embedder_golden_cosine() {
        let e = TextEmbedder::new(7, 16);
        let c = cosine(&e.embed("open door").unwrap(), &e.embed("closed door").unwrap());
        assert!(c > -1.0 && c < 1.0);
        let golden: f64 = include_str!("../tests/golden/open_closed_door_cosine.txt").trim().parse().unwrap();
        assert!((c - golden).abs() < 1e-12, "cosine {c:.17} vs golden {golden}");
    }

    #[test]
    fn lookup_nodes_midpoints_and_background() {
        let (store, t) = table(2);
        for b in 0..8 {
            let k = b as f64 / 7.0;
            assert_eq!(lang_lookup(&t, &store, 1, k), t.entry(&store, 1, b));
        }
        let mid = lang_lookup(&t, &store, 0, 2.5 / 7.0);
        for ((m, a), b) in mid.iter().zip(t.entry(&store, 0, 2)).zip(t.entry(&store, 0, 3)) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-15);
        }
        assert_eq!(lang_lookup(&t, &store, -1, 0.3), vec![0.0; 16]);
        assert_eq!(t.parameter_count(), 2 * 8 * 16);
        assert_eq!(store.len(), t.parameter_count());
    }

    #[test]
    fn lookup_matches_two_point_oracle() {
        let (store, t) = table(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let u = rng.random_range(0..3usize);
            let k: f64 = rng.random();
            let got = lang_lookup(&t, &store, u as i64, k);
            let pos = k * 7.0;
            let lo = (pos.floor() as usize).min(6);
            let w = pos - lo as f64;
            let vals = store.values();
            for c in 0..16 {
                let a = vals[(u * 8 + lo) * 16 + c];
                let b = vals[(u * 8 + lo + 1) * 16 + c];
                assert!((got[c] - (a * (1.0 - w) + b * w)).abs() < 1e-12);
            }
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n(&got) <= n(t.entry(&store, u, lo)).max(n(t.entry(&store, u, lo + 1))) + 1e-12);
        }
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber_loss(&[0.3, -1.0], &[0.3, -1.0], 1.0), 0.0);
        assert_eq!(huber_loss(&[0.5], &[0.0], 1.0), 0.125);
        assert_eq!(huber_loss(&[2.0], &[0.0], 1.0), 1.5);
        // value and slope agree on both sides of delta
        let eps = 1e-7;
        let lo = huber_loss(&[1.0 - eps], &[0.0], 1.0);
        let hi = huber_loss(&[1.0 + eps], &[0.0], 1.0);
        assert!((hi - lo - 2.0 * eps).abs() < 1e-12);
    }

    #[test]
    fn embedding_modes() {
        let (store, t) = table(2);
        let k = ControlState::new(vec![3.0 / 7.0, 0.5]).unwrap();
        let pure = [SampleRoute { u: 0, weight: 0.6 }, SampleRoute { u: 0, weight: 0.4 }];
        let pm = [0.9, 0.05, 0.05];
        let stored = t.entry(&store, 0, 3).to_vec();
        let comp = render_embedding(&pure, &pm, &t, &store, EmbedMode::Composite, &k, 0.5);
        for (a, b) in comp.iter().zip(&stored) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(render_embedding(&pure, &pm, &t, &store, EmbedMode::MaxProbRetrieval, &k, 0.5), stored);

        let bg = [SampleRoute { u: -1, weight: 0.7 }];
        let pbg = [0.1, 0.1, 0.8];
        assert_eq!(render_embedding(&bg, &pbg, &t, &store, EmbedMode::Composite, &k, 0.5), vec![0.0; 16]);
        assert_eq!(render_embedding(&bg, &pbg, &t, &store, EmbedMode::MaxProbRetrieval, &k, 0.5), vec![0.0; 16]);

        let mixed = [SampleRoute { u: 0, weight: 0.3 }, SampleRoute { u: 1, weight: 0.5 }];
        let pmix = [0.3, 0.5, 0.2];
        let e0 = lang_lookup(&t, &store, 0, k.kappa[0]);
        let e1 = lang_lookup(&t, &store, 1, k.kappa[1]);
        let comp = render_embedding(&mixed, &pmix, &t, &store, EmbedMode::Composite, &k, 0.4);
        for c in 0..16 {
            assert!((comp[c] - (0.3 * e0[c] + 0.5 * e1[c])).abs() < 1e-12);
        }
        assert_eq!(render_embedding(&mixed, &pmix, &t, &store, EmbedMode::MaxProbRetrieval, &k, 0.4), e1);
    }

    #[test]
    fn relevancy_conventions() {
        let q = vec![1.0, 0.0, 0.0];
        let h = relevancy(&[q.clone(), vec![0.0; 3], vec![0.0, 2.0, 0.0]], &q);
        assert_eq!(h[0], 1.0);
        assert_eq!(h[1], 0.0);
        assert!(h[2].abs() < 1e-9);
    }

    #[test]
    fn iou_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        assert_eq!(miou(&a, &[false, false, true, true]).unwrap(), 0.0);
        // 2x4 rectangles shifted by half their width
        let r1: Vec<bool> = (0..12).map(|i| i % 6 < 4).collect();
        let r2: Vec<bool> = (0..12).map(|i| (2..6).contains(&(i % 6))).collect();
        assert!((miou(&r1, &r2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(miou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(miou(&a, &[true]).is_err());
        assert_eq!(miou(&r1, &r2).unwrap(), miou(&r2, &r1).unwrap());
    }

    #[test]
    fn grounding_picks_best_labelled_object() {
        let heat = vec![0.9, 0.7, 0.2, 0.65, -0.3, 0.0];
        let labels = vec![1, 1, 0, 0, -1, -1];
        let g = ground(heat.clone(), &labels, 2, 3, 2, 0.6);
        assert_eq!(g.mask, vec![true, true, false, true, false, false]);
        assert_eq!(g.best_object, 1);
        assert!((g.score - 0.8).abs() < 1e-12);
        let none = ground(vec![0.1; 6], &labels, 2, 3, 2, 0.6);
        assert_eq!(none.best_object, -1);
        assert!(none.mask.iter().all(|m| !m));
    }
}
