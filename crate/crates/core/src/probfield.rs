//! Interaction probability field: per-object class probabilities from
//! position features and the control state, routing of samples to local
//! fields, and the focal and repulsion losses that train it.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, SegmentId, Tensor, Var};
use crate::error::{Error, Result};

/// Per-object interaction variables, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub kappa: Vec<f64>,
}

impl ControlState {
    pub fn new(kappa: Vec<f64>) -> Result<Self> {
        if kappa.is_empty() {
            return Err(Error::InvalidArgument("control state needs at least one object".into()));
        }
        if let Some(k) = kappa.iter().find(|k| !(0.0..=1.0).contains(*k)) {
            return Err(Error::InvalidArgument(format!("interaction variable {k} outside [0, 1]")));
        }
        Ok(Self { kappa })
    }

    /// Clamps every entry into `[0, 1]`; non-finite entries become 0.
    pub fn clamped(kappa: &[f64]) -> Self {
        Self {
            kappa: kappa
                .iter()
                .map(|k| if k.is_finite() { k.clamp(0.0, 1.0) } else { 0.0 })
                .collect(),
        }
    }

    pub fn uniform(alpha: usize, value: f64) -> Self {
        Self::clamped(&vec![value; alpha])
    }

    pub fn alpha(&self) -> usize {
        self.kappa.len()
    }
}

/// Probability decoder. Each scale's position feature passes through its
/// own input block; the control state and hidden bias are shared:
///
/// `h_s = relu(f_s A_s + kappa B + b1)`, `logits_s = h_s W2 + b2`.
///
/// Fused logits are `sum_s logits_s`; the last-layer feature is `sum_s h_s`.
/// Weights are sized for `capacity` objects so the parameter count does not
/// depend on the scene; the control state is zero-padded and the unused
/// object classes are dropped from the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbDecoder {
    pub alpha: usize,
    pub capacity: usize,
    pub feature_dim: usize,
    pub scales: usize,
    pub hidden: usize,
    pub scale_inputs: Vec<SegmentId>,
    pub kappa_input: SegmentId,
    pub hidden_bias: SegmentId,
    pub output: SegmentId,
    pub output_bias: SegmentId,
}

/// Graph handles produced by [`ProbDecoder::decode_graph`].
pub struct DecodeVars {
    pub logits: Var,
    pub probs: Var,
    pub last_feature: Var,
}

impl ProbDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        alpha: usize,
        capacity: usize,
        feature_dim: usize,
        scales: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if alpha == 0 || alpha > capacity {
            return Err(Error::InvalidArgument(format!(
                "object count {alpha} must be in 1..={capacity}"
            )));
        }
        let in_dim = feature_dim * scales + capacity;
        let input = Normal::new(0.0, (2.0 / in_dim as f64).sqrt()).expect("valid normal");
        let scale_inputs = (0..scales)
            .map(|s| {
                let v = (0..feature_dim * hidden).map(|_| input.sample(rng)).collect();
                store.register(format!("{prefix}.in.s{s}"), feature_dim, hidden, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let kv = (0..capacity * hidden).map(|_| input.sample(rng)).collect();
        let kappa_input = store.register(format!("{prefix}.in.kappa"), capacity, hidden, kv)?;
        let hidden_bias = store.register(format!("{prefix}.in.bias"), 1, hidden, vec![0.0; hidden])?;
        let out = Normal::new(0.0, (0.5 / hidden as f64).sqrt()).expect("valid normal");
        let ov = (0..hidden * (capacity + 1)).map(|_| out.sample(rng)).collect();
        let output = store.register(format!("{prefix}.out"), hidden, capacity + 1, ov)?;
        let output_bias = store.register(format!("{prefix}.out.bias"), 1, capacity + 1, vec![0.0; capacity + 1])?;
        Ok(Self {
            alpha,
            capacity,
            feature_dim,
            scales,
            hidden,
            scale_inputs,
            kappa_input,
            hidden_bias,
            output,
            output_bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim * self.scales + self.alpha
    }

    /// Keeps the `alpha` live object columns and the background column.
    fn live_classes(&self, g: &mut Graph, logits: Var) -> Var {
        if self.alpha == self.capacity {
            return logits;
        }
        let objects = g.slice_cols(logits, 0, self.alpha);
        let bg = g.slice_cols(logits, self.capacity, 1);
        g.concat_cols(&[objects, bg])
    }

    /// Batched decode: `feats` is `N x (scales * F)`, `kappa` is `N x alpha`.
    pub fn decode_graph(&self, g: &mut Graph, feats: Var, kappa: Var) -> DecodeVars {
        let f = self.feature_dim;
        let n = g.shape(kappa).0;
        let kappa = if self.alpha < self.capacity {
            let pad = g.constant(Tensor::zeros(n, self.capacity - self.alpha));
            g.concat_cols(&[kappa, pad])
        } else {
            kappa
        };
        let kb = g.param(self.kappa_input);
        let b1 = g.param(self.hidden_bias);
        let w2 = g.param(self.output);
        let b2 = g.param(self.output_bias);
        let kterm = g.matmul(kappa, kb);
        let shared = g.add(kterm, b1);
        let mut hidden_sum: Option<Var> = None;
        for s in 0..self.scales {
            let fs = g.slice_cols(feats, s * f, f);
            let a = g.param(self.scale_inputs[s]);
            let pre = g.matmul(fs, a);
            let pre = g.add(pre, shared);
            let h = g.relu(pre);
            hidden_sum = Some(match hidden_sum {
                None => h,
                Some(acc) => g.add(acc, h),
            });
        }
        let hidden_sum = hidden_sum.expect("at least one scale");
        // the per-scale output layers share weights, so their summed logits
        // are one product with the summed hidden state
        let b2 = g.mul_scalar(b2, self.scales as f64);
        let logits = g.linear(hidden_sum, w2, b2);
        let logits = self.live_classes(g, logits);
        let probs = g.softmax_rows(logits);
        DecodeVars {
            logits,
            probs,
            last_feature: hidden_sum,
        }
    }

    /// Single-point decode returning `(probs, last_feature)`.
    pub fn decode(&self, store: &ParamStore, pos_feature: &[f64], kappa: &ControlState) -> Result<(Vec<f64>, Vec<f64>)> {
        if pos_feature.len() != self.feature_dim * self.scales || kappa.alpha() != self.alpha {
            return Err(Error::Shape(format!(
                "decoder expects {} features and {} interaction variables, got {} and {}",
                self.feature_dim * self.scales,
                self.alpha,
                pos_feature.len(),
                kappa.alpha()
            )));
        }
        let mut g = Graph::new(store);
        let feats = g.constant(Tensor::row_vector(pos_feature.to_vec()));
        let k = g.constant(Tensor::row_vector(kappa.kappa.clone()));
        let d = self.decode_graph(&mut g, feats, k);
        g.check()?;
        Ok((g.value(d.probs).data.clone(), g.value(d.last_feature).data.clone()))
    }

    /// Independent of `alpha`.
    pub fn parameter_count(&self) -> usize {
        self.scales * self.feature_dim * self.hidden
            + self.capacity * self.hidden
            + self.hidden
            + (self.hidden + 1) * (self.capacity + 1)
    }
}

/// Routing decision for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Selected object, or `-1` for the static background.
    pub u: i64,
    pub kappa_u: f64,
    /// `alpha` object probabilities followed by the background probability.
    pub probs: Vec<f64>,
}

/// Argmax over object classes (lowest index on ties), kept only when it
/// reaches `s` and strictly beats the background class. `kappa_u` is filled
/// by callers that know the control state.
pub fn select(probs: &[f64], s: f64) -> Selection {
    let u = select_index(probs, s);
    Selection {
        u,
        kappa_u: 0.0,
        probs: probs.to_vec(),
    }
}

pub(crate) fn select_index(probs: &[f64], s: f64) -> i64 {
    let alpha = probs.len() - 1;
    let bg = probs[alpha];
    let mut best = 0;
    for i in 1..alpha {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    if alpha > 0 && probs[best] >= s && probs[best] > bg {
        best as i64
    } else {
        -1
    }
}

impl Selection {
    pub fn with_kappa(mut self, kappa: &ControlState) -> Self {
        self.kappa_u = if self.u >= 0 { kappa.kappa[self.u as usize] } else { 0.0 };
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleSelection {
    pub fused: Selection,
    pub per_scale: Vec<Selection>,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sums logits over scales, applies one softmax and then [`select`].
pub fn select_multiscale(per_scale_logits: &[Vec<f64>], s: f64) -> MultiScaleSelection {
    assert!(!per_scale_logits.is_empty(), "at least one scale");
    let n = per_scale_logits[0].len();
    let mut fused = vec![0.0; n];
    for l in per_scale_logits {
        fused.iter_mut().zip(l).for_each(|(a, b)| *a += b);
    }
    MultiScaleSelection {
        fused: select(&softmax(&fused), s),
        per_scale: per_scale_logits.iter().map(|l| select(&softmax(l), s)).collect(),
    }
}

fn check_one_hot(mask: &[f64]) -> Result<usize> {
    let ones = mask.iter().filter(|&&m| m == 1.0).count();
    let zeros = mask.iter().filter(|&&m| m == 0.0).count();
    if ones != 1 || ones + zeros != mask.len() {
        return Err(Error::InvalidArgument(format!("mask {mask:?} is not one-hot")));
    }
    Ok(mask.iter().position(|&m| m == 1.0).unwrap())
}

pub const PROB_CLIP: f64 = 1e-7;

/// Focal loss per ray, averaged over the batch:
/// `beta * (1 - p_t)^gamma * (-log p_t)` with `p_t` the clipped probability
/// of the masked class.
pub fn focal_loss(rendered: &[Vec<f64>], masks: &[Vec<f64>], beta: f64, gamma: f64) -> Result<f64> {
    if rendered.len() != masks.len() || rendered.is_empty() {
        return Err(Error::Shape("focal loss needs one mask per ray".into()));
    }
    let mut total = 0.0;
    for (p, m) in rendered.iter().zip(masks) {
        if p.len() != m.len() {
            return Err(Error::Shape("mask and probability widths differ".into()));
        }
        let c = check_one_hot(m)?;
        let ce = -p[c].clamp(PROB_CLIP, 1.0).ln();
        total += beta * (1.0 - (-ce).exp()).powf(gamma) * ce;
    }
    Ok(total / rendered.len() as f64)
}

/// One-hot mask rows for class indices (`-1` maps to the background column).
pub fn one_hot(classes: &[i64], alpha: usize) -> Tensor {
    let mut t = Tensor::zeros(classes.len(), alpha + 1);
    for (r, &c) in classes.iter().enumerate() {
        let col = if c < 0 { alpha } else { c as usize };
        t.data[r * (alpha + 1) + col] = 1.0;
    }
    t
}

/// Differentiable focal loss over `probs` (`R x (alpha+1)`), mean over rows.
pub fn focal_graph(g: &mut Graph, probs: Var, masks: &Tensor, beta: f64, gamma: f64) -> Result<Var> {
    for r in 0..masks.rows {
        check_one_hot(masks.row(r))?;
    }
    let m = g.constant(masks.clone());
    let lo = g.max_scalar(probs, PROB_CLIP);
    let clipped = g.min_scalar(lo, 1.0);
    let logp = g.log(clipped);
    let picked = g.mul(logp, m);
    let log_pt = g.sum_rows(picked);
    let pt = g.exp(log_pt);
    let one_minus = g.rsub_scalar(1.0, pt);
    let modulating = g.pow_scalar(one_minus, gamma);
    let ce = g.neg(log_pt);
    let per_ray = g.mul(modulating, ce);
    let mean = g.mean(per_ray);
    Ok(g.mul_scalar(mean, beta))
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `ELU(K - ||a - b||)` for an eligible pair, 0 otherwise.
pub fn repulsion_loss(feat_a: &[f64], feat_b: &[f64], eligible: bool, k: f64) -> f64 {
    if !eligible {
        return 0.0;
    }
    let dist = feat_a
        .iter()
        .zip(feat_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    elu(k - dist)
}

/// Differentiable repulsion over sampled `(i, j)` row pairs of `feats`,
/// averaged over pairs. Returns `None` when no pair is given.
pub fn repulsion_graph(g: &mut Graph, feats: Var, pairs: &[(usize, usize)], k: f64) -> Option<Var> {
    if pairs.is_empty() {
        return None;
    }
    let a = g.gather_rows(feats, pairs.iter().map(|p| p.0).collect());
    let b = g.gather_rows(feats, pairs.iter().map(|p| p.1).collect());
    let d = g.sub(a, b);
    let d2 = g.square(d);
    let ss = g.sum_rows(d2);
    let ss = g.add_scalar(ss, 1e-12);
    let dist = g.pow_scalar(ss, 0.5);
    let margin = g.rsub_scalar(k, dist);
    let e = g.elu(margin);
    Some(g.mean(e))
}
