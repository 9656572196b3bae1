//! Cameras and rays, stratified and importance sampling, the field model
//! bundle, and volume compositing of colour, depth, class maps and
//! language embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, SegmentId, Tensor, Var};
use crate::error::{Error, Result};
use crate::fieldplanes::{PlaneInit, PlaneSet3D, PlaneSet4D, PlaneSetJoint, PlaneStack};
use crate::langfield::{render_embedding, EmbedMode, LanguageTable, SampleRoute};
use crate::probfield::{select_index, ControlState, ProbDecoder};

/// Pinhole camera. `pose` is a row-major camera-to-world `[R | t]`; the
/// camera looks down its local `-z` with `+y` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: [f64; 12],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(pose: [f64; 12], fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            pose,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "camera needs positive focal lengths and size, got fx={} fy={} {}x{}",
                self.fx, self.fy, self.width, self.height
            )));
        }
        if self.pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("camera pose is not finite".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.pose[k * 4 + i] * self.pose[k * 4 + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Validation("camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, vertical field of view in degrees.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let back = normalize(sub3(eye, target));
        let right = normalize(cross(up, back));
        let cam_up = cross(back, right);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        #[rustfmt::skip]
        let pose = [
            right[0], cam_up[0], back[0], eye[0],
            right[1], cam_up[1], back[1], eye[1],
            right[2], cam_up[2], back[2], eye[2],
        ];
        Self::new(pose, f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.pose[3], self.pose[7], self.pose[11]]
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            pose: self.pose,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn all_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height).flat_map(|r| (0..self.width).map(move |c| (r, c))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

pub const MIN_NEAR: f64 = 0.01;

/// Entry and exit distances of a ray through the unit cube.
pub fn clip_to_unit_cube(origin: [f64; 3], direction: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if direction[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / direction[a];
        let (mut lo, mut hi) = ((0.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Rays through pixel centres. Near and far clip the ray to the unit cube;
/// a ray that misses the cube gets a short interval that renders empty.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    let p = &camera.pose;
    let origin = camera.origin();
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.height, camera.width
                )));
            }
            let xc = (col as f64 + 0.5 - camera.cx) / camera.fx;
            let yc = -(row as f64 + 0.5 - camera.cy) / camera.fy;
            let d = normalize([
                p[0] * xc + p[1] * yc - p[2],
                p[4] * xc + p[5] * yc - p[6],
                p[8] * xc + p[9] * yc - p[10],
            ]);
            let (near, far) = match clip_to_unit_cube(origin, d) {
                Some((t0, t1)) if t1 > MIN_NEAR.max(t0) + 1e-9 => (t0.max(MIN_NEAR), t1),
                _ => (MIN_NEAR, 2.0 * MIN_NEAR),
            };
            Ok(Ray {
                origin,
                direction: d,
                near,
                far,
            })
        })
        .collect()
}

/// One sample per uniform bin on `[near, far]`: jittered when `rng` is
/// given, bin midpoints otherwise.
pub fn sample_stratified(ray: &Ray, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    assert!(n >= 1);
    let step = (ray.far - ray.near) / n as f64;
    match rng {
        Some(rng) => (0..n).map(|i| ray.near + (i as f64 + rng.random::<f64>()) * step).collect(),
        None => (0..n).map(|i| ray.near + (i as f64 + 0.5) * step).collect(),
    }
}

/// Inverse-CDF sampling over the coarse intervals `[t_i, t_{i+1})` (the last
/// ending at `far`) with probabilities proportional to `weights + 1e-5`.
/// Returns the merged, strictly increasing sample list.
pub fn resample_pdf(t_coarse: &[f64], weights: &[f64], far: f64, n_fine: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    assert_eq!(t_coarse.len(), weights.len());
    let n = t_coarse.len();
    let mut edges = t_coarse.to_vec();
    edges.push(far.max(t_coarse[n - 1]));
    let mut pdf: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    pdf.iter_mut().for_each(|p| *p /= total);
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p);
    }
    let us: Vec<f64> = match rng {
        Some(rng) => (0..n_fine).map(|_| rng.random::<f64>()).collect(),
        None => (0..n_fine).map(|j| (j as f64 + 0.5) / n_fine as f64).collect(),
    };
    let mut out = t_coarse.to_vec();
    for u in us {
        let u = u.min(cdf[n] * (1.0 - 1e-12));
        let i = cdf.partition_point(|&c| c <= u).clamp(1, n) - 1;
        let frac = ((u - cdf[i]) / pdf[i]).clamp(0.0, 1.0);
        out.push(edges[i] + frac * (edges[i + 1] - edges[i]));
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for i in 1..out.len() {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] + 1e-9;
        }
    }
    out
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub payload: Vec<f64>,
    pub depth: f64,
    pub weights: Vec<f64>,
    pub acc: f64,
}

/// Intervals between samples; the last runs to `far`.
pub fn deltas(ts: &[f64], far: f64) -> Vec<f64> {
    let n = ts.len();
    (0..n)
        .map(|i| if i + 1 < n { ts[i + 1] - ts[i] } else { (far - ts[i]).max(0.0) })
        .collect()
}

/// `w_i = T_i (1 - exp(-sigma_i delta_i))`, `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn composite(sigmas: &[f64], values: &[Vec<f64>], ts: &[f64], far: f64) -> Result<Composite> {
    if sigmas.len() != ts.len() || values.len() != ts.len() || ts.is_empty() {
        return Err(Error::Shape("composite: sigma, value and t counts differ".into()));
    }
    if ts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("composite: sample positions must increase strictly".into()));
    }
    let dim = values[0].len();
    let mut payload = vec![0.0; dim];
    let mut weights = Vec::with_capacity(ts.len());
    let mut optical = 0.0f64;
    let mut acc = 0.0f64;
    let mut depth = 0.0;
    for (i, d) in deltas(ts, far).into_iter().enumerate() {
        let tau = sigmas[i] * d;
        let w = (-optical).exp() * (1.0 - (-tau).exp());
        optical += tau;
        weights.push(w);
        acc += w;
        depth += w * ts[i];
        payload.iter_mut().zip(&values[i]).for_each(|(p, v)| *p += w * v);
    }
    Ok(Composite {
        payload,
        depth: depth / acc.max(1e-6),
        weights,
        acc,
    })
}

/// Perceptron with ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<(SegmentId, SegmentId)>,
    pub dims: Vec<usize>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (i, o) = (dims[l], dims[l + 1]);
            let last = l + 2 == dims.len();
            let std = if last { (1.0 / i as f64).sqrt() } else { (2.0 / i as f64).sqrt() };
            let dist = Normal::new(0.0, std).expect("valid normal");
            let w = store.register(format!("{prefix}.w{l}"), i, o, (0..i * o).map(|_| dist.sample(rng)).collect())?;
            let b = store.register(format!("{prefix}.b{l}"), 1, o, vec![0.0; o])?;
            layers.push((w, b));
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(w);
            let bv = g.param(b);
            h = g.linear(h, wv, bv);
            if l + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn parameter_count(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Maps a fused plane feature to `(sigma, rgb)`: softplus density scaled by
/// `density_scale`, sigmoid colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityColorDecoder {
    pub mlp: Mlp,
    pub density_scale: f64,
}

impl DensityColorDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, density_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, prefix, &[in_dim, hidden, hidden, 4], rng)?,
            density_scale,
        })
    }

    /// Returns `(sigma N x 1, rgb N x 3)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let raw = self.mlp.forward(g, x);
        self.heads(g, raw)
    }

    pub fn heads(&self, g: &mut Graph, raw: Var) -> (Var, Var) {
        let s = g.slice_cols(raw, 0, 1);
        let s = g.softplus(s);
        let sigma = g.mul_scalar(s, self.density_scale);
        let c = g.slice_cols(raw, 1, 3);
        (sigma, g.sigmoid(c))
    }

    pub fn decode_point(&self, store: &ParamStore, feature: &[f64]) -> (f64, [f64; 3]) {
        let mut g = Graph::new(store);
        let x = g.constant(Tensor::row_vector(feature.to_vec()));
        let (s, c) = self.forward(&mut g, x);
        let c = &g.value(c).data;
        (g.scalar_value(s), [c[0], c[1], c[2]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Probability-routed local 4D fields plus a static background field.
    #[default]
    Full,
    /// One static 3D field whose decoder also reads the control state; no
    /// routing and no probability field.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub alpha: usize,
    /// Object slots the probability decoder is sized for.
    pub capacity: usize,
    pub feature_dim: usize,
    pub spatial_res: Vec<usize>,
    pub kappa_res: Vec<usize>,
    pub prob_hidden: usize,
    pub decoder_hidden: usize,
    pub density_scale: f64,
    pub lang_bins: usize,
    pub lang_dim: usize,
    pub variant: Variant,
    /// Frame count when the per-frame control state is learned.
    pub learnable_frames: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            capacity: 6,
            feature_dim: 16,
            spatial_res: vec![16, 32, 64],
            kappa_res: vec![8, 16, 32],
            prob_hidden: 64,
            decoder_hidden: 32,
            density_scale: 10.0,
            lang_bins: 8,
            lang_dim: 16,
            variant: Variant::Full,
            learnable_frames: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalField {
    pub planes: PlaneSet4D,
    pub decoder: DensityColorDecoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbField {
    pub planes: PlaneSet3D,
    pub decoder: ProbDecoder,
}

/// Learned per-frame control state: a `nodes x alpha` grid interpolated over
/// frame index and squashed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableKappa {
    pub frames: usize,
    pub nodes: usize,
    pub alpha: usize,
    pub seg: SegmentId,
}

impl LearnableKappa {
    pub fn new(store: &mut ParamStore, frames: usize, alpha: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("learnable control state needs frames".into()));
        }
        let nodes = frames.div_ceil(2).max(2);
        let seg = store.register("kappa.grid", nodes, alpha, vec![0.0; nodes * alpha])?;
        Ok(Self {
            frames,
            nodes,
            alpha,
            seg,
        })
    }

    /// Two grid nodes and the weight on the second.
    pub fn locate(&self, frame: usize) -> (usize, usize, f64) {
        let pos = if self.frames > 1 {
            frame as f64 * (self.nodes - 1) as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        let i0 = (pos.floor() as usize).min(self.nodes - 2);
        (i0, i0 + 1, pos - i0 as f64)
    }

    pub fn kappa_for_frame(&self, store: &ParamStore, frame: usize) -> ControlState {
        let (i0, i1, t) = self.locate(frame);
        let v = store.seg_values(self.seg);
        let k = (0..self.alpha)
            .map(|a| {
                let x = if t == 0.0 {
                    v[i0 * self.alpha + a]
                } else {
                    (1.0 - t) * v[i0 * self.alpha + a] + t * v[i1 * self.alpha + a]
                };
                1.0 / (1.0 + (-x).exp())
            })
            .collect();
        ControlState { kappa: k }
    }

    /// `frames.len() x alpha` control states as a differentiable node.
    pub fn graph(&self, g: &mut Graph, frames: &[usize]) -> Var {
        let grid = g.param(self.seg);
        let mut i0 = Vec::with_capacity(frames.len());
        let mut i1 = Vec::with_capacity(frames.len());
        let mut w0 = Vec::with_capacity(frames.len() * self.alpha);
        let mut w1 = Vec::with_capacity(frames.len() * self.alpha);
        for &f in frames {
            let (a, b, t) = self.locate(f);
            i0.push(a);
            i1.push(b);
            w0.extend(std::iter::repeat_n(1.0 - t, self.alpha));
            w1.extend(std::iter::repeat_n(t, self.alpha));
        }
        let n = frames.len();
        let g0 = g.gather_rows(grid, i0);
        let g1 = g.gather_rows(grid, i1);
        let c0 = g.constant(Tensor::new(n, self.alpha, w0));
        let c1 = g.constant(Tensor::new(n, self.alpha, w1));
        let a = g.mul(g0, c0);
        let b = g.mul(g1, c1);
        let x = g.add(a, b);
        g.sigmoid(x)
    }
}

/// Every learned component of the scene representation, backed by one
/// parameter store.
#[derive(Clone, Debug)]
pub struct FieldModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub local: Option<LocalField>,
    pub prob: Option<ProbField>,
    /// Static 3D planes for the full model; the joint `(x, kappa_0..)` field
    /// for the baseline.
    pub background: PlaneStack,
    pub background_decoder: DensityColorDecoder,
    pub language: LanguageTable,
    pub learnable: Option<LearnableKappa>,
}

impl FieldModel {
    /// Builds and initialises every segment; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.alpha == 0 || config.alpha > config.capacity {
            return Err(Error::InvalidArgument(format!(
                "object count {} must be in 1..={}",
                config.alpha, config.capacity
            )));
        }
        if config.spatial_res.len() != config.kappa_res.len() || config.spatial_res.is_empty() {
            return Err(Error::InvalidArgument("spatial and kappa resolutions need one entry per scale".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let f = config.feature_dim;
        let scales = config.spatial_res.len();
        let unit = PlaneInit::Uniform { lo: 0.9, hi: 1.1 };
        let (local, prob, bg_in) = match config.variant {
            Variant::Full => {
                let planes = PlaneSet4D::new(&mut store, "local", &config.spatial_res, &config.kappa_res, f, unit, &mut rng)?;
                let decoder = DensityColorDecoder::new(
                    &mut store,
                    "local.dec",
                    f * scales,
                    config.decoder_hidden,
                    config.density_scale,
                    &mut rng,
                )?;
                let pplanes = PlaneSet3D::new(
                    &mut store,
                    "prob",
                    &config.spatial_res,
                    f,
                    PlaneInit::Gaussian { mean: 0.0, std: 0.1 },
                    &mut rng,
                )?;
                let pdec = ProbDecoder::new(
                    &mut store,
                    "prob.dec",
                    config.alpha,
                    config.capacity,
                    f,
                    scales,
                    config.prob_hidden,
                    &mut rng,
                )?;
                (
                    Some(LocalField { planes, decoder }),
                    Some(ProbField {
                        planes: pplanes,
                        decoder: pdec,
                    }),
                    f * scales,
                )
            }
            Variant::Joint => (None, None, f * scales),
        };
        let background = match config.variant {
            Variant::Full => PlaneSet3D::new(&mut store, "static", &config.spatial_res, f, unit, &mut rng)?.0,
            Variant::Joint => {
                PlaneSetJoint::new(&mut store, "joint", config.alpha, &config.spatial_res, &config.kappa_res, f, unit, &mut rng)?
                    .0
            }
        };
        let background_decoder = DensityColorDecoder::new(
            &mut store,
            "static.dec",
            bg_in,
            config.decoder_hidden,
            config.density_scale,
            &mut rng,
        )?;
        let language = LanguageTable::new(&mut store, "lang", config.alpha, config.lang_bins, config.lang_dim, &mut rng)?;
        let learnable = match config.learnable_frames {
            Some(n) => Some(LearnableKappa::new(&mut store, n, config.alpha)?),
            None => None,
        };
        Ok(Self {
            config,
            store,
            local,
            prob,
            background,
            background_decoder,
            language,
            learnable,
        })
    }

    pub fn alpha(&self) -> usize {
        self.config.alpha
    }

    /// Parameters of planes and decoders: everything except the language
    /// table and any learned per-frame control state.
    pub fn core_parameter_count(&self) -> usize {
        let extra = self.learnable.as_ref().map_or(0, |l| l.nodes * l.alpha);
        self.store.len() - self.language.parameter_count() - extra
    }
}

/// Sampling and output options for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_coarse: usize,
    pub samples_fine: usize,
    /// Rejection threshold for routing samples to an object field.
    pub threshold: f64,
    pub white_background: bool,
    pub embed_mode: EmbedMode,
    /// Rays per graph when rendering whole images.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_coarse: 32,
            samples_fine: 32,
            threshold: 0.5,
            white_background: true,
            embed_mode: EmbedMode::MaxProbRetrieval,
            chunk: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSample {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub acc: f64,
    pub prob_map: Vec<f64>,
    pub embed: Vec<f64>,
}

/// Per-sample field outputs inside a graph.
pub struct SampleOutputs {
    pub sigma: Var,
    pub rgb: Var,
    /// `N x (alpha + 1)` class probabilities (Full variant only).
    pub probs: Option<Var>,
    pub hidden: Option<Var>,
    /// Selected object per sample, `-1` for background.
    pub routes: Vec<i64>,
}

fn in_bounds(p: &[f64; 3]) -> bool {
    p.iter().all(|&c| (-1e-9..=1.0 + 1e-9).contains(&c))
}

/// Queries the model at `points`; sample `i` belongs to ray `ray_of[i]`
/// whose control state is row `ray_of[i]` of `kappa` (`R x alpha`).
pub fn eval_samples(model: &FieldModel, g: &mut Graph, points: &[[f64; 3]], ray_of: &[usize], kappa: Var, threshold: f64) -> SampleOutputs {
    let n = points.len();
    let alpha = model.alpha();
    let xyz = g.constant(Tensor::new(n, 3, points.iter().flatten().copied().collect()));
    let kn = g.gather_rows(kappa, ray_of.to_vec());
    let inside: Vec<f64> = points.iter().map(|p| if in_bounds(p) { 1.0 } else { 0.0 }).collect();
    let all_inside = inside.iter().all(|&v| v == 1.0);

    let (sigma, rgb, probs, hidden, routes) = match (&model.prob, &model.local) {
        (Some(prob), Some(local)) => {
            let pf = prob.planes.0.query_graph(g, xyz);
            let dec = prob.decoder.decode_graph(g, pf, kn);
            let pv = g.value(dec.probs);
            let routes: Vec<i64> = (0..n)
                .map(|i| if inside[i] == 1.0 { select_index(pv.row(i), threshold) } else { -1 })
                .collect();
            let obj: Vec<usize> = (0..n).filter(|&i| routes[i] >= 0).collect();
            let bg: Vec<usize> = (0..n).filter(|&i| routes[i] < 0).collect();
            let mut parts = Vec::new();
            if !obj.is_empty() {
                let xo = g.constant(Tensor::new(
                    obj.len(),
                    3,
                    obj.iter().flat_map(|&i| points[i]).collect(),
                ));
                let flat = obj.iter().map(|&i| ray_of[i] * alpha + routes[i] as usize).collect();
                let ku = g.gather(kappa, flat, obj.len(), 1);
                let c4 = g.concat_cols(&[xo, ku]);
                let feat = local.planes.0.query_graph(g, c4);
                parts.push(local.decoder.mlp.forward(g, feat));
            }
            if !bg.is_empty() {
                let xb = g.constant(Tensor::new(bg.len(), 3, bg.iter().flat_map(|&i| points[i]).collect()));
                let feat = model.background.query_graph(g, xb);
                parts.push(model.background_decoder.mlp.forward(g, feat));
            }
            let raw = if parts.len() == 1 {
                parts[0]
            } else {
                let stacked = g.concat_rows(&parts);
                let mut inverse = vec![0; n];
                for (pos, &i) in obj.iter().chain(&bg).enumerate() {
                    inverse[i] = pos;
                }
                g.gather_rows(stacked, inverse)
            };
            // both decoders share the density scale
            let (sigma, rgb) = model.background_decoder.heads(g, raw);
            (sigma, rgb, Some(dec.probs), Some(dec.last_feature), routes)
        }
        _ => {
            let coords = g.concat_cols(&[xyz, kn]);
            let feat = model.background.query_graph(g, coords);
            let (sigma, rgb) = model.background_decoder.forward(g, feat);
            (sigma, rgb, None, None, vec![-1; n])
        }
    };
    let sigma = if all_inside {
        sigma
    } else {
        let m = g.constant(Tensor::column(inside));
        g.mul(sigma, m)
    };
    SampleOutputs {
        sigma,
        rgb,
        probs,
        hidden,
        routes,
    }
}

/// Compositing weights for `R` rays of `S` samples each: returns the
/// weights as `N x 1` and `R x S`, and `acc` as `R x 1`.
pub fn composite_graph(g: &mut Graph, sigma: Var, deltas: Tensor) -> (Var, Var, Var) {
    let (r, s) = deltas.shape();
    let sig = g.reshape(sigma, r, s);
    let d = g.constant(deltas);
    let tau = g.mul(sig, d);
    let cum = g.cumsum_exclusive(tau);
    let ncum = g.neg(cum);
    let trans = g.exp(ncum);
    let ntau = g.neg(tau);
    let e = g.exp(ntau);
    let alpha = g.rsub_scalar(1.0, e);
    let w = g.mul(trans, alpha);
    let acc = g.sum_rows(w);
    let col = g.reshape(w, r * s, 1);
    (col, w, acc)
}

/// `sum_i w_i * values_i` per ray.
pub fn composite_payload(g: &mut Graph, values: Var, weights_col: Var, samples: usize) -> Var {
    let wv = g.mul(values, weights_col);
    g.segment_sum(wv, samples)
}

/// Graph handles for one rendered batch.
pub struct BatchRender {
    pub rgb: Var,
    pub depth: Var,
    pub acc: Var,
    pub prob_map: Option<Var>,
    /// Composited last-layer probability features.
    pub feature: Option<Var>,
    pub samples: usize,
    pub ts: Vec<Vec<f64>>,
    pub routes: Vec<i64>,
    pub weights: Vec<f64>,
}

/// Renders `rays` differentiably. `kappa` is `R x alpha`. Sample positions
/// come from a forward-only coarse pass and are fixed before the fine pass;
/// `rng` enables jitter and random importance samples.
pub fn render_batch(
    model: &FieldModel,
    g: &mut Graph,
    rays: &[Ray],
    kappa: Var,
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> BatchRender {
    let r = rays.len();
    let kvals = g.value(kappa).clone();
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .map(|ray| sample_stratified(ray, cfg.samples_coarse, rng.as_deref_mut()))
        .collect();
    let ts: Vec<Vec<f64>> = if cfg.samples_fine == 0 {
        coarse
    } else {
        let mut cg = Graph::new(&model.store);
        let kc = cg.constant(kvals);
        let sc = cfg.samples_coarse;
        let (points, ray_of) = sample_points(rays, &coarse);
        let out = eval_samples(model, &mut cg, &points, &ray_of, kc, cfg.threshold);
        let d = deltas_tensor(rays, &coarse);
        let (_, w, _) = composite_graph(&mut cg, out.sigma, d);
        let w = cg.value(w);
        rays.iter()
            .enumerate()
            .map(|(i, ray)| resample_pdf(&coarse[i], &w.data[i * sc..(i + 1) * sc], ray.far, cfg.samples_fine, rng.as_deref_mut()))
            .collect()
    };
    let s = ts[0].len();
    let (points, ray_of) = sample_points(rays, &ts);
    let out = eval_samples(model, g, &points, &ray_of, kappa, cfg.threshold);
    let d = deltas_tensor(rays, &ts);
    let (wcol, wmat, acc) = composite_graph(g, out.sigma, d);
    let mut rgb = composite_payload(g, out.rgb, wcol, s);
    let empty = g.rsub_scalar(1.0, acc);
    if cfg.white_background {
        rgb = g.add(rgb, empty);
    }
    let tconst = g.constant(Tensor::new(r, s, ts.iter().flatten().copied().collect()));
    let wt = g.mul(wmat, tconst);
    let wt = g.sum_rows(wt);
    let safe = g.max_scalar(acc, 1e-6);
    let depth = g.div(wt, safe);
    let alpha = model.alpha();
    let prob_map = out.probs.map(|p| {
        let pm = composite_payload(g, p, wcol, s);
        let objects = g.slice_cols(pm, 0, alpha);
        let bg = g.slice_cols(pm, alpha, 1);
        let bg = g.add(bg, empty);
        g.concat_cols(&[objects, bg])
    });
    let feature = out.hidden.map(|h| composite_payload(g, h, wcol, s));
    let weights = g.value(wcol).data.clone();
    BatchRender {
        rgb,
        depth,
        acc,
        prob_map,
        feature,
        samples: s,
        ts,
        routes: out.routes,
        weights,
    }
}

fn sample_points(rays: &[Ray], ts: &[Vec<f64>]) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut points = Vec::new();
    let mut ray_of = Vec::new();
    for (i, (ray, t)) in rays.iter().zip(ts).enumerate() {
        for &tt in t {
            points.push(ray.at(tt));
            ray_of.push(i);
        }
    }
    (points, ray_of)
}

fn deltas_tensor(rays: &[Ray], ts: &[Vec<f64>]) -> Tensor {
    let s = ts[0].len();
    let data = rays.iter().zip(ts).flat_map(|(ray, t)| deltas(t, ray.far)).collect();
    Tensor::new(rays.len(), s, data)
}

/// Renders rays at one control state without jitter. Chunks are rendered in
/// parallel; output order follows `rays`.
pub fn render_rays(model: &FieldModel, rays: &[Ray], kappa: &ControlState, cfg: &RenderConfig) -> Result<Vec<RenderSample>> {
    if kappa.alpha() != model.alpha() {
        return Err(Error::Shape(format!(
            "control state has {} entries, model has {} objects",
            kappa.alpha(),
            model.alpha()
        )));
    }
    let chunk = cfg.chunk.max(1);
    let parts: Vec<Result<Vec<RenderSample>>> = rays
        .par_chunks(chunk)
        .map(|c| render_chunk(model, c, kappa, cfg))
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn render_chunk(model: &FieldModel, rays: &[Ray], kappa: &ControlState, cfg: &RenderConfig) -> Result<Vec<RenderSample>> {
    let r = rays.len();
    let alpha = model.alpha();
    let mut g = Graph::new(&model.store);
    let k = g.constant(Tensor::new(r, alpha, kappa.kappa.iter().cycle().take(r * alpha).copied().collect()));
    let b = render_batch(model, &mut g, rays, k, cfg, None);
    g.check()?;
    let rgb = g.value(b.rgb);
    let depth = g.value(b.depth);
    let acc = g.value(b.acc);
    let pm = b.prob_map.map(|p| g.value(p).clone());
    let s = b.samples;
    (0..r)
        .map(|i| {
            let prob_map = match &pm {
                Some(p) => p.row(i).to_vec(),
                None => {
                    let mut v = vec![0.0; alpha + 1];
                    v[alpha] = 1.0;
                    v
                }
            };
            let routes: Vec<SampleRoute> = (0..s)
                .map(|j| SampleRoute {
                    u: b.routes[i * s + j],
                    weight: b.weights[i * s + j],
                })
                .collect();
            let embed = render_embedding(&routes, &prob_map, &model.language, &model.store, cfg.embed_mode, kappa, cfg.threshold);
            let sample = RenderSample {
                rgb: [rgb.get(i, 0), rgb.get(i, 1), rgb.get(i, 2)],
                depth: depth.get(i, 0),
                acc: acc.get(i, 0),
                prob_map,
                embed,
            };
            if sample.rgb.iter().chain([&sample.depth, &sample.acc]).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("rendered ray {i}"),
                });
            }
            Ok(sample)
        })
        .collect()
}

pub fn render_ray(model: &FieldModel, ray: &Ray, kappa: &ControlState, cfg: &RenderConfig) -> Result<RenderSample> {
    Ok(render_rays(model, std::slice::from_ref(ray), kappa, cfg)?.remove(0))
}

/// A full rendered image in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<RenderSample>,
}

impl RenderedImage {
    pub fn rgb(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|s| s.rgb).collect()
    }

    pub fn depth(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.depth).collect()
    }

    pub fn acc(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.acc).collect()
    }

    /// Routed object per pixel from the composited class map.
    pub fn labels(&self, threshold: f64) -> Vec<i64> {
        self.samples.iter().map(|s| select_index(&s.prob_map, threshold)).collect()
    }
}

pub fn render_image(model: &FieldModel, camera: &Camera, kappa: &ControlState, cfg: &RenderConfig) -> Result<RenderedImage> {
    let rays = generate_rays(camera, &camera.all_pixels())?;
    Ok(RenderedImage {
        width: camera.width,
        height: camera.height,
        samples: render_rays(model, &rays, kappa, cfg)?,
    })
}

#[cfg(test)]
mod tests;
