//! Training loop, evaluation, checkpoints and parameter accounting.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use gradcheck::{pipeline_gradcheck, GradCheckReport};
pub use loss::{total_loss, total_loss_with, weighted_terms, KappaMode, Lambdas, LossTerms, Required};
pub use metrics::{depth_l1, psnr, psnr_from_mse, ssim, Metrics, PSNR_CAP};

use crate::diffcore::{adam_step, lr_at, AdamState, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fieldplanes::laplacian_graph;
use crate::langfield::{ground, mean_iou, relevancy, state_caption, EmbedMode, TextEmbedder};
use crate::probfield::{focal_graph, one_hot, repulsion_graph, ControlState};
use crate::renderer::{generate_rays, render_batch, render_image, FieldModel, ModelConfig, Ray, RenderConfig, Variant};
use crate::scenegen::{Dataset, Split};

pub use crate::renderer::LearnableKappa;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    pub steps: u64,
    pub rays_per_batch: usize,
    pub samples_coarse: usize,
    pub samples_fine: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Rejection threshold `s`.
    pub threshold: f64,
    /// Repulsion margin `K`.
    pub repulsion_k: f64,
    pub repulsion_pairs: usize,
    pub focal_beta: f64,
    pub focal_gamma: f64,
    pub huber_delta: f64,
    /// Weight of the depth error inside the rendering term.
    pub depth_weight: f64,
    pub mode: KappaMode,
    /// Frames whose index is a multiple of this carry control-state labels
    /// in learnable mode.
    pub keyframe_every: usize,
    /// Test-split evaluation period in steps; 0 disables.
    pub eval_every: u64,
    pub grounding_threshold: f64,
    pub embed_mode: EmbedMode,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            steps: 3000,
            rays_per_batch: 512,
            samples_coarse: 32,
            samples_fine: 32,
            lr: 0.01,
            warmup: 100,
            threshold: 0.5,
            repulsion_k: 1.0,
            repulsion_pairs: 256,
            focal_beta: 0.5,
            focal_gamma: 1.5,
            huber_delta: 1.0,
            depth_weight: 1.0,
            mode: KappaMode::GtKappa,
            keyframe_every: 6,
            eval_every: 0,
            grounding_threshold: 0.6,
            embed_mode: EmbedMode::MaxProbRetrieval,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lambdas;
        let weights = [l.focal, l.repulsion, l.var, l.lang, l.smooth, self.depth_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and non-negative: {weights:?}")));
        }
        if self.rays_per_batch == 0 || self.samples_coarse == 0 {
            return Err(Error::InvalidArgument("rays per batch and coarse samples must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.threshold) || self.keyframe_every == 0 {
            return Err(Error::InvalidArgument("learning rate, threshold or keyframe period out of range".into()));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            samples_coarse: self.samples_coarse,
            samples_fine: self.samples_fine,
            threshold: self.threshold,
            white_background: true,
            embed_mode: self.embed_mode,
            ..RenderConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The model configuration specialised to a dataset.
    pub fn model_for(&self, ds: &Dataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.alpha = ds.alpha();
        m.lang_bins = ds.manifest.lang_bins;
        m.learnable_frames = match self.mode {
            KappaMode::LearnableKappa => Some(ds.frames.len()),
            KappaMode::GtKappa => None,
        };
        m
    }
}

/// One evaluation record of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(rename = "depthL1")]
    pub depth_l1: f64,
    pub miou: f64,
    pub loss: BTreeMap<String, f64>,
}

/// Per-step training statistics handed to observers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub breakdown: BTreeMap<String, f64>,
    /// PSNR of the batch's rendered colours.
    pub batch_psnr: f64,
}

pub struct TrainOutcome {
    pub model: FieldModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRecord>,
    pub steps: Vec<StepReport>,
}

struct TrainRays {
    frame: usize,
    rays: Vec<Ray>,
}

fn caption_embeddings(ds: &Dataset, dim: usize) -> Result<Vec<[Vec<f64>; 2]>> {
    let e = TextEmbedder::new(ds.manifest.spec.embed_seed, dim);
    ds.manifest
        .captions
        .iter()
        .map(|(c, o)| Ok([e.embed(c)?, e.embed(o)?]))
        .collect()
}

fn required_terms(model: &FieldModel, cfg: &TrainConfig) -> Required {
    Required {
        semantic: model.config.variant == Variant::Full,
        var: cfg.mode == KappaMode::LearnableKappa,
    }
}

/// Runs the optimisation loop.
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_| {})
}

pub fn train_with(cfg: &TrainConfig, ds: &Dataset, mut observer: impl FnMut(&StepReport)) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let train_frames = ds.split_indices(Split::Train);
    if train_frames.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training frames".into()));
    }
    let mut model = FieldModel::new(cfg.model_for(ds))?;
    let alpha = model.alpha();
    let captions = caption_embeddings(ds, model.config.lang_dim)?;
    let per_frame: Vec<TrainRays> = train_frames
        .iter()
        .map(|&f| {
            let cam = &ds.frames[f].camera;
            Ok(TrainRays {
                frame: f,
                rays: generate_rays(cam, &cam.all_pixels())?,
            })
        })
        .collect::<Result<_>>()?;
    let rcfg = cfg.render_config();
    let required = required_terms(&model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.store.len());
    let mut log = Vec::new();
    let mut reports = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps);
        let picks: Vec<(usize, usize)> = (0..cfg.rays_per_batch)
            .map(|_| {
                let t = rng.random_range(0..per_frame.len());
                (t, rng.random_range(0..per_frame[t].rays.len()))
            })
            .collect();
        let (grads, total, breakdown, batch_mse) = {
            let mut g = Graph::new(&model.store);
            let batch = Batch::assemble(ds, &per_frame, &picks, alpha);
            let (total, breakdown, rgb_mse) =
                build_objective(&model, &mut g, &batch, cfg, &rcfg, &captions, required, &mut rng, true)
                    .map_err(|e| at_step(e, step))?;
            g.check()?;
            let mut grads = vec![0.0; model.store.len()];
            g.backward(total, &mut grads);
            if let Some(i) = grads.iter().position(|x| !x.is_finite()) {
                let seg = model.store.segments().iter().find(|s| s.range().contains(&i)).map(|s| s.name.clone());
                return Err(Error::NonFinite {
                    context: format!("gradient of `{}` at step {step}", seg.unwrap_or_default()),
                });
            }
            (grads, g.scalar_value(total), breakdown, rgb_mse)
        };
        adam_step(&mut model.store, &grads, &mut adam, lr)?;
        let report = StepReport {
            step,
            lr,
            total,
            breakdown: breakdown.clone(),
            batch_psnr: psnr_from_mse(batch_mse),
        };
        observer(&report);
        reports.push(report);
        let done = step + 1;
        if done == cfg.steps {
            round_to_f32(&mut model);
        }
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps) {
            if let Some(mut rec) = evaluate_record(&model, ds, cfg, done)? {
                rec.loss = breakdown;
                log.push(rec);
            }
        }
    }
    round_to_f32(&mut model);
    let header = CheckpointHeader {
        train_config: cfg.clone(),
        model_config: model.config.clone(),
        step: cfg.steps,
        metrics: log.clone(),
        captions: ds.manifest.captions.clone(),
        embed_seed: ds.manifest.spec.embed_seed,
        cameras: ds.frames.iter().map(|f| f.camera.clone()).collect(),
        default_camera: ds.split_indices(Split::Test).first().copied().unwrap_or(0),
    };
    let checkpoint = Checkpoint::from_model(&model, header);
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        steps: reports,
    })
}

// Parameters are stored as f32; the returned model and the final metrics
// must describe exactly what a reload produces.
fn round_to_f32(model: &mut FieldModel) {
    model.store.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} at step {step}"),
        },
        e => e,
    }
}

/// Renders `batch` and assembles the weighted objective. Returns the total,
/// the unweighted per-term values and the colour MSE. `jitter` enables
/// stratified jitter and random importance samples.
#[allow(clippy::too_many_arguments)]
fn build_objective(
    model: &FieldModel,
    g: &mut Graph,
    batch: &Batch,
    cfg: &TrainConfig,
    rcfg: &RenderConfig,
    captions: &[[Vec<f64>; 2]],
    required: Required,
    rng: &mut ChaCha8Rng,
    jitter: bool,
) -> Result<(Var, BTreeMap<String, f64>, f64)> {
    let kappa = match (&model.learnable, cfg.mode) {
        (Some(lk), KappaMode::LearnableKappa) => lk.graph(g, &batch.frames),
        _ => g.constant(batch.kappa.clone()),
    };
    let out = render_batch(model, g, &batch.rays, kappa, rcfg, jitter.then_some(&mut *rng));
    let (terms, rgb_mse) = batch_losses(model, g, batch, &out, kappa, captions, cfg, rng)?;
    let parts = weighted_terms(&terms, &cfg.lambdas, required)?;
    let mut breakdown = BTreeMap::new();
    let mut total: Option<Var> = None;
    for &(name, w, v) in &parts {
        let value = g.scalar_value(v);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss term `{name}`"),
            });
        }
        breakdown.insert(name.to_string(), value);
        let scaled = g.mul_scalar(v, w);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    }
    Ok((total.expect("rendering term always present"), breakdown, rgb_mse))
}

fn evaluate_record(model: &FieldModel, ds: &Dataset, cfg: &TrainConfig, step: u64) -> Result<Option<MetricsRecord>> {
    if ds.split_indices(Split::Test).is_empty() {
        return Ok(None);
    }
    let m = evaluate(model, ds, Split::Test, &cfg.render_config(), cfg.grounding_threshold)?;
    Ok(Some(MetricsRecord {
        step,
        psnr: m.psnr,
        ssim: m.ssim,
        depth_l1: m.depth_l1,
        miou: m.miou,
        loss: BTreeMap::new(),
    }))
}

struct Batch {
    rays: Vec<Ray>,
    frames: Vec<usize>,
    kappa: Tensor,
    rgb: Tensor,
    depth: Vec<f64>,
    hit: Vec<f64>,
    mask: Vec<i64>,
}

impl Batch {
    fn assemble(ds: &Dataset, per_frame: &[TrainRays], picks: &[(usize, usize)], alpha: usize) -> Self {
        let n = picks.len();
        let mut b = Batch {
            rays: Vec::with_capacity(n),
            frames: Vec::with_capacity(n),
            kappa: Tensor::zeros(n, alpha),
            rgb: Tensor::zeros(n, 3),
            depth: Vec::with_capacity(n),
            hit: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
        };
        for (r, &(t, p)) in picks.iter().enumerate() {
            let tr = &per_frame[t];
            let f = &ds.frames[tr.frame];
            let ray = tr.rays[p];
            b.rays.push(ray);
            b.frames.push(tr.frame);
            b.kappa.data[r * alpha..(r + 1) * alpha].copy_from_slice(&f.kappa.kappa);
            for c in 0..3 {
                b.rgb.data[r * 3 + c] = f.rgb[p * 3 + c] as f64;
            }
            let d = f.depth[p] as f64;
            b.depth.push(d);
            b.hit.push(if d < (ray.far as f32) as f64 { 1.0 } else { 0.0 });
            b.mask.push(f.mask[p] as i64);
        }
        b
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_losses(
    model: &FieldModel,
    g: &mut Graph,
    batch: &Batch,
    out: &crate::renderer::BatchRender,
    kappa: Var,
    captions: &[[Vec<f64>; 2]],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossTerms<Var>, f64)> {
    let n = batch.rays.len();
    let alpha = model.alpha();
    let target = g.constant(batch.rgb.clone());
    let diff = g.sub(out.rgb, target);
    let sq = g.square(diff);
    let rgb_mse = g.mean(sq);
    let rgb_mse_value = g.scalar_value(rgb_mse);
    let mut mse = rgb_mse;
    let hits: f64 = batch.hit.iter().sum();
    if cfg.depth_weight > 0.0 && hits > 0.0 {
        let gt = g.constant(Tensor::column(batch.depth.clone()));
        let m = g.constant(Tensor::column(batch.hit.clone()));
        let d = g.sub(out.depth, gt);
        let d = g.mul(d, m);
        let d2 = g.square(d);
        let s = g.sum(d2);
        let dm = g.mul_scalar(s, cfg.depth_weight / hits);
        mse = g.add(mse, dm);
    }

    let mut terms = LossTerms {
        mse: Some(mse),
        ..Default::default()
    };

    if let (Some(pm), Some(feat)) = (out.prob_map, out.feature) {
        terms.focal = Some(focal_graph(g, pm, &one_hot(&batch.mask, alpha), cfg.focal_beta, cfg.focal_gamma)?);

        let objects: Vec<usize> = (0..n).filter(|&i| batch.mask[i] >= 0).collect();
        let mut pairs = Vec::new();
        if objects.iter().any(|&i| batch.mask[i] != batch.mask[objects[0]]) {
            while pairs.len() < cfg.repulsion_pairs {
                let i = objects[rng.random_range(0..objects.len())];
                let others: Vec<usize> = objects.iter().copied().filter(|&j| batch.mask[j] != batch.mask[i]).collect();
                if others.is_empty() {
                    continue;
                }
                pairs.push((i, others[rng.random_range(0..others.len())]));
            }
        }
        terms.repulsion = Some(match repulsion_graph(g, feat, &pairs, cfg.repulsion_k) {
            Some(v) => v,
            None => g.scalar(0.0),
        });

        // language: table lookup for the ray's mask owner against its state caption
        let table = &model.language;
        let kv = g.value(kappa).clone();
        let mut targets = vec![0.0; n * table.dim];
        let mut flat = Vec::with_capacity(n);
        for i in 0..n {
            let o = batch.mask[i];
            if o >= 0 {
                let ou = o as usize;
                // the model's own κ picks the caption, so learnable mode sees no dense labels
                let st = if kv.get(i, ou) < 0.5 { 0 } else { 1 };
                targets[i * table.dim..(i + 1) * table.dim].copy_from_slice(&captions[ou][st]);
                flat.push(i * alpha + ou);
            } else {
                flat.push(i * alpha);
            }
        }
        debug_assert_eq!(kv.rows, n);
        let ku = g.gather(kappa, flat, n, 1);
        let pred = g.table_lerp(table.seg, table.bins, batch.mask.clone(), ku);
        let t = g.constant(Tensor::new(n, table.dim, targets));
        let d = g.sub(pred, t);
        let h = g.huber(d, cfg.huber_delta);
        let s = g.sum(h);
        terms.lang = Some(g.mul_scalar(s, 1.0 / n as f64));
    }

    if cfg.mode == KappaMode::LearnableKappa {
        let rows: Vec<usize> = (0..n).filter(|&i| batch.frames[i] % cfg.keyframe_every == 0).collect();
        terms.var = Some(if rows.is_empty() {
            g.scalar(0.0)
        } else {
            let gt: Vec<f64> = rows.iter().flat_map(|&i| batch.kappa.row(i).to_vec()).collect();
            let nr = rows.len();
            let pred = g.gather_rows(kappa, rows);
            let gt = g.constant(Tensor::new(nr, alpha, gt));
            let d = g.sub(pred, gt);
            let d2 = g.square(d);
            g.mean(d2)
        });
    }

    let smooth_planes = match &model.local {
        Some(local) => &local.planes.0,
        None => &model.background,
    };
    terms.smooth = Some(laplacian_graph(g, smooth_planes));
    Ok((terms, rgb_mse_value))
}

/// Renders every frame of `split` at its ground-truth pose and control
/// state and averages the image, depth and grounding metrics.
pub fn evaluate(model: &FieldModel, ds: &Dataset, split: Split, rcfg: &RenderConfig, grounding_threshold: f64) -> Result<Metrics> {
    let frames = ds.split_indices(split);
    if frames.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is empty")));
    }
    let embedder = TextEmbedder::new(ds.manifest.spec.embed_seed, model.config.lang_dim);
    let (mut p, mut s, mut d, mut dn) = (0.0, 0.0, 0.0, 0usize);
    let mut ious = Vec::new();
    for &fi in &frames {
        let f = &ds.frames[fi];
        let img = render_image(model, &f.camera, &f.kappa, rcfg)?;
        let gt: Vec<f64> = f.rgb.iter().map(|&v| v as f64).collect();
        let rgb = img.rgb();
        p += psnr(&rgb, &gt)?;
        s += ssim(&rgb, &gt, f.width, f.height, 3)?;
        let gtd: Vec<f64> = f.depth.iter().map(|&v| v as f64).collect();
        if let Some(v) = depth_l1(&img.depth(), &gtd, &img.acc()) {
            d += v;
            dn += 1;
        }
        ious.extend(grounding_masks(model, &img, f, ds, &embedder, rcfg.threshold, grounding_threshold)?);
    }
    let n = frames.len() as f64;
    Ok(Metrics {
        psnr: p / n,
        ssim: s / n,
        depth_l1: if dn > 0 { d / dn as f64 } else { f64::NAN },
        miou: mean_iou(&ious)?,
        loss_breakdown: BTreeMap::new(),
    })
}

/// Predicted and ground-truth masks for each object's current-state caption.
pub fn grounding_masks(
    model: &FieldModel,
    img: &crate::renderer::RenderedImage,
    frame: &crate::scenegen::Frame,
    ds: &Dataset,
    embedder: &TextEmbedder,
    route_threshold: f64,
    grounding_threshold: f64,
) -> Result<Vec<(Vec<bool>, Vec<bool>)>> {
    let pixels: Vec<Vec<f64>> = img.samples.iter().map(|s| s.embed.clone()).collect();
    let labels = img.labels(route_threshold);
    (0..model.alpha())
        .map(|o| {
            let q = embedder.embed(state_caption(&ds.manifest.captions[o], frame.kappa.kappa[o]))?;
            let r = ground(relevancy(&pixels, &q), &labels, model.alpha(), img.width, img.height, grounding_threshold);
            let gt = frame.mask.iter().map(|&m| m == o as i32).collect();
            Ok((r.mask, gt))
        })
        .collect()
}

/// Appends records to a JSON-lines log.
pub fn write_metrics_log(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn kappa_for_frame(state: &LearnableKappa, model: &FieldModel, frame: usize) -> ControlState {
    state.kappa_for_frame(&model.store, frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParameterCounts {
    pub core: usize,
    pub language: usize,
    pub mk_planes_planes: usize,
    pub mk_planes_star_planes: usize,
}

/// Parameter totals for a model with `alpha` objects, alongside the plane
/// counts of the per-object-axis factorisations: `C(3 + alpha, 2)` planes
/// when every object adds an axis, `3 + 3 alpha` when each object owns its
/// own three κ planes.
pub fn count_parameters(config: &ModelConfig, alpha: usize) -> Result<ParameterCounts> {
    if alpha == 0 {
        return Err(Error::InvalidArgument("object count must be at least 1".into()));
    }
    let mut c = config.clone();
    c.alpha = alpha;
    c.learnable_frames = None;
    let model = FieldModel::new(c)?;
    let d = 3 + alpha;
    Ok(ParameterCounts {
        core: model.core_parameter_count(),
        language: model.language.parameter_count(),
        mk_planes_planes: d * (d - 1) / 2,
        mk_planes_star_planes: 3 + 3 * alpha,
    })
}

#[cfg(test)]
mod tests;
