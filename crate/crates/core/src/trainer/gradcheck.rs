//! Central-difference check of the complete render-and-loss pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{build_objective, caption_embeddings, required_terms, Batch, KappaMode, Lambdas, TrainConfig, TrainRays};
use crate::diffcore::{evaluate, grad_check};
use crate::error::Result;
use crate::renderer::{generate_rays, FieldModel, ModelConfig};
use crate::scenegen::toy_dataset;

pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameters: usize,
    pub rays: usize,
    pub samples: usize,
    /// Loss terms in the checked objective.
    pub terms: Vec<String>,
}

/// Builds a small learnable-κ model on a 6-frame toy scene, renders 4 rays
/// with 8 samples each, and compares every parameter's analytic gradient of
/// the full objective (all terms at unit weight) with central differences.
pub fn pipeline_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let frames = 6;
    let ds = toy_dataset(frames, 8, 8, seed)?;
    let cfg = TrainConfig {
        samples_coarse: 8,
        samples_fine: 0,
        mode: KappaMode::LearnableKappa,
        keyframe_every: 1,
        repulsion_pairs: 4,
        lambdas: Lambdas {
            focal: 1.0,
            repulsion: 1.0,
            var: 1.0,
            lang: 1.0,
            smooth: 1.0,
        },
        model: ModelConfig {
            capacity: 3,
            feature_dim: 4,
            spatial_res: vec![4, 6],
            kappa_res: vec![3, 4],
            prob_hidden: 8,
            decoder_hidden: 8,
            density_scale: 2.0,
            lang_dim: 4,
            seed,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut model = FieldModel::new(cfg.model_for(&ds))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = model.learnable.as_ref().expect("learnable mode").seg;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    model.store.seg_values_mut(grid).iter_mut().for_each(|v| *v = normal.sample(&mut rng));

    let per_frame: Vec<TrainRays> = (0..frames)
        .map(|f| {
            let cam = &ds.frames[f].camera;
            Ok(TrainRays {
                frame: f,
                rays: generate_rays(cam, &cam.all_pixels())?,
            })
        })
        .collect::<Result<_>>()?;
    // one ray on each object plus two others, so every term is active
    let mut picks = Vec::new();
    for want in [0, 1, -1] {
        'search: for (t, f) in ds.frames.iter().enumerate() {
            for (p, &m) in f.mask.iter().enumerate() {
                if m == want && !picks.contains(&(t, p)) {
                    picks.push((t, p));
                    break 'search;
                }
            }
        }
    }
    let mut p = 0;
    while picks.len() < 4 {
        let cand = (frames - 1, p);
        if !picks.contains(&cand) {
            picks.push(cand);
        }
        p += 1;
    }
    let batch = Batch::assemble(&ds, &per_frame, &picks, model.alpha());
    let captions = caption_embeddings(&ds, model.config.lang_dim)?;
    let rcfg = cfg.render_config();
    let required = required_terms(&model, &cfg);

    let mut g = crate::diffcore::Graph::new(&model.store);
    let (_, breakdown, _) =
        build_objective(&model, &mut g, &batch, &cfg, &rcfg, &captions, required, &mut ChaCha8Rng::seed_from_u64(seed), false)?;
    let objective = |g: &mut crate::diffcore::Graph| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_objective(&model, g, &batch, &cfg, &rcfg, &captions, required, &mut rng, false)
            .expect("objective validated above")
            .0
    };
    evaluate(&model.store, objective)?;
    let max_rel_error = grad_check(&model.store, objective, GRADCHECK_STEP)?;
    Ok(GradCheckReport {
        max_rel_error,
        parameters: model.store.len(),
        rays: batch.rays.len(),
        samples: cfg.samples_coarse + cfg.samples_fine,
        terms: breakdown.into_keys().collect(),
    })
}
