use super::*;
use crate::scenegen::toy_dataset;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        capacity: 3,
        feature_dim: 4,
        spatial_res: vec![4, 8],
        kappa_res: vec![3, 4],
        prob_hidden: 8,
        decoder_hidden: 8,
        density_scale: 4.0,
        lang_dim: 4,
        ..ModelConfig::default()
    }
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        rays_per_batch: 32,
        samples_coarse: 8,
        samples_fine: 4,
        warmup: 2,
        repulsion_pairs: 16,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn tiny_data() -> Dataset {
    toy_dataset(12, 12, 12, 3).unwrap()
}

fn unit_terms(var: bool) -> LossTerms<f64> {
    LossTerms {
        mse: Some(1.0),
        focal: Some(1.0),
        repulsion: Some(1.0),
        var: var.then_some(1.0),
        lang: Some(1.0),
        smooth: Some(1.0),
    }
}

#[test]
fn unit_components_sum_with_paper_weights() {
    let (t, b) = total_loss(&unit_terms(true), &Lambdas::default(), KappaMode::LearnableKappa).unwrap();
    assert_eq!(t, 1.0 + 1e-3 + 1e-2 + 1e-3 + 1.0 + 1e-3);
    assert!((t - 2.013).abs() < 1e-12);
    assert_eq!(b.len(), 6);

    let zero = LossTerms {
        mse: Some(0.0),
        focal: Some(0.0),
        repulsion: Some(0.0),
        var: None,
        lang: Some(0.0),
        smooth: Some(0.0),
    };
    assert_eq!(total_loss(&zero, &Lambdas::default(), KappaMode::GtKappa).unwrap().0, 0.0);
}

#[test]
fn var_term_only_in_learnable_mode() {
    let (_, b) = total_loss(&unit_terms(false), &Lambdas::default(), KappaMode::GtKappa).unwrap();
    assert!(!b.contains_key("var"));
    assert!(matches!(
        total_loss(&unit_terms(false), &Lambdas::default(), KappaMode::LearnableKappa),
        Err(Error::MissingLossTerm("var"))
    ));
    assert!(total_loss(&unit_terms(true), &Lambdas::default(), KappaMode::GtKappa).is_err());
    let mut t = unit_terms(false);
    t.lang = None;
    assert!(matches!(total_loss(&t, &Lambdas::default(), KappaMode::GtKappa), Err(Error::MissingLossTerm("lang"))));
}

#[test]
fn nan_term_is_named() {
    let mut t = unit_terms(false);
    t.repulsion = Some(f64::NAN);
    match total_loss(&t, &Lambdas::default(), KappaMode::GtKappa) {
        Err(Error::NonFinite { context }) => assert!(context.contains("repulsion")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn breakdown_reweights_to_total() {
    let terms = LossTerms {
        mse: Some(0.37),
        focal: Some(2.5),
        repulsion: Some(0.11),
        var: Some(0.02),
        lang: Some(0.9),
        smooth: Some(13.0),
    };
    let l = Lambdas::default();
    let (t, b) = total_loss(&terms, &l, KappaMode::LearnableKappa).unwrap();
    let re = b["mse"] + l.focal * b["focal"] + l.repulsion * b["repulsion"] + l.var * b["var"] + l.lang * b["lang"] + l.smooth * b["smooth"];
    assert!((t - re).abs() < 1e-10);
}

#[test]
fn psnr_identities() {
    let gt: Vec<f64> = (0..432).map(|i| (i % 7) as f64 / 10.0 + 0.2).collect();
    // alternating ±0.1 gives MSE exactly 0.01
    let noisy: Vec<f64> = gt.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
    assert!((psnr(&noisy, &gt).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&gt, &gt).unwrap(), PSNR_CAP);
    assert!((ssim(&gt, &gt, 12, 12, 3).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim(&noisy, &gt, 12, 12, 3).unwrap() < 1.0);
}

#[test]
fn perfect_grounding_mask_scores_one() {
    let m = vec![true, false, true, true];
    assert_eq!(crate::langfield::miou(&m, &m).unwrap(), 1.0);
}

#[test]
fn zero_steps_returns_initial_model() {
    let ds = tiny_data();
    let cfg = tiny_train(0);
    let out = train(&cfg, &ds).unwrap();
    let init = FieldModel::new(cfg.model_for(&ds)).unwrap();
    let rounded: Vec<f64> = init.store.values().iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(out.model.store.values(), &rounded[..]);
    assert!(out.steps.is_empty());
    assert_eq!(out.checkpoint.header.step, 0);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let ds = tiny_data();
    let cfg = tiny_train(30);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
    let la: Vec<f64> = a.steps.iter().map(|s| s.total).collect();
    let lb: Vec<f64> = b.steps.iter().map(|s| s.total).collect();
    assert_eq!(la, lb);
    let head: f64 = a.steps[..5].iter().map(|s| s.breakdown["mse"]).sum();
    let tail: f64 = a.steps[25..].iter().map(|s| s.breakdown["mse"]).sum();
    assert!(tail < head, "mse {head} -> {tail}");
    for s in &a.steps {
        assert!(!s.breakdown.contains_key("var"));
        let l = &cfg.lambdas;
        let w = |k: &str, x: f64| s.breakdown.get(k).map_or(0.0, |v| v * x);
        let re = w("mse", 1.0) + w("focal", l.focal) + w("repulsion", l.repulsion) + w("lang", l.lang) + w("smooth", l.smooth);
        assert!((re - s.total).abs() < 1e-10);
    }
}

#[test]
fn learnable_mode_reports_var_and_joint_skips_semantics() {
    let ds = tiny_data();
    let mut cfg = tiny_train(3);
    cfg.mode = KappaMode::LearnableKappa;
    let out = train(&cfg, &ds).unwrap();
    assert!(out.steps.iter().all(|s| s.breakdown.contains_key("var")));
    assert!(out.model.learnable.is_some());

    let mut cfg = tiny_train(3);
    cfg.model.variant = Variant::Joint;
    let out = train(&cfg, &ds).unwrap();
    let keys: Vec<&String> = out.steps[0].breakdown.keys().collect();
    assert_eq!(keys, ["mse", "smooth"]);
}

#[test]
fn eval_log_and_checkpoint_round_trip() {
    let ds = tiny_data();
    let mut cfg = tiny_train(4);
    cfg.eval_every = 2;
    let out = train(&cfg, &ds).unwrap();
    assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), [2, 4]);
    let r = &out.log[1];
    assert!(r.psnr > 0.0 && r.ssim <= 1.0 && (0.0..=1.0).contains(&r.miou));
    assert!(r.loss.contains_key("mse"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lvsc");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let model = back.to_model().unwrap();
    assert_eq!(model.store.values(), out.model.store.values());

    let log = dir.path().join("metrics.jsonl");
    write_metrics_log(&log, &out.log).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(v.get("depthL1").is_some() && v.get("step").is_some());

    // the same model evaluated directly matches the last log record
    let m = evaluate(&out.model, &ds, Split::Test, &cfg.render_config(), cfg.grounding_threshold).unwrap();
    assert_eq!(m.psnr, r.psnr);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ds = tiny_data();
    let out = train(&tiny_train(0), &ds).unwrap();
    let bytes = out.checkpoint.encode();
    let p = Path::new("x.lvsc");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(p, &bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::decode(p, &bad), Err(Error::Version { found: 9, .. })));
    assert!(matches!(Checkpoint::decode(p, &bytes[..bytes.len() - 3]), Err(Error::Format { .. })));

    let mut ck = out.checkpoint.clone();
    ck.segments.pop();
    assert!(ck.to_model().is_err());
    let mut ck = out.checkpoint.clone();
    ck.segments[0].1.push(0.0);
    assert!(ck.to_model().is_err());
}

#[test]
fn parameter_accounting() {
    let m = ModelConfig {
        capacity: 6,
        ..tiny_model()
    };
    let counts: Vec<ParameterCounts> = (1..=6).map(|a| count_parameters(&m, a).unwrap()).collect();
    let planes: Vec<usize> = counts.iter().map(|c| c.mk_planes_planes).collect();
    assert_eq!(planes, [6, 10, 15, 21, 28, 36]);
    let star: Vec<usize> = counts.iter().map(|c| c.mk_planes_star_planes).collect();
    assert_eq!(star, [6, 9, 12, 15, 18, 21]);
    assert!(counts.iter().all(|c| c.core == counts[0].core));
    for (a, c) in counts.iter().enumerate() {
        assert_eq!(c.language, (a + 1) * m.lang_bins * m.lang_dim);
    }
    assert!(count_parameters(&m, 0).is_err());
    let json = serde_json::to_value(counts[2]).unwrap();
    assert_eq!(json["mkPlanesPlanes"], 15);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = tiny_data();
    let mut cfg = tiny_train(1);
    cfg.lambdas.focal = -1.0;
    assert!(train(&cfg, &ds).is_err());
    let mut cfg = tiny_train(1);
    cfg.rays_per_batch = 0;
    assert!(train(&cfg, &ds).is_err());
}

#[test]
fn full_pipeline_gradient_matches_central_differences() {
    let r = pipeline_gradcheck(1).unwrap();
    assert_eq!((r.rays, r.samples), (4, 8));
    assert_eq!(r.terms, ["focal", "lang", "mse", "repulsion", "smooth", "var"]);
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}
