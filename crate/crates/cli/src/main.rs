use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use livefield::probfield::ControlState;
use livefield::renderer::{render_image, Camera};
use livefield::scenegen::{
    generate_dataset, load_dataset, save_dataset, toy_schedule, toy_splits, toy_trajectory, SceneSpec, Split,
};
use livefield::trainer::{
    evaluate, pipeline_gradcheck, train_with, write_metrics_log, Checkpoint, KappaMode, TrainConfig,
};
use livefield::{Error, Result};
use livefield_service::{Scene, ServerState};

#[derive(Parser)]
#[command(name = "livefield", version, about = "Train, render and query interactive radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic articulated scene into a dataset directory
    Generate {
        /// Scene description (JSON)
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        /// Image size as HxW
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a model to a dataset and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Training configuration (JSON, TrainConfig field names)
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured control-state mode
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// JSON-lines metrics log [default: <out>.metrics.jsonl]
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Progress line period in steps (0 = silent)
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Render one view at a given control state to PNG
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated control values, one per object
        #[arg(long)]
        kappa: String,
        /// Dataset frame index stored in the checkpoint, or a camera JSON file
        #[arg(long)]
        pose: String,
        /// Output PNG
        #[arg(long)]
        out: PathBuf,
        /// Override the render size as HxW
        #[arg(long, value_parser = parse_size)]
        size: Option<(usize, usize)>,
        /// Also write raw little-endian float32 depth here
        #[arg(long)]
        depth: Option<PathBuf>,
    },
    /// Compute PSNR, SSIM, depth L1 and grounding mIOU on a split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Metrics JSON to write
        #[arg(long)]
        json: PathBuf,
    },
    /// Serve a checkpoint over WebSocket at ws://<bind>/ws
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: std::net::SocketAddr,
        /// Interactive render size as HxW
        #[arg(long, default_value = "128x128", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Finite-difference check of the full render and loss pipeline
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Gt,
    Learnable,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("LIVEFIELD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("LIVEFIELD_THREADS must be a count, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Generate {
            spec,
            out,
            frames,
            size: (h, w),
            seed,
        } => {
            let spec = SceneSpec::from_json_file(&spec)?;
            let cams = toy_trajectory(frames, w, h, seed)?;
            let schedule = toy_schedule(frames, spec.alpha());
            let ds = generate_dataset(&spec, &cams, &schedule, &toy_splits(frames))?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {frames} frames ({} test) of {w}x{h} to {}",
                ds.split_indices(Split::Test).len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            mode,
            metrics,
            log_every,
        } => {
            let ds = load_dataset(&data)?;
            let mut cfg = TrainConfig::from_json_file(&config)?;
            match mode {
                Some(Mode::Gt) => cfg.mode = KappaMode::GtKappa,
                Some(Mode::Learnable) => cfg.mode = KappaMode::LearnableKappa,
                None => {}
            }
            let result = train_with(&cfg, &ds, |r| {
                if log_every > 0 && (r.step % log_every == 0 || r.step + 1 == cfg.steps) {
                    eprintln!("step {:>6}  loss {:.5}  psnr {:6.2}  lr {:.2e}", r.step, r.total, r.batch_psnr, r.lr);
                }
            })?;
            result.checkpoint.save(&out)?;
            let log = metrics.unwrap_or_else(|| sibling(&out, "metrics.jsonl"));
            write_metrics_log(&log, &result.log)?;
            println!("wrote {} ({} evaluations logged to {})", out.display(), result.log.len(), log.display());
        }
        Command::Render {
            ckpt,
            kappa,
            pose,
            out,
            size,
            depth,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let values = parse_kappa(&kappa, model.alpha())?;
            let state = ControlState::clamped(&values);
            if state.kappa != values {
                eprintln!("warning: kappa {values:?} clamped to {:?}", state.kappa);
            }
            let mut camera = load_camera(&pose, &ck)?;
            if let Some((h, w)) = size {
                camera = camera.resized(w, h);
            }
            let img = render_image(&model, &camera, &state, &ck.header.train_config.render_config())?;
            let rgb: Vec<u8> = img.rgb().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, rgb)
                .expect("buffer matches size")
                .save(&out)
                .map_err(|e| Error::InvalidArgument(format!("writing {}: {e}", out.display())))?;
            if let Some(p) = depth {
                let bytes: Vec<u8> = img.depth().iter().flat_map(|&d| (d as f32).to_le_bytes()).collect();
                std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, split, json } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.to_model()?;
            let ds = load_dataset(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let tc = &ck.header.train_config;
            let mut m = evaluate(&model, &ds, split, &tc.render_config(), tc.grounding_threshold)?;
            if let Some(last) = ck.header.metrics.last() {
                m.loss_breakdown = last.loss.clone();
            }
            let text = serde_json::to_string_pretty(&m).expect("metrics serialise");
            std::fs::write(&json, &text).map_err(|e| Error::io(&json, e))?;
            println!("{text}");
        }
        Command::Serve { ckpt, bind, size: (h, w) } => {
            let scene = Arc::new(Scene::load(&ckpt)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("<runtime>"), e))?;
            rt.block_on(async move {
                let listener = livefield_service::bind(bind).await.map_err(|e| Error::io(Path::new(&bind.to_string()), e))?;
                let addr = listener.local_addr().map_err(|e| Error::io(Path::new(&bind.to_string()), e))?;
                eprintln!("serving {} on ws://{addr}/ws", ckpt.display());
                let state = ServerState {
                    scene,
                    width: w,
                    height: h,
                };
                livefield_service::serve(listener, state)
                    .await
                    .map_err(|e| Error::io(Path::new(&addr.to_string()), e))
            })?;
        }
        Command::Gradcheck { seed } => {
            let r = pipeline_gradcheck(seed)?;
            println!("{:.3e}", r.max_rel_error);
            eprintln!(
                "max relative error over {} parameters, {} rays x {} samples, terms {}",
                r.parameters,
                r.rays,
                r.samples,
                r.terms.join(" ")
            );
            if r.max_rel_error >= 1e-3 {
                eprintln!("error: gradient mismatch above 1e-3");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn parse_kappa(s: &str, alpha: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("kappa must be comma-separated numbers, got `{s}`")))?;
    if values.len() != alpha {
        return Err(Error::InvalidArgument(format!("checkpoint has {alpha} objects, got {} kappa values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("kappa values must be finite".into()));
    }
    Ok(values)
}

fn load_camera(pose: &str, ck: &Checkpoint) -> Result<Camera> {
    if let Ok(i) = pose.parse::<usize>() {
        return ck.header.cameras.get(i).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!("pose index {i} out of range (checkpoint has {} cameras)", ck.header.cameras.len()))
        });
    }
    let path = Path::new(pose);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cam: Camera = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    cam.validate()?;
    Ok(cam)
}
