//! Per-connection state and the synchronous request handlers.

use std::path::Path;
use std::sync::Arc;

use livefield::langfield::{ground, relevancy, TextEmbedder};
use livefield::probfield::ControlState;
use livefield::renderer::{render_image, Camera, FieldModel, RenderConfig};
use livefield::trainer::Checkpoint;
use livefield::{Error, Result};

use crate::protocol::{encode_f32, encode_rgb8, pack_mask, Reply};

pub const DEFAULT_SIZE: usize = 128;

/// Everything a session reads from a checkpoint; never mutated.
#[derive(Debug)]
pub struct Scene {
    pub model: FieldModel,
    pub captions: Vec<(String, String)>,
    pub embedder: TextEmbedder,
    pub render: RenderConfig,
    pub grounding_threshold: f64,
    pub default_camera: Camera,
}

impl Scene {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        let model = ck.to_model()?;
        let default_camera = h
            .cameras
            .get(h.default_camera)
            .cloned()
            .ok_or_else(|| Error::Validation("checkpoint carries no camera".into()))?;
        if h.captions.len() != model.alpha() {
            return Err(Error::Validation(format!(
                "checkpoint has {} captions for {} objects",
                h.captions.len(),
                model.alpha()
            )));
        }
        Ok(Self {
            embedder: TextEmbedder::new(h.embed_seed, model.config.lang_dim),
            captions: h.captions.clone(),
            render: h.train_config.render_config(),
            grounding_threshold: h.train_config.grounding_threshold,
            default_camera,
            model,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn alpha(&self) -> usize {
        self.model.alpha()
    }
}

/// Current control state and view of one client.
#[derive(Clone, Debug)]
pub struct Session {
    pub scene: Arc<Scene>,
    pub kappa: ControlState,
    pub camera: Camera,
}

impl Session {
    /// Starts at κ = 0 and the checkpoint's default view, rendered at
    /// `width x height`.
    pub fn new(scene: Arc<Scene>, width: usize, height: usize) -> Self {
        let camera = scene.default_camera.resized(width, height);
        let kappa = ControlState::uniform(scene.alpha(), 0.0);
        Self { scene, kappa, camera }
    }

    pub fn hello(&self) -> Reply {
        Reply::Hello {
            alpha: self.scene.alpha(),
            captions: self.scene.captions.clone(),
            size: [self.camera.height, self.camera.width],
            kappa: self.kappa.kappa.clone(),
        }
    }

    /// Clamps into `[0, 1]` and returns the stored vector.
    pub fn set_state(&mut self, kappa: &[f64]) -> Result<Vec<f64>> {
        if kappa.len() != self.scene.alpha() {
            return Err(Error::InvalidArgument(format!(
                "expected {} interaction values, got {}",
                self.scene.alpha(),
                kappa.len()
            )));
        }
        if kappa.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidArgument("interaction values must be finite".into()));
        }
        self.kappa = ControlState::clamped(kappa);
        Ok(self.kappa.kappa.clone())
    }

    /// Replaces pose and focal lengths, keeping the render size and a
    /// centred principal point.
    pub fn set_camera(&mut self, pose: &[f64], fx: f64, fy: f64) -> Result<()> {
        let pose: [f64; 12] = pose
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("pose needs 12 values, got {}", pose.len())))?;
        let (w, h) = (self.camera.width, self.camera.height);
        self.camera = Camera::new(pose, fx, fy, w as f64 / 2.0, h as f64 / 2.0, w, h)?;
        Ok(())
    }

    pub fn render(&self) -> Result<Reply> {
        let img = render_image(&self.scene.model, &self.camera, &self.kappa, &self.scene.render)?;
        Ok(Reply::Frame {
            width: img.width,
            height: img.height,
            rgb: encode_rgb8(&img.rgb()),
            depth: encode_f32(&img.depth()),
        })
    }

    pub fn query(&self, text: &str) -> Result<Reply> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("query text is empty".into()));
        }
        let scene = &self.scene;
        let q = scene.embedder.embed(text)?;
        let img = render_image(&scene.model, &self.camera, &self.kappa, &scene.render)?;
        let pixels: Vec<Vec<f64>> = img.samples.iter().map(|s| s.embed.clone()).collect();
        let labels = img.labels(scene.render.threshold);
        let g = ground(relevancy(&pixels, &q), &labels, scene.alpha(), img.width, img.height, scene.grounding_threshold);
        Ok(Reply::Grounding {
            width: g.width,
            height: g.height,
            heatmap: encode_f32(&g.heatmap),
            mask: pack_mask(&g.mask),
            best_object: g.best_object,
            score: g.score,
        })
    }
}
