//! Binary checkpoint: magic, version, a JSON header and named f32 segments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsRecord, TrainConfig};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::renderer::{Camera, FieldModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LVSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub step: u64,
    pub metrics: Vec<MetricsRecord>,
    pub captions: Vec<(String, String)>,
    pub embed_seed: u64,
    /// Dataset cameras, addressable by frame index.
    pub cameras: Vec<Camera>,
    pub default_camera: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub segments: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &FieldModel, header: CheckpointHeader) -> Self {
        let segments = model
            .store
            .segments()
            .iter()
            .map(|s| (s.name.clone(), model.store.values()[s.range()].iter().map(|&v| v as f32).collect()))
            .collect();
        Self { header, segments }
    }

    /// Rebuilds the model from its config and fills every segment by name.
    pub fn to_model(&self) -> Result<FieldModel> {
        let mut model = FieldModel::new(self.header.model_config.clone())?;
        if model.store.segments().len() != self.segments.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} segments, model expects {}",
                self.segments.len(),
                model.store.segments().len()
            )));
        }
        for (name, data) in &self.segments {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint segment `{name}` is not part of the model")))?;
            let dst = model.store.seg_values_mut(id);
            if dst.len() != data.len() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint segment `{name}` has {} values, model expects {}",
                    data.len(),
                    dst.len()
                )));
            }
            dst.iter_mut().zip(data).for_each(|(d, &s)| *d = s as f64);
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.header).expect("header serialises");
        w.u64(json.len() as u64);
        w.bytes(&json);
        for (name, data) in &self.segments {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u64(data.len() as u64);
            w.f32s(data);
        }
        w.buf
    }

    pub fn decode(path: &Path, data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, data, "");
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let n = r.len_prefix("header length")?;
        let at = r.offset();
        let json = r.take(n, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| Error::format(path, at, format!("malformed header: {e}")))?;
        let mut segments = Vec::new();
        while r.offset() < data.len() as u64 {
            let len = r.u32("segment name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "segment name")?)
                .map_err(|_| r.error("segment name is not UTF-8"))?
                .to_string();
            let count = r.len_prefix("segment length")?;
            let values = r.f32s(count, &format!("segment `{name}`"))?;
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(r.error(format!("segment `{name}` holds non-finite value {v}")));
            }
            segments.push((name, values));
        }
        Ok(Self { header, segments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        Self::decode(path, &data)
    }
}
