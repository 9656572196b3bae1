//! Procedural articulated scenes of coloured boxes, analytic ground-truth
//! rendering, and the on-disk dataset format.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::probfield::ControlState;
use crate::renderer::{generate_rays, Camera, Ray};

pub const DATASET_VERSION: u32 = 1;
pub const FRAME_MAGIC: &[u8; 4] = b"LVSF";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Hinge,
    Slide,
}

/// Axis-aligned box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxShape {
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            for a in 0..3 {
                c[a] = if i >> a & 1 == 0 { self.min[a] } else { self.max[a] };
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    /// Captions for the closed (κ < 0.5) and open states.
    pub captions: (String, String),
    /// Rest pose (κ = 0 of the joint parameterisation is `range.0`).
    pub shape: BoxShape,
    pub joint: JointType,
    pub axis: [f64; 3],
    pub origin: [f64; 3],
    /// Joint value at κ = 0 and κ = 1: radians for hinges, units for slides.
    pub range: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticBox {
    pub name: String,
    pub shape: BoxShape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub parts: Vec<PartSpec>,
    pub static_geometry: Vec<StaticBox>,
    /// Seed of the caption embedder.
    #[serde(default = "default_embed_seed")]
    pub embed_seed: u64,
}

fn default_embed_seed() -> u64 {
    11
}

impl SceneSpec {
    pub fn alpha(&self) -> usize {
        self.parts.len()
    }

    pub fn captions(&self) -> Vec<(String, String)> {
        self.parts.iter().map(|p| p.captions.clone()).collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_t_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|c| m[0][c] * v[0] + m[1][c] * v[1] + m[2][c] * v[2])
}

/// Rigid placement `x -> R (x - pivot) + pivot + t` of a part's rest box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartPose {
    pub rotation: Mat3,
    pub pivot: [f64; 3],
    pub translation: [f64; 3],
}

impl PartPose {
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, [x[0] - self.pivot[0], x[1] - self.pivot[1], x[2] - self.pivot[2]]);
        [0, 1, 2].map(|a| r[a] + self.pivot[a] + self.translation[a])
    }

    pub fn inverse_apply(&self, x: [f64; 3]) -> [f64; 3] {
        let d = [0, 1, 2].map(|a| x[a] - self.pivot[a] - self.translation[a]);
        let r = mat_t_vec(&self.rotation, d);
        [0, 1, 2].map(|a| r[a] + self.pivot[a])
    }

    fn inverse_direction(&self, d: [f64; 3]) -> [f64; 3] {
        mat_t_vec(&self.rotation, d)
    }
}

/// Validated scene whose part poses are closed-form functions of κ.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub spec: SceneSpec,
}

fn inside_unit_cube(p: [f64; 3]) -> bool {
    p.iter().all(|&c| (-1e-9..=1.0 + 1e-9).contains(&c))
}

pub fn build_scene(spec: &SceneSpec) -> Result<SceneModel> {
    if spec.parts.is_empty() {
        return Err(Error::Validation("scene needs at least one articulated part".into()));
    }
    for b in &spec.static_geometry {
        if b.shape.corners().iter().any(|&c| !inside_unit_cube(c)) {
            return Err(Error::Validation(format!("static box `{}` leaves the unit cube", b.name)));
        }
    }
    let model = SceneModel { spec: spec.clone() };
    for (i, p) in spec.parts.iter().enumerate() {
        if p.axis.iter().all(|&a| a == 0.0) {
            return Err(Error::Validation(format!("part `{}` has a zero joint axis", p.name)));
        }
        for s in 0..16 {
            let k = s as f64 / 15.0;
            let pose = model.part_pose(i, k);
            if p.shape.corners().iter().any(|&c| !inside_unit_cube(pose.apply(c))) {
                return Err(Error::Validation(format!("part `{}` leaves the unit cube at kappa {k:.4}", p.name)));
            }
        }
    }
    Ok(model)
}

impl SceneModel {
    pub fn alpha(&self) -> usize {
        self.spec.parts.len()
    }

    pub fn part_pose(&self, part: usize, kappa: f64) -> PartPose {
        let p = &self.spec.parts[part];
        let value = p.range.0 + (p.range.1 - p.range.0) * kappa;
        match p.joint {
            JointType::Hinge => PartPose {
                rotation: rotation(p.axis, value),
                pivot: p.origin,
                translation: [0.0; 3],
            },
            JointType::Slide => {
                let n = (p.axis[0] * p.axis[0] + p.axis[1] * p.axis[1] + p.axis[2] * p.axis[2]).sqrt();
                PartPose {
                    rotation: rotation([0.0, 0.0, 1.0], 0.0),
                    pivot: p.origin,
                    translation: p.axis.map(|a| a / n * value),
                }
            }
        }
    }

    /// Nearest hit along `ray`: distance, colour and part id (`-1` static).
    pub fn intersect(&self, ray: &Ray, kappa: &ControlState) -> Option<(f64, [f64; 3], i32)> {
        let mut best: Option<(f64, [f64; 3], i32)> = None;
        let mut consider = |t: Option<f64>, color: [f64; 3], id: i32| {
            if let Some(t) = t {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, color, id));
                }
            }
        };
        for b in &self.spec.static_geometry {
            consider(ray_box(ray.origin, ray.direction, &b.shape), b.color, -1);
        }
        for (i, p) in self.spec.parts.iter().enumerate() {
            let pose = self.part_pose(i, kappa.kappa[i]);
            let o = pose.inverse_apply(ray.origin);
            let d = pose.inverse_direction(ray.direction);
            consider(ray_box(o, d, &p.shape), p.color, i as i32);
        }
        best
    }
}

/// Slab test; the entry distance, or the exit distance when the origin is
/// inside the box.
pub fn ray_box(o: [f64; 3], d: [f64; 3], b: &BoxShape) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    if t1 < t0 || t1 <= 1e-9 {
        return None;
    }
    Some(if t0 > 1e-9 { t0 } else { t1 })
}

/// One rendered view. Images are row-major; rgb is interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<i32>,
    pub kappa: ControlState,
    pub camera: Camera,
}

pub const WHITE: [f64; 3] = [1.0, 1.0, 1.0];

/// Flat-shaded render: hit colour, hit distance and part id per pixel;
/// misses are white at the ray's far distance with mask `-1`.
pub fn gt_render(scene: &SceneModel, camera: &Camera, kappa: &ControlState) -> Result<Frame> {
    if kappa.alpha() != scene.alpha() {
        return Err(Error::Shape(format!(
            "control state has {} entries for {} parts",
            kappa.alpha(),
            scene.alpha()
        )));
    }
    let rays = generate_rays(camera, &camera.all_pixels())?;
    let n = rays.len();
    let mut rgb = Vec::with_capacity(n * 3);
    let mut depth = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for ray in &rays {
        match scene.intersect(ray, kappa) {
            Some((t, c, id)) => {
                rgb.extend(c.map(|v| v as f32));
                depth.push(t as f32);
                mask.push(id);
            }
            None => {
                rgb.extend(WHITE.map(|v| v as f32));
                depth.push(ray.far as f32);
                mask.push(-1);
            }
        }
    }
    Ok(Frame {
        index: 0,
        width: camera.width,
        height: camera.height,
        rgb,
        depth,
        mask,
        kappa: kappa.clone(),
        camera: camera.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    /// Camera-to-world, 12 row-major reals.
    pub pose: [f64; 12],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub kappa: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SceneSpec,
    pub alpha: usize,
    /// κ bins per object of the language table.
    pub lang_bins: usize,
    pub captions: Vec<(String, String)>,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn alpha(&self) -> usize {
        self.manifest.alpha
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.frames.iter().filter(|r| r.split == split).map(|r| r.index).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let alpha = self.alpha() as i32;
        for f in &self.frames {
            let n = f.width * f.height;
            if f.rgb.len() != 3 * n || f.depth.len() != n || f.mask.len() != n {
                return Err(Error::Validation(format!("frame {}: buffer sizes do not match {}x{}", f.index, f.width, f.height)));
            }
            if let Some(m) = f.mask.iter().find(|&&m| m < -1 || m >= alpha) {
                return Err(Error::Validation(format!("frame {}: mask value {m} outside -1..{alpha}", f.index)));
            }
            if f.kappa.alpha() != self.alpha() || f.kappa.kappa.iter().any(|k| !(0.0..=1.0).contains(k)) {
                return Err(Error::Validation(format!("frame {}: control state {:?} invalid", f.index, f.kappa.kappa)));
            }
            f.camera.validate().map_err(|e| Error::Validation(format!("frame {}: {e}", f.index)))?;
        }
        Ok(())
    }
}

/// Renders one frame per `(camera, kappa)` pair.
pub fn generate_dataset(spec: &SceneSpec, trajectory: &[Camera], schedule: &[ControlState], splits: &[Split]) -> Result<Dataset> {
    if trajectory.len() != schedule.len() || trajectory.len() != splits.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectory ({}), schedule ({}) and splits ({}) differ in length",
            trajectory.len(),
            schedule.len(),
            splits.len()
        )));
    }
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one frame".into()));
    }
    let scene = build_scene(spec)?;
    let (w, h) = (trajectory[0].width, trajectory[0].height);
    let mut frames = Vec::with_capacity(trajectory.len());
    let mut records = Vec::with_capacity(trajectory.len());
    for (i, ((cam, k), split)) in trajectory.iter().zip(schedule).zip(splits).enumerate() {
        if cam.width != w || cam.height != h {
            return Err(Error::InvalidArgument(format!("frame {i}: camera size differs from frame 0")));
        }
        let mut f = gt_render(&scene, cam, k)?;
        f.index = i;
        records.push(FrameRecord {
            index: i,
            pose: cam.pose,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            kappa: k.kappa.clone(),
            split: *split,
        });
        frames.push(f);
    }
    Ok(Dataset {
        manifest: Manifest {
            version: DATASET_VERSION,
            spec: spec.clone(),
            alpha: spec.alpha(),
            lang_bins: 8,
            captions: spec.captions(),
            width: w,
            height: h,
            frames: records,
        },
        frames,
    })
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.bin")
}

pub fn encode_frame(frame: &Frame, alpha: usize) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(FRAME_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(frame.height as u32);
    w.u32(frame.width as u32);
    w.u32(alpha as u32);
    w.f32s(&frame.rgb);
    w.f32s(&frame.depth);
    w.i32s(&frame.mask);
    w.buf
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serialises");
    write_file(&dir.join("manifest.json"), manifest.as_bytes())?;
    for f in &ds.frames {
        write_file(&dir.join(frame_file_name(f.index)), &encode_frame(f, ds.alpha()))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = read_file(&mpath)?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(Error::Version {
            path: mpath,
            found,
            expected: DATASET_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rec in &manifest.frames {
        let path = dir.join(frame_file_name(rec.index));
        let data = read_file(&path)?;
        let mut r = Reader::new(&path, &data, format!("frame {}", rec.index));
        r.magic(FRAME_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let a = r.u32("object count")? as usize;
        if h != manifest.height || w != manifest.width || a != manifest.alpha {
            return Err(r.error(format!(
                "header {h}x{w} with {a} objects disagrees with manifest {}x{} with {}",
                manifest.height, manifest.width, manifest.alpha
            )));
        }
        let rgb = r.f32s(h * w * 3, "rgb")?;
        let depth = r.f32s(h * w, "depth")?;
        let mask = r.i32s(h * w, "mask")?;
        r.finish()?;
        let camera = Camera::new(rec.pose, rec.fx, rec.fy, rec.cx, rec.cy, w, h)
            .map_err(|e| Error::format(&mpath, 0, format!("frame {}: {e}", rec.index)))?;
        frames.push(Frame {
            index: rec.index,
            width: w,
            height: h,
            rgb,
            depth,
            mask,
            kappa: ControlState {
                kappa: rec.kappa.clone(),
            },
            camera,
        });
    }
    let ds = Dataset { manifest, frames };
    ds.validate()?;
    Ok(ds)
}

/// Two-cabinet room with a hinged red door and a sliding green drawer.
pub fn toy_scene_spec() -> SceneSpec {
    let bx = |min: [f64; 3], max: [f64; 3]| BoxShape { min, max };
    let stat = |name: &str, shape: BoxShape, color: [f64; 3]| StaticBox {
        name: name.into(),
        shape,
        color,
    };
    SceneSpec {
        parts: vec![
            PartSpec {
                name: "door".into(),
                captions: ("closed red door".into(), "open red door".into()),
                shape: bx([0.15, 0.56, 0.06], [0.55, 0.6, 0.6]),
                joint: JointType::Hinge,
                axis: [0.0, 0.0, 1.0],
                origin: [0.15, 0.58, 0.0],
                range: (0.0, -PI / 2.0),
                color: [0.85, 0.15, 0.15],
            },
            PartSpec {
                name: "drawer".into(),
                captions: ("closed green drawer".into(), "open green drawer".into()),
                shape: bx([0.64, 0.56, 0.16], [0.88, 0.88, 0.3]),
                joint: JointType::Slide,
                axis: [0.0, -1.0, 0.0],
                origin: [0.0, 0.0, 0.0],
                range: (0.0, 0.3),
                color: [0.2, 0.7, 0.25],
            },
        ],
        static_geometry: vec![
            stat("floor", bx([0.0, 0.0, 0.0], [1.0, 1.0, 0.04]), [0.55, 0.55, 0.55]),
            stat("back wall", bx([0.0, 0.96, 0.0], [1.0, 1.0, 1.0]), [0.9, 0.85, 0.7]),
            stat("left wall", bx([0.0, 0.0, 0.0], [0.04, 1.0, 1.0]), [0.65, 0.75, 0.9]),
            stat("tall cabinet", bx([0.15, 0.6, 0.04], [0.55, 0.92, 0.62]), [0.55, 0.35, 0.2]),
            stat("low cabinet", bx([0.6, 0.6, 0.04], [0.92, 0.92, 0.4]), [0.35, 0.4, 0.6]),
        ],
        embed_seed: default_embed_seed(),
    }
}

pub const TOY_TARGET: [f64; 3] = [0.5, 0.55, 0.3];
pub const TOY_FOV_DEG: f64 = 50.0;

/// Orbit in front of the scene, sweeping azimuth with jittered elevation
/// and radius.
pub fn toy_trajectory(frames: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|i| {
            let s = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.5 };
            let az = (-40.0 + 80.0 * s).to_radians();
            let el = (27.0 + 7.0 * (2.0 * PI * s * 2.0).sin() + rng.random_range(-2.0..2.0)).to_radians();
            let r = 1.25 + rng.random_range(-0.05..0.05);
            let eye = [
                TOY_TARGET[0] + r * el.cos() * az.sin(),
                TOY_TARGET[1] - r * el.cos() * az.cos(),
                TOY_TARGET[2] + r * el.sin(),
            ];
            Camera::look_at(eye, TOY_TARGET, [0.0, 0.0, 1.0], TOY_FOV_DEG, width, height)
        })
        .collect()
}

fn triangle(x: f64) -> f64 {
    1.0 - (1.0 - x.rem_euclid(2.0)).abs()
}

/// Per-object triangle waves with phase offsets, starting at κ₀ = 0.
pub fn toy_schedule(frames: usize, alpha: usize) -> Vec<ControlState> {
    (0..frames)
        .map(|i| {
            let s = if frames > 1 { i as f64 / (frames - 1) as f64 } else { 0.0 };
            ControlState {
                kappa: (0..alpha).map(|a| triangle(1.5 * s + a as f64 / alpha as f64)).collect(),
            }
        })
        .collect()
}

/// Every tenth frame is held out for testing.
pub fn toy_splits(frames: usize) -> Vec<Split> {
    (0..frames).map(|i| if i % 10 == 0 { Split::Test } else { Split::Train }).collect()
}

pub fn toy_dataset(frames: usize, width: usize, height: usize, seed: u64) -> Result<Dataset> {
    let spec = toy_scene_spec();
    let cams = toy_trajectory(frames, width, height, seed)?;
    generate_dataset(&spec, &cams, &toy_schedule(frames, spec.alpha()), &toy_splits(frames))
}

#[cfg(test)]
mod tests;
