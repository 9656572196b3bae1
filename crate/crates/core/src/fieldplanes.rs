//! Multi-scale factorized feature planes.
//!
//! A [`PlaneSet4D`] covers `(x, y, z, kappa)` with the six pairwise planes
//! per scale; a [`PlaneSet3D`] covers `(x, y, z)` with three; a
//! [`PlaneSetJoint`] covers `(x, y, z, kappa_0 .. kappa_{alpha-1})` with all
//! `C(3 + alpha, 2)` pairs. Within a scale
//! the plane lookups are fused by elementwise product; scales are
//! concatenated, so a query returns `scales * F` features.
//!
//! Plane weights live in a [`ParamStore`] segment of shape `(h * w) x F`.
//! For a plane spanning axes `(a, b)`, coordinate `a` runs along the width
//! and `b` along the height. Node `k` of an axis with `n` nodes sits at
//! `k / (n - 1)` (align-corners); coordinates outside `[0, 1]` clamp.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{interp_cell, locate, Graph, ParamStore, PlaneRef, SegmentId, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
    /// The selected object's control variable (4D local field).
    Kappa,
    /// Control variable of object `k` in the joint field.
    Control(usize),
}

impl Axis {
    /// Column of the axis in a query coordinate matrix.
    pub fn column(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
            Axis::Kappa => 3,
            Axis::Control(k) => 3 + k,
        }
    }

    pub fn is_control(self) -> bool {
        matches!(self, Axis::Kappa | Axis::Control(_))
    }

    fn tag(self) -> String {
        match self {
            Axis::X => "x".into(),
            Axis::Y => "y".into(),
            Axis::Z => "z".into(),
            Axis::Kappa => "k".into(),
            Axis::Control(k) => format!("k{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PlaneInit {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl PlaneInit {
    fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            PlaneInit::Uniform { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            PlaneInit::Gaussian { mean, std } => {
                let dist = Normal::new(mean, std).expect("valid normal");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub axes: (Axis, Axis),
    /// Nodes along the height (second axis).
    pub h: usize,
    /// Nodes along the width (first axis).
    pub w: usize,
    pub features: usize,
    pub seg: SegmentId,
    pub init: PlaneInit,
}

impl Plane {
    pub fn as_ref(&self) -> PlaneRef {
        PlaneRef {
            seg: self.seg,
            h: self.h,
            w: self.w,
            f: self.features,
            axis_u: self.axes.0.column(),
            axis_v: self.axes.1.column(),
        }
    }

    pub fn view<'a>(&self, store: &'a ParamStore) -> PlaneView<'a> {
        PlaneView {
            h: self.h,
            w: self.w,
            f: self.features,
            data: store.seg_values(self.seg),
        }
    }
}

/// Borrowed plane weights, `h * w * f` row-major.
#[derive(Clone, Copy, Debug)]
pub struct PlaneView<'a> {
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub data: &'a [f64],
}

/// Bilinear lookup at `(u, v)` in `[0, 1]^2` (clamped), `u` along the width.
pub fn interp_bilinear(plane: PlaneView<'_>, u: f64, v: f64) -> Vec<f64> {
    let cell = locate(u, v, plane.h, plane.w);
    let mut out = vec![0.0; plane.f];
    interp_cell(plane.data, plane.w, plane.f, &cell, plane.h, &mut out);
    out
}

/// A point of the compact interaction space: position plus the selected
/// object's interaction variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point4 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub kappa_u: f64,
}

impl Point4 {
    fn coord(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
            Axis::Z => self.z,
            Axis::Kappa | Axis::Control(_) => self.kappa_u,
        }
    }
}

const PAIRS_4D: [(Axis, Axis); 6] = [
    (Axis::X, Axis::Y),
    (Axis::X, Axis::Z),
    (Axis::X, Axis::Kappa),
    (Axis::Y, Axis::Z),
    (Axis::Y, Axis::Kappa),
    (Axis::Z, Axis::Kappa),
];

const PAIRS_3D: [(Axis, Axis); 3] = [(Axis::X, Axis::Y), (Axis::X, Axis::Z), (Axis::Y, Axis::Z)];

/// Shared scale/plane bookkeeping for both plane sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneStack {
    pub scales: Vec<Vec<Plane>>,
    pub feature_dim: usize,
}

impl PlaneStack {
    fn build(
        store: &mut ParamStore,
        prefix: &str,
        pairs: &[(Axis, Axis)],
        spatial: &[usize],
        kappa: &[usize],
        feature_dim: usize,
        init: PlaneInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut scales = Vec::with_capacity(spatial.len());
        for (s, &res) in spatial.iter().enumerate() {
            let res_of = |a: Axis| if a.is_control() { kappa[s] } else { res };
            let mut planes = Vec::with_capacity(pairs.len());
            for &(a, b) in pairs {
                let (w, h) = (res_of(a), res_of(b));
                let name = format!("{prefix}.s{s}.{}{}", a.tag(), b.tag());
                let values = init.sample(h * w * feature_dim, rng);
                let seg = store.register(name, h * w, feature_dim, values)?;
                planes.push(Plane {
                    axes: (a, b),
                    h,
                    w,
                    features: feature_dim,
                    seg,
                    init,
                });
            }
            scales.push(planes);
        }
        Ok(Self {
            scales,
            feature_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.scales.len() * self.feature_dim
    }

    pub fn planes(&self) -> impl Iterator<Item = &Plane> {
        self.scales.iter().flatten()
    }

    fn query_point(&self, store: &ParamStore, coord: impl Fn(Axis) -> f64) -> Vec<f64> {
        let f = self.feature_dim;
        let mut out = Vec::with_capacity(self.output_dim());
        let mut buf = vec![0.0; f];
        for planes in &self.scales {
            let mut acc = vec![1.0; f];
            for p in planes {
                let cell = locate(coord(p.axes.0), coord(p.axes.1), p.h, p.w);
                interp_cell(store.seg_values(p.seg), p.w, f, &cell, p.h, &mut buf);
                acc.iter_mut().zip(&buf).for_each(|(a, b)| *a *= b);
            }
            out.extend(acc);
        }
        out
    }

    /// Batched differentiable query, one point per row of `coords`.
    pub fn query_graph(&self, g: &mut Graph, coords: Var) -> Var {
        let per_scale: Vec<Var> = self
            .scales
            .iter()
            .map(|planes| {
                let refs: Vec<PlaneRef> = planes.iter().map(Plane::as_ref).collect();
                g.plane_product(&refs, coords)
            })
            .collect();
        if per_scale.len() == 1 {
            per_scale[0]
        } else {
            g.concat_cols(&per_scale)
        }
    }

    /// Per-scale fused features (`N x F` each) without concatenation.
    pub fn query_graph_scales(&self, g: &mut Graph, coords: Var) -> Vec<Var> {
        self.scales
            .iter()
            .map(|planes| {
                let refs: Vec<PlaneRef> = planes.iter().map(Plane::as_ref).collect();
                g.plane_product(&refs, coords)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.planes().map(|p| p.h * p.w * p.features).sum()
    }
}

/// Six planes per scale over `(x, y, z, kappa)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSet4D(pub PlaneStack);

impl PlaneSet4D {
    /// `spatial[s]` nodes along x, y, z and `kappa[s]` along kappa at scale `s`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spatial: &[usize],
        kappa: &[usize],
        feature_dim: usize,
        init: PlaneInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert_eq!(spatial.len(), kappa.len(), "one kappa resolution per scale");
        check_increasing(spatial)?;
        check_increasing(kappa)?;
        PlaneStack::build(store, prefix, &PAIRS_4D, spatial, kappa, feature_dim, init, rng).map(Self)
    }

    pub fn stack(&self) -> &PlaneStack {
        &self.0
    }
}

/// Three planes per scale over `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSet3D(pub PlaneStack);

impl PlaneSet3D {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spatial: &[usize],
        feature_dim: usize,
        init: PlaneInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_increasing(spatial)?;
        PlaneStack::build(store, prefix, &PAIRS_3D, spatial, spatial, feature_dim, init, rng).map(Self)
    }

    pub fn stack(&self) -> &PlaneStack {
        &self.0
    }
}

/// Unfactorized field over `(x, y, z, kappa_0 .. kappa_{alpha-1})`: one
/// plane for every pair of the `3 + alpha` axes at each scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSetJoint(pub PlaneStack);

impl PlaneSetJoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        alpha: usize,
        spatial: &[usize],
        kappa: &[usize],
        feature_dim: usize,
        init: PlaneInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert_eq!(spatial.len(), kappa.len(), "one kappa resolution per scale");
        check_increasing(spatial)?;
        check_increasing(kappa)?;
        PlaneStack::build(store, prefix, &joint_pairs(alpha), spatial, kappa, feature_dim, init, rng).map(Self)
    }

    pub fn stack(&self) -> &PlaneStack {
        &self.0
    }
}

/// All axis pairs over `x, y, z` and `alpha` control axes, in lexicographic
/// column order.
pub fn joint_pairs(alpha: usize) -> Vec<(Axis, Axis)> {
    let axes: Vec<Axis> = [Axis::X, Axis::Y, Axis::Z].into_iter().chain((0..alpha).map(Axis::Control)).collect();
    let mut pairs = Vec::new();
    for i in 0..axes.len() {
        for j in i + 1..axes.len() {
            pairs.push((axes[i], axes[j]));
        }
    }
    pairs
}

fn check_increasing(res: &[usize]) -> Result<()> {
    if res.is_empty() || res.iter().any(|&r| r < 2) || res.windows(2).any(|w| w[1] <= w[0]) {
        return Err(crate::Error::InvalidArgument(format!(
            "plane resolutions must be >= 2 and strictly increasing, got {res:?}"
        )));
    }
    Ok(())
}

/// Fused multi-scale feature of the 4D field at `p`.
pub fn query_field4(planes: &PlaneSet4D, store: &ParamStore, p: Point4) -> Vec<f64> {
    planes.0.query_point(store, |a| p.coord(a))
}

/// Fused multi-scale feature of the joint field at `x` and control state `kappa`.
pub fn query_field_joint(planes: &PlaneSetJoint, store: &ParamStore, x: [f64; 3], kappa: &[f64]) -> Vec<f64> {
    planes.0.query_point(store, |a| match a {
        Axis::Control(k) => kappa[k],
        a => x[a.column().min(2)],
    })
}

/// Fused multi-scale feature of a 3D plane set at `x`.
pub fn query_field3(planes: &PlaneSet3D, store: &ParamStore, x: [f64; 3]) -> Vec<f64> {
    planes.0.query_point(store, |a| x[a.column().min(2)])
}

/// Differentiable smoothness penalty: mean over planes of the summed squared
/// second differences along both axes, each divided by the plane's node
/// count.
pub fn laplacian_graph(g: &mut Graph, planes: &PlaneStack) -> Var {
    let terms: Vec<Var> = planes.planes().map(|p| g.second_diff(p.as_ref())).collect();
    let n = terms.len();
    let all = g.concat_rows(&terms);
    let total = g.sum(all);
    g.mul_scalar(total, 1.0 / n as f64)
}

pub fn laplacian_smoothness(planes: &PlaneStack, store: &ParamStore) -> f64 {
    let mut g = Graph::new(store);
    let v = laplacian_graph(&mut g, planes);
    g.scalar_value(v)
}
