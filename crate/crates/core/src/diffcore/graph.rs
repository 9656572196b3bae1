//! Tape of matrix-valued nodes with reverse-mode gradients.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only while the forward pass is
//! recorded. Every call appends one node; [`Graph::backward`] walks the tape
//! in reverse and adds parameter gradients into a caller-owned flat buffer
//! laid out like the store.
//!
//! Binary ops broadcast only their right operand, which may be the same
//! shape as the left, `1x1`, `1xC` (one row, repeated) or `Rx1` (one column,
//! repeated).
//!
//! Numeric domain violations (log of a non-positive value, division by zero,
//! non-finite results) do not abort recording. The first one is kept as the
//! graph's fault and surfaced by [`Graph::check`].

use super::params::{ParamStore, SegmentId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A feature plane stored in a parameter segment: `h * w` nodes, `f`
/// features each, row-major over `(row, col, feature)`. Queries read the
/// `axis_u` column of the coordinate matrix along the width and `axis_v`
/// along the height.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneRef {
    pub seg: SegmentId,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub axis_u: usize,
    pub axis_v: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp {
    Neg,
    Exp,
    Log,
    Relu,
    Elu,
    Softplus,
    Sigmoid,
    Square,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    MaxScalar(f64),
    MinScalar(f64),
    Huber(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(SegmentId),
    Binary(BinOp, Var, Var, Bcast),
    Unary(UnOp, Var),
    MatMul(Var, Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SegmentSum(Var, usize),
    CumsumExclusive(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    PlaneProduct {
        planes: Vec<PlaneRef>,
        coords: Var,
    },
    TableLerp {
        seg: SegmentId,
        bins: usize,
        objects: Vec<i64>,
        kappa: Var,
    },
    SecondDiff {
        plane: PlaneRef,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    fault: Option<Error>,
}

/// Calls `f(i, j)` for every output index `i` with its broadcast source `j`.
#[inline(always)]
fn for_each_bcast(b: Bcast, cols: usize, n: usize, mut f: impl FnMut(usize, usize)) {
    match b {
        Bcast::Same => (0..n).for_each(|i| f(i, i)),
        Bcast::Scalar => (0..n).for_each(|i| f(i, 0)),
        Bcast::Row | Bcast::Col if cols == 0 => {}
        Bcast::Row => {
            for r in 0..n / cols {
                (0..cols).for_each(|c| f(r * cols + c, c));
            }
        }
        Bcast::Col => {
            for r in 0..n / cols {
                (0..cols).for_each(|c| f(r * cols + c, r));
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cell location and fractional offsets of one bilinear query.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub i0: usize,
    pub j0: usize,
    pub fy: f64,
    pub fx: f64,
    /// Whether each coordinate was strictly inside [0, 1] (no clamping).
    pub live_u: bool,
    pub live_v: bool,
}

fn axis_cell(t: f64, n: usize) -> (usize, f64, bool) {
    let live = (0.0..=1.0).contains(&t);
    let t = t.clamp(0.0, 1.0);
    if n < 2 {
        return (0, 0.0, false);
    }
    let mut x = t * (n - 1) as f64;
    let r = x.round();
    if (x - r).abs() < 1e-12 {
        x = r;
    }
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, x - i0 as f64, live)
}

/// Align-corners cell lookup: node `k` of an axis with `n` nodes sits at
/// `k / (n - 1)`. Out-of-range coordinates clamp.
pub(crate) fn locate(u: f64, v: f64, h: usize, w: usize) -> Cell {
    let (j0, fx, live_u) = axis_cell(u, w);
    let (i0, fy, live_v) = axis_cell(v, h);
    Cell {
        i0,
        j0,
        fy,
        fx,
        live_u,
        live_v,
    }
}

/// Bilinear interpolation of one plane at a located cell.
#[inline]
pub(crate) fn interp_cell(data: &[f64], w: usize, f: usize, c: &Cell, h: usize, out: &mut [f64]) {
    let j1 = if w > 1 { c.j0 + 1 } else { c.j0 };
    let i1 = if h > 1 { c.i0 + 1 } else { c.i0 };
    let p00 = &data[(c.i0 * w + c.j0) * f..][..f];
    let p01 = &data[(c.i0 * w + j1) * f..][..f];
    let p10 = &data[(i1 * w + c.j0) * f..][..f];
    let p11 = &data[(i1 * w + j1) * f..][..f];
    let (fx, fy) = (c.fx, c.fy);
    for k in 0..f {
        let top = (1.0 - fx) * p00[k] + fx * p01[k];
        let bot = (1.0 - fx) * p10[k] + fx * p11[k];
        out[k] = (1.0 - fy) * top + fy * bot;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Returns the first recorded numeric fault, if any.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(Error::Domain { op, detail }) => Err(Error::Domain {
                op,
                detail: detail.clone(),
            }),
            Some(Error::NonFinite { context }) => Err(Error::NonFinite {
                context: context.clone(),
            }),
            Some(other) => Err(Error::InvalidArgument(other.to_string())),
        }
    }

    fn fail(&mut self, err: Error) {
        if self.fault.is_none() {
            self.fault = Some(err);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A parameter segment as a differentiable leaf, shaped like the segment.
    pub fn param(&mut self, seg: SegmentId) -> Var {
        let s = self.params.segment(seg);
        let value = Tensor::new(s.rows, s.cols, self.params.seg_values(seg).to_vec());
        self.push(value, Op::Param(seg), true)
    }

    // ---- elementwise ---------------------------------------------------------

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let bc_kind = if (ar, ac) == (br, bc) {
            Bcast::Same
        } else if (br, bc) == (1, 1) {
            Bcast::Scalar
        } else if br == 1 && bc == ac {
            Bcast::Row
        } else if bc == 1 && br == ar {
            Bcast::Col
        } else {
            panic!("{op:?}: cannot broadcast {br}x{bc} onto {ar}x{ac}");
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; av.len()];
        macro_rules! run {
            ($f:expr) => {
                for_each_bcast(bc_kind, ac, av.len(), |i, j| out[i] = $f(av[i], bv[j]))
            };
        }
        match op {
            BinOp::Add => run!(|x: f64, y: f64| x + y),
            BinOp::Sub => run!(|x: f64, y: f64| x - y),
            BinOp::Mul => run!(|x: f64, y: f64| x * y),
            BinOp::Div => run!(|x: f64, y: f64| x / y),
            BinOp::Max => run!(|x: f64, y: f64| x.max(y)),
            BinOp::Min => run!(|x: f64, y: f64| x.min(y)),
        }
        let zero_div = op == BinOp::Div && bv.contains(&0.0);
        if zero_div {
            self.fail(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(ar, ac, out), Op::Binary(op, a, b, bc_kind), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Div, a, b)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Max, a, b)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinOp::Min, a, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let (rows, cols) = src.shape();
        let mut bad: Option<(&'static str, f64)> = None;
        let out: Vec<f64> = src
            .data
            .iter()
            .map(|&x| match op {
                UnOp::Neg => -x,
                UnOp::Exp => x.exp(),
                UnOp::Log => {
                    if x <= 0.0 {
                        bad.get_or_insert(("log", x));
                    }
                    x.ln()
                }
                UnOp::Relu => x.max(0.0),
                UnOp::Elu => {
                    if x > 0.0 {
                        x
                    } else {
                        x.exp_m1()
                    }
                }
                UnOp::Softplus => softplus(x),
                UnOp::Sigmoid => sigmoid(x),
                UnOp::Square => x * x,
                UnOp::AddScalar(c) => x + c,
                UnOp::MulScalar(c) => x * c,
                UnOp::PowScalar(p) => {
                    if (x < 0.0 && p.fract() != 0.0) || (x == 0.0 && p < 1.0) {
                        bad.get_or_insert(("pow", x));
                    }
                    x.powf(p)
                }
                UnOp::MaxScalar(c) => x.max(c),
                UnOp::MinScalar(c) => x.min(c),
                UnOp::Huber(d) => {
                    let ax = x.abs();
                    if ax <= d {
                        0.5 * x * x
                    } else {
                        d * (ax - 0.5 * d)
                    }
                }
            })
            .collect();
        if let Some((name, x)) = bad {
            self.fail(Error::Domain {
                op: name,
                detail: format!("argument {x} outside the domain"),
            });
        }
        let rg = self.rg(a);
        self.push(Tensor::new(rows, cols, out), Op::Unary(op, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnOp::Log, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Relu, a)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Elu, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnOp::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnOp::Square, a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::AddScalar(c), a)
    }
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::MulScalar(c), a)
    }
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        self.unary(UnOp::PowScalar(p), a)
    }
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::MaxScalar(c), a)
    }
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnOp::MinScalar(c), a)
    }
    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(UnOp::Huber(delta), a)
    }

    /// `c - a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    // ---- linear algebra and reductions -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul: {n}x{k} by {k2}x{m}");
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[kk * m..(kk + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(n, m, out), Op::MatMul(a, b), rg)
    }

    /// `x W + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum across columns: `R x C -> R x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out: Vec<f64> = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(out), Op::SumRows(a), rg)
    }

    /// Sum down rows: `R x C -> 1 x C`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, &x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row_vector(out), Op::SumCols(a), rg)
    }

    /// Sums consecutive groups of `group` rows: `(G*group) x C -> G x C`.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(group > 0 && t.rows % group == 0, "segment_sum: {} rows by {group}", t.rows);
        let groups = t.rows / group;
        let c = t.cols;
        let mut out = vec![0.0; groups * c];
        for r in 0..t.rows {
            let g = r / group;
            for (o, &x) in out[g * c..(g + 1) * c].iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(groups, c, out), Op::SegmentSum(a, group), rg)
    }

    /// Exclusive prefix sum along each row.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows {
            let mut acc = 0.0;
            for c in 0..t.cols {
                out[r * t.cols + c] = acc;
                acc += t.data[r * t.cols + c];
            }
        }
        let (rows, cols) = t.shape();
        let rg = self.rg(a);
        self.push(Tensor::new(rows, cols, out), Op::CumsumExclusive(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.len(), rows * cols, "reshape {}x{} to {rows}x{cols}", t.rows, t.cols);
        let value = Tensor::new(rows, cols, t.data.clone());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols: row mismatch");
                self.shape(p).1
            })
            .sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rows = t.rows;
        let rg = self.rg(a);
        self.push(Tensor::new(rows, len, out), Op::SliceCols(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat_rows: column mismatch");
            out.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(rows, cols, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Output row `i` is input row `index[i]`; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(index.len() * t.cols);
        for &r in &index {
            out.extend_from_slice(t.row(r));
        }
        let (rows, cols) = (index.len(), t.cols);
        let rg = self.rg(a);
        self.push(Tensor::new(rows, cols, out), Op::GatherRows(a, index), rg)
    }

    /// Picks flat entries of `a` into a `rows x cols` result.
    pub fn gather(&mut self, a: Var, flat_index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(flat_index.len(), rows * cols, "gather: index count");
        let t = &self.nodes[a.0].value;
        let out = flat_index.iter().map(|&i| t.data[i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(rows, cols, out), Op::Gather(a, flat_index), rg)
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows {
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * t.cols..(r + 1) * t.cols];
            let mut z = 0.0;
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - m).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let (rows, cols) = t.shape();
        let rg = self.rg(a);
        self.push(Tensor::new(rows, cols, out), Op::SoftmaxRows(a), rg)
    }

    // ---- interpolation gathers ---------------------------------------------

    /// Elementwise product of bilinear lookups into each plane, one query
    /// per row of `coords`: `N x D -> N x F`.
    pub fn plane_product(&mut self, planes: &[PlaneRef], coords: Var) -> Var {
        assert!(!planes.is_empty());
        let f = planes[0].f;
        let ct = &self.nodes[coords.0].value;
        let n = ct.rows;
        let mut out = vec![1.0; n * f];
        let mut buf = vec![0.0; f];
        for p in planes {
            assert_eq!(p.f, f, "plane_product: feature width mismatch");
            assert!(p.axis_u < ct.cols && p.axis_v < ct.cols);
            let data = self.params.seg_values(p.seg);
            assert_eq!(data.len(), p.h * p.w * f, "plane segment size");
            for r in 0..n {
                let cell = locate(ct.get(r, p.axis_u), ct.get(r, p.axis_v), p.h, p.w);
                interp_cell(data, p.w, f, &cell, p.h, &mut buf);
                for (o, &b) in out[r * f..(r + 1) * f].iter_mut().zip(&buf) {
                    *o *= b;
                }
            }
        }
        self.push(
            Tensor::new(n, f, out),
            Op::PlaneProduct {
                planes: planes.to_vec(),
                coords,
            },
            true,
        )
    }

    /// Linear interpolation along the bin axis of an `(objects * bins) x d`
    /// table. Row `i` reads object `objects[i]` at position `kappa[i]`;
    /// a negative object index yields a zero row.
    pub fn table_lerp(&mut self, seg: SegmentId, bins: usize, objects: Vec<i64>, kappa: Var) -> Var {
        let s = self.params.segment(seg);
        let d = s.cols;
        let data = self.params.seg_values(seg);
        let kt = &self.nodes[kappa.0].value;
        assert_eq!(kt.cols, 1);
        assert_eq!(kt.rows, objects.len());
        assert!(bins >= 2 && s.rows % bins == 0);
        let n_obj = (s.rows / bins) as i64;
        let mut out = vec![0.0; objects.len() * d];
        for (i, &u) in objects.iter().enumerate() {
            if u < 0 {
                continue;
            }
            assert!(u < n_obj, "table_lerp: object {u} out of range");
            let (b0, t, _) = axis_cell(kt.data[i], bins);
            let base = u as usize * bins;
            let e0 = &data[(base + b0) * d..][..d];
            let e1 = &data[(base + b0 + 1) * d..][..d];
            for k in 0..d {
                out[i * d + k] = (1.0 - t) * e0[k] + t * e1[k];
            }
        }
        let n = objects.len();
        self.push(
            Tensor::new(n, d, out),
            Op::TableLerp {
                seg,
                bins,
                objects,
                kappa,
            },
            true,
        )
    }

    /// Sum of squared second differences along both axes of one plane,
    /// divided by `h * w`. Axes shorter than three nodes contribute nothing.
    pub fn second_diff(&mut self, plane: PlaneRef) -> Var {
        let data = self.params.seg_values(plane.seg);
        let PlaneRef { h, w, f, .. } = plane;
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..f {
                    let at = |ii: usize, jj: usize| data[(ii * w + jj) * f + k];
                    if j >= 1 && j + 1 < w {
                        let d = at(i, j - 1) - 2.0 * at(i, j) + at(i, j + 1);
                        acc += d * d;
                    }
                    if i >= 1 && i + 1 < h {
                        let d = at(i - 1, j) - 2.0 * at(i, j) + at(i + 1, j);
                        acc += d * d;
                    }
                }
            }
        }
        let value = acc / (h * w) as f64;
        self.push(Tensor::scalar(value), Op::SecondDiff { plane }, true)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Back-propagates from a `1x1` node, adding parameter gradients into
    /// `param_grads` (laid out like the store's flat vector).
    pub fn backward(&self, root: Var, param_grads: &mut [f64]) {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        assert_eq!(param_grads.len(), self.params.len());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if !self.nodes[root.0].requires_grad {
            return;
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, param_grads);
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [f64],
    ) {
        let out = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(seg) => {
                let range = self.params.segment(*seg).range();
                for (pg, &gi) in param_grads[range].iter_mut().zip(g) {
                    *pg += gi;
                }
            }
            Op::Binary(op, a, b, bk) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let cols = out.cols;
                let n = g.len();
                if let Some(ga) = self.buf(grads, *a) {
                    macro_rules! run {
                        ($f:expr) => {
                            for_each_bcast(*bk, cols, n, |i, j| ga[i] += g[i] * $f(av[i], bv[j]))
                        };
                    }
                    match op {
                        BinOp::Add | BinOp::Sub => run!(|_: f64, _: f64| 1.0),
                        BinOp::Mul => run!(|_: f64, y: f64| y),
                        BinOp::Div => run!(|_: f64, y: f64| 1.0 / y),
                        BinOp::Max => run!(|x: f64, y: f64| f64::from(x >= y)),
                        BinOp::Min => run!(|x: f64, y: f64| f64::from(x <= y)),
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    macro_rules! run {
                        ($f:expr) => {
                            for_each_bcast(*bk, cols, n, |i, j| gb[j] += g[i] * $f(av[i], bv[j]))
                        };
                    }
                    match op {
                        BinOp::Add => run!(|_: f64, _: f64| 1.0),
                        BinOp::Sub => run!(|_: f64, _: f64| -1.0),
                        BinOp::Mul => run!(|x: f64, _: f64| x),
                        BinOp::Div => run!(|x: f64, y: f64| -x / (y * y)),
                        BinOp::Max => run!(|x: f64, y: f64| f64::from(y > x)),
                        BinOp::Min => run!(|x: f64, y: f64| f64::from(y < x)),
                    }
                }
            }
            Op::Unary(op, a) => {
                let av = &self.nodes[a.0].value.data;
                let yv = &out.data;
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..g.len() {
                        let x = av[i];
                        let y = yv[i];
                        let d = match *op {
                            UnOp::Neg => -1.0,
                            UnOp::Exp => y,
                            UnOp::Log => 1.0 / x,
                            UnOp::Relu => f64::from(x > 0.0),
                            UnOp::Elu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    y + 1.0
                                }
                            }
                            UnOp::Softplus => sigmoid(x),
                            UnOp::Sigmoid => y * (1.0 - y),
                            UnOp::Square => 2.0 * x,
                            UnOp::AddScalar(_) => 1.0,
                            UnOp::MulScalar(c) => c,
                            UnOp::PowScalar(p) => p * x.powf(p - 1.0),
                            UnOp::MaxScalar(c) => f64::from(x >= c),
                            UnOp::MinScalar(c) => f64::from(x <= c),
                            UnOp::Huber(d) => {
                                if x.abs() <= d {
                                    x
                                } else {
                                    d * x.signum()
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = out.cols;
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                if let Some(ga) = self.buf(grads, *a) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let brow = &bv[kk * m..(kk + 1) * m];
                            let mut s = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + kk] += s;
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for (kk, &x) in av[i * k..(i + 1) * k].iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[kk * m..(kk + 1) * m].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumRows(a) => {
                let cols = self.shape(*a).1;
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / cols];
                    }
                }
            }
            Op::SumCols(a) => {
                let cols = self.shape(*a).1;
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i % cols];
                    }
                }
            }
            Op::SegmentSum(a, group) => {
                let cols = out.cols;
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        let r = i / cols;
                        *x += g[(r / group) * cols + i % cols];
                    }
                }
            }
            Op::CumsumExclusive(a) => {
                let (rows, cols) = out.shape();
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        // d out[c] / d in[j] = 1 for j < c
                        let mut acc = 0.0;
                        for c in (0..cols).rev() {
                            ga[r * cols + c] += acc;
                            acc += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols;
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if let Some(gp) = self.buf(grads, p) {
                        for r in 0..rows {
                            for c in 0..cols {
                                gp[r * cols + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = out.shape();
                let cols = self.shape(*a).1;
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.buf(grads, p) {
                        for (x, &gi) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows(a, index) => {
                let cols = out.cols;
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, &r) in index.iter().enumerate() {
                        for c in 0..cols {
                            ga[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }
            Op::Gather(a, index) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (i, &j) in index.iter().enumerate() {
                        ga[j] += g[i];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.shape();
                if let Some(ga) = self.buf(grads, *a) {
                    for r in 0..rows {
                        let y = &out.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::PlaneProduct { planes, coords } => {
                self.plane_product_backward(planes, *coords, g, grads, param_grads);
            }
            Op::TableLerp {
                seg,
                bins,
                objects,
                kappa,
            } => {
                let s = self.params.segment(*seg);
                let d = s.cols;
                let data = self.params.seg_values(*seg);
                let kt = &self.nodes[kappa.0].value.data;
                let mut dk = vec![0.0; objects.len()];
                for (i, &u) in objects.iter().enumerate() {
                    if u < 0 {
                        continue;
                    }
                    let (b0, t, live) = axis_cell(kt[i], *bins);
                    let row0 = u as usize * bins + b0;
                    let gi = &g[i * d..(i + 1) * d];
                    let base = s.offset + row0 * d;
                    let mut dt = 0.0;
                    for k in 0..d {
                        param_grads[base + k] += (1.0 - t) * gi[k];
                        param_grads[base + d + k] += t * gi[k];
                        dt += gi[k] * (data[(row0 + 1) * d + k] - data[row0 * d + k]);
                    }
                    if live {
                        dk[i] = dt * (*bins - 1) as f64;
                    }
                }
                if let Some(gk) = self.buf(grads, *kappa) {
                    for (x, v) in gk.iter_mut().zip(dk) {
                        *x += v;
                    }
                }
            }
            Op::SecondDiff { plane } => {
                let data = self.params.seg_values(plane.seg);
                let off = self.params.segment(plane.seg).offset;
                let PlaneRef { h, w, f, .. } = *plane;
                let scale = 2.0 * g[0] / (h * w) as f64;
                let at = |ii: usize, jj: usize, k: usize| (ii * w + jj) * f + k;
                for i in 0..h {
                    for j in 0..w {
                        for k in 0..f {
                            if j >= 1 && j + 1 < w {
                                let d = data[at(i, j - 1, k)] - 2.0 * data[at(i, j, k)]
                                    + data[at(i, j + 1, k)];
                                param_grads[off + at(i, j - 1, k)] += scale * d;
                                param_grads[off + at(i, j, k)] -= 2.0 * scale * d;
                                param_grads[off + at(i, j + 1, k)] += scale * d;
                            }
                            if i >= 1 && i + 1 < h {
                                let d = data[at(i - 1, j, k)] - 2.0 * data[at(i, j, k)]
                                    + data[at(i + 1, j, k)];
                                param_grads[off + at(i - 1, j, k)] += scale * d;
                                param_grads[off + at(i, j, k)] -= 2.0 * scale * d;
                                param_grads[off + at(i + 1, j, k)] += scale * d;
                            }
                        }
                    }
                }
            }
        }
    }

    fn plane_product_backward(
        &self,
        planes: &[PlaneRef],
        coords: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [f64],
    ) {
        let ct = &self.nodes[coords.0].value;
        let (n, d) = ct.shape();
        let f = planes[0].f;
        let np = planes.len();
        let want_coords = self.nodes[coords.0].requires_grad;
        let mut dcoords = if want_coords { vec![0.0; n * d] } else { Vec::new() };
        let datas: Vec<&[f64]> = planes.iter().map(|p| self.params.seg_values(p.seg)).collect();
        let offsets: Vec<usize> = planes
            .iter()
            .map(|p| self.params.segment(p.seg).offset)
            .collect();
        let mut cells = vec![
            Cell {
                i0: 0,
                j0: 0,
                fy: 0.0,
                fx: 0.0,
                live_u: false,
                live_v: false
            };
            np
        ];
        let mut vals = vec![0.0; np * f];
        let mut prefix = vec![0.0; f];
        let mut suffix = vec![0.0; np * f];
        for r in 0..n {
            let gr = &g[r * f..(r + 1) * f];
            if gr.iter().all(|&x| x == 0.0) {
                continue;
            }
            for (pi, p) in planes.iter().enumerate() {
                cells[pi] = locate(ct.get(r, p.axis_u), ct.get(r, p.axis_v), p.h, p.w);
                interp_cell(datas[pi], p.w, f, &cells[pi], p.h, &mut vals[pi * f..(pi + 1) * f]);
            }
            // suffix[pi] = product of planes after pi
            for k in 0..f {
                suffix[(np - 1) * f + k] = 1.0;
            }
            for pi in (0..np - 1).rev() {
                for k in 0..f {
                    suffix[pi * f + k] = suffix[(pi + 1) * f + k] * vals[(pi + 1) * f + k];
                }
            }
            prefix.iter_mut().for_each(|x| *x = 1.0);
            for (pi, p) in planes.iter().enumerate() {
                let c = cells[pi];
                let (w, h) = (p.w, p.h);
                let j1 = if w > 1 { c.j0 + 1 } else { c.j0 };
                let i1 = if h > 1 { c.i0 + 1 } else { c.i0 };
                let data = datas[pi];
                let base = offsets[pi];
                let w00 = (1.0 - c.fx) * (1.0 - c.fy);
                let w01 = c.fx * (1.0 - c.fy);
                let w10 = (1.0 - c.fx) * c.fy;
                let w11 = c.fx * c.fy;
                let o00 = (c.i0 * w + c.j0) * f;
                let o01 = (c.i0 * w + j1) * f;
                let o10 = (i1 * w + c.j0) * f;
                let o11 = (i1 * w + j1) * f;
                let mut du = 0.0;
                let mut dv = 0.0;
                for k in 0..f {
                    let gk = gr[k] * prefix[k] * suffix[pi * f + k];
                    param_grads[base + o00 + k] += gk * w00;
                    param_grads[base + o01 + k] += gk * w01;
                    param_grads[base + o10 + k] += gk * w10;
                    param_grads[base + o11 + k] += gk * w11;
                    if want_coords {
                        let (p00, p01, p10, p11) =
                            (data[o00 + k], data[o01 + k], data[o10 + k], data[o11 + k]);
                        du += gk * ((1.0 - c.fy) * (p01 - p00) + c.fy * (p11 - p10));
                        dv += gk * ((1.0 - c.fx) * (p10 - p00) + c.fx * (p11 - p01));
                    }
                }
                if want_coords {
                    if c.live_u && w > 1 {
                        dcoords[r * d + p.axis_u] += du * (w - 1) as f64;
                    }
                    if c.live_v && h > 1 {
                        dcoords[r * d + p.axis_v] += dv * (h - 1) as f64;
                    }
                }
                for k in 0..f {
                    prefix[k] *= vals[pi * f + k];
                }
            }
        }
        if want_coords {
            if let Some(gc) = self.buf(grads, coords) {
                for (x, v) in gc.iter_mut().zip(dcoords) {
                    *x += v;
                }
            }
        }
    }
}
