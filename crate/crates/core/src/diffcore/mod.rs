//! Reverse-mode differentiation over a flat parameter vector, plus the
//! optimizer and learning-rate schedule used by training.

mod adam;
mod graph;
mod params;
mod schedule;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, PlaneRef, Var};
pub(crate) use graph::{interp_cell, locate};
pub use params::{ParamStore, Segment, SegmentId};
pub use schedule::lr_at;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Runs `computation` forward only and returns its scalar value.
pub fn evaluate<F>(params: &ParamStore, computation: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::new(params);
    let out = computation(&mut g);
    g.check()?;
    let value = g.scalar_value(out);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "evaluate".into(),
        });
    }
    Ok(value)
}

/// Value and exact gradient of a scalar computation with respect to every
/// parameter in `params`. Parameters the computation never reads get 0.
pub fn evaluate_and_grad<F>(params: &ParamStore, computation: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Graph) -> Var,
{
    let mut g = Graph::new(params);
    let out = computation(&mut g);
    g.check()?;
    let value = g.scalar_value(out);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "evaluate_and_grad (value)".into(),
        });
    }
    let mut grads = vec![0.0; params.len()];
    g.backward(out, &mut grads);
    if let Some(i) = grads.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("evaluate_and_grad (gradient of parameter {i})"),
        });
    }
    Ok((value, grads))
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// parameters.
pub fn grad_check<F>(params: &ParamStore, computation: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Var,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_subset(params, computation, h, &all)
}

/// [`grad_check`] restricted to the listed parameter indices.
pub fn grad_check_subset<F>(params: &ParamStore, computation: F, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph) -> Var,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check: step {h}")));
    }
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_check parameters".into(),
        });
    }
    let (_, analytic) = evaluate_and_grad(params, &computation)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for &i in indices {
        let x0 = probe.values()[i];
        probe.values_mut()[i] = x0 + h;
        let fp = evaluate(&probe, &computation)?;
        probe.values_mut()[i] = x0 - h;
        let fm = evaluate(&probe, &computation)?;
        probe.values_mut()[i] = x0;
        let fd = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
