//! Weighted assembly of the training objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss weights for focal, repulsion, control-state, language and
/// smoothness terms; the rendering term has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lambdas {
    pub focal: f64,
    pub repulsion: f64,
    pub var: f64,
    pub lang: f64,
    pub smooth: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            focal: 1e-3,
            repulsion: 1e-2,
            var: 1e-3,
            lang: 1.0,
            smooth: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KappaMode {
    /// Control states come from the dataset.
    #[default]
    GtKappa,
    /// Per-frame control states are learned, supervised at keyframes.
    LearnableKappa,
}

/// Unweighted loss components; `None` marks a term that was not computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub mse: Option<T>,
    pub focal: Option<T>,
    pub repulsion: Option<T>,
    pub var: Option<T>,
    pub lang: Option<T>,
    pub smooth: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            mse: None,
            focal: None,
            repulsion: None,
            var: None,
            lang: None,
            smooth: None,
        }
    }
}

/// Which terms an objective needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Required {
    pub semantic: bool,
    pub var: bool,
}

impl Required {
    pub fn for_mode(mode: KappaMode) -> Self {
        Self {
            semantic: true,
            var: mode == KappaMode::LearnableKappa,
        }
    }
}

/// `(name, weight, term)` in a fixed order, checking presence.
pub fn weighted_terms<T: Copy>(terms: &LossTerms<T>, lambdas: &Lambdas, required: Required) -> Result<Vec<(&'static str, f64, T)>> {
    let mut out = Vec::with_capacity(6);
    let mut need = |name: &'static str, weight: f64, term: Option<T>, needed: bool| -> Result<()> {
        match (term, needed) {
            (Some(t), true) => {
                out.push((name, weight, t));
                Ok(())
            }
            (None, true) => Err(Error::MissingLossTerm(name)),
            (Some(_), false) => Err(Error::InvalidArgument(format!("loss term `{name}` is not used in this mode"))),
            (None, false) => Ok(()),
        }
    };
    need("mse", 1.0, terms.mse, true)?;
    need("focal", lambdas.focal, terms.focal, required.semantic)?;
    need("repulsion", lambdas.repulsion, terms.repulsion, required.semantic)?;
    need("var", lambdas.var, terms.var, required.var)?;
    need("lang", lambdas.lang, terms.lang, required.semantic)?;
    need("smooth", lambdas.smooth, terms.smooth, true)?;
    Ok(out)
}

/// Weighted sum and the per-term breakdown (unweighted values).
pub fn total_loss(terms: &LossTerms<f64>, lambdas: &Lambdas, mode: KappaMode) -> Result<(f64, BTreeMap<String, f64>)> {
    total_loss_with(terms, lambdas, Required::for_mode(mode))
}

pub fn total_loss_with(terms: &LossTerms<f64>, lambdas: &Lambdas, required: Required) -> Result<(f64, BTreeMap<String, f64>)> {
    let parts = weighted_terms(terms, lambdas, required)?;
    let mut breakdown = BTreeMap::new();
    let mut total = 0.0;
    for (name, w, v) in parts {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss term `{name}`"),
            });
        }
        total += w * v;
        breakdown.insert(name.to_string(), v);
    }
    Ok((total, breakdown))
}
