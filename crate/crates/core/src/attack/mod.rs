//! Bound-aware adversarial attacks: an adversary adds perturbations to
//! intermediate operator outputs, constrained to either error model, and
//! tries to flip the prediction.

mod eval;
pub mod grad;
mod pgd;
mod project;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::BoundError;
use crate::calibration::CalibError;
use crate::exec::ExecError;
use crate::protocol::ProtocolError;
use crate::rng::Rng;

pub use eval::{attack_pairs, default_inject, evaluate, false_positive_rate, run_cell, summarize_cell, CellRow, EvalConfig, EvalReport};
pub use grad::{vjp, GradContext, Operand};
pub use pgd::{pgd_attack, AttackMode, AttackResult, FeasibleSpec, NodeCaps, PgdConfig};
pub use project::{empirical_feasible, project_empirical, project_theoretical, theoretical_feasible, CapCurve};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty tensor")]
    Empty,
    #[error("class {c1} is not the argmax")]
    NotArgmax { c1: usize },
    #[error("target class {target} is invalid for predicted class {predicted}")]
    Target { target: usize, predicted: usize },
    #[error("{classes} classes cannot form {buckets} target buckets")]
    TooFewClasses { classes: usize, buckets: usize },
    #[error("iteration budget must be positive")]
    Budget,
    #[error("node {0} out of range")]
    BadNode(usize),
    #[error("invalid caps: {0}")]
    Caps(String),
    #[error("empty dataset")]
    NoData,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Index of the largest logit (first on ties).
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// `z_c2 - z_c1`; positive once the target overtakes the prediction.
pub fn margin_loss(logits: &[f64], c1: usize, c2: usize) -> Result<f64, AttackError> {
    if logits.is_empty() {
        return Err(AttackError::Empty);
    }
    if c1 >= logits.len() || logits[c1] < logits[argmax(logits)] {
        return Err(AttackError::NotArgmax { c1 });
    }
    if c2 >= logits.len() || c2 == c1 {
        return Err(AttackError::Target { target: c2, predicted: c1 });
    }
    Ok(logits[c2] - logits[c1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub bucket: usize,
}

/// Ranks the non-argmax classes by their margin to the prediction
/// (smallest first), splits the ranking into `buckets` equal-width
/// percentile bands and draws one class per band.
pub fn bucket_targets(logits: &[f64], buckets: usize, rng: &mut Rng) -> Result<Vec<Target>, AttackError> {
    if buckets == 0 || logits.len() < buckets + 1 {
        return Err(AttackError::TooFewClasses {
            classes: logits.len(),
            buckets,
        });
    }
    let c1 = argmax(logits);
    let mut others: Vec<usize> = (0..logits.len()).filter(|&c| c != c1).collect();
    others.sort_by(|&a, &b| (logits[c1] - logits[a]).total_cmp(&(logits[c1] - logits[b])).then(a.cmp(&b)));
    let n = others.len();
    let mut bands: Vec<Vec<usize>> = vec![vec![]; buckets];
    for (rank, &c) in others.iter().enumerate() {
        bands[rank * buckets / n].push(c);
    }
    Ok(bands
        .iter()
        .enumerate()
        .map(|(b, band)| Target {
            class: band[rng.below(band.len())],
            bucket: b,
        })
        .collect())
}
