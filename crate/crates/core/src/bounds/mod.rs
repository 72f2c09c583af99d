//! Per-operator elementwise rounding-error bounds under the standard model
//! `fl(a op b) = (a op b)(1 + d)`, `|d| <= u`.
//!
//! Bounds are operator-local: every operator starts from exact inputs, so a
//! node's bound covers only the rounding inside that node.

mod templates;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, DeviceProfile, ExecError, Feeds, Trace};
use crate::graph::Graph;
use crate::tensor::{Tensor, TensorFile, TensorPayload};

pub use templates::{op_bound, softmax_bound_rows, OperandView};

pub const U_FP32: f64 = 1.0 / 16_777_216.0;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("gamma undefined: k*u = {0} >= 1")]
    GammaDomain(f64),
    #[error("invalid model: {0}")]
    Model(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Deterministic,
    Probabilistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpModel {
    pub u: f64,
    pub lambda: f64,
    pub mode: BoundMode,
}

impl Default for FpModel {
    fn default() -> Self {
        Self {
            u: U_FP32,
            lambda: 4.0,
            mode: BoundMode::Probabilistic,
        }
    }
}

impl FpModel {
    pub fn deterministic() -> Self {
        Self {
            mode: BoundMode::Deterministic,
            ..Self::default()
        }
    }

    pub fn probabilistic() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), BoundError> {
        if !(self.u > 0.0 && self.u < 1.0) || !(self.lambda > 0.0) {
            return Err(BoundError::Model(format!(
                "need 0 < u < 1 and lambda > 0, got u={} lambda={}",
                self.u, self.lambda
            )));
        }
        Ok(())
    }

    /// Accumulation constant for `k` chained roundings in this mode.
    pub fn gamma_k(&self, k: usize) -> Result<f64, BoundError> {
        match self.mode {
            BoundMode::Deterministic => gamma(k, self.u),
            BoundMode::Probabilistic => Ok(gamma_tilde(k, self.lambda, self.u)),
        }
    }
}

/// `k u / (1 - k u)`.
pub fn gamma(k: usize, u: f64) -> Result<f64, BoundError> {
    let ku = k as f64 * u;
    if ku >= 1.0 {
        return Err(BoundError::GammaDomain(ku));
    }
    Ok(ku / (1.0 - ku))
}

/// `exp(lambda sqrt(k) u + k u^2 / (1 - u)) - 1`.
pub fn gamma_tilde(k: usize, lambda: f64, u: f64) -> f64 {
    let k = k as f64;
    (lambda * k.sqrt() * u + k * u * u / (1.0 - u)).exp_m1()
}

/// Probability that a `gamma_tilde(lambda)` bound holds under the
/// independent mean-zero rounding model.
pub fn confidence(lambda: f64, u: f64) -> f64 {
    1.0 - 2.0 * (-lambda * lambda * (1.0 - u) * (1.0 - u) / 2.0).exp()
}

/// Elementwise bound on the deviation of a computed tensor from its exact
/// value.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTensor {
    pub shape: Vec<usize>,
    pub eps: Vec<f64>,
}

impl BoundTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            eps: vec![0.0; crate::tensor::numel(shape)],
        }
    }

    pub fn max(&self) -> f64 {
        self.eps.iter().copied().fold(0.0, f64::max)
    }

    pub fn median(&self) -> f64 {
        if self.eps.is_empty() {
            return 0.0;
        }
        crate::calibration::percentile(&self.eps, 50.0).unwrap_or(0.0)
    }

    /// Elements where `|computed - reference| > eps`.
    pub fn violations(&self, computed: &[f64], reference: &[f64]) -> usize {
        computed
            .iter()
            .zip(reference)
            .zip(&self.eps)
            .filter(|((c, r), e)| (*c - *r).abs() > **e)
            .count()
    }
}

/// Bound for node `i` given its operands and computed output.
pub fn node_bound(
    g: &Graph,
    i: usize,
    operands: &[&Tensor],
    output: &Tensor,
    fma: bool,
    model: &FpModel,
) -> Result<BoundTensor, BoundError> {
    let views: Vec<OperandView<'_>> = operands
        .iter()
        .map(|t| OperandView {
            shape: t.shape(),
            values: t.to_f64(),
        })
        .collect();
    let eps = op_bound(g.node(i), &views, &output.to_f64(), fma, model)?;
    Ok(BoundTensor {
        shape: output.shape().to_vec(),
        eps,
    })
}

/// Executes under `profile` and attaches an operator-local bound to every
/// node.
pub fn co_execute(
    g: &Graph,
    inputs: &Feeds,
    profile: &DeviceProfile,
    model: &FpModel,
) -> Result<(Vec<Tensor>, Trace, Vec<BoundTensor>), BoundError> {
    model.validate()?;
    let (outputs, trace) = exec::execute(g, inputs, profile)?;
    let bounds = trace_bounds(g, inputs, &trace, profile.fma, model)?;
    Ok((outputs, trace, bounds))
}

/// Bounds for every node of an existing full trace.
pub fn trace_bounds(
    g: &Graph,
    inputs: &Feeds,
    trace: &Trace,
    fma: bool,
    model: &FpModel,
) -> Result<Vec<BoundTensor>, BoundError> {
    (0..g.len())
        .map(|i| {
            let ops = exec::operands(g, i, trace, inputs);
            node_bound(g, i, &ops, &trace.outputs[i], fma, model)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundManifest {
    model: FpModel,
    count: usize,
}

/// FP64 tensor file per node plus a manifest carrying the model.
pub fn write_bound_dump(dir: &Path, bounds: &[BoundTensor], model: &FpModel) -> Result<(), BoundError> {
    let io = |e: std::io::Error| BoundError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    for (i, b) in bounds.iter().enumerate() {
        let f = TensorFile {
            shape: b.shape.clone(),
            payload: TensorPayload::F64(b.eps.clone()),
        };
        std::fs::write(dir.join(format!("{i}.naot")), f.encode()).map_err(io)?;
    }
    let m = BoundManifest {
        model: *model,
        count: bounds.len(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&m).map_err(|e| BoundError::Io(e.to_string()))?,
    )
    .map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        assert_eq!(gamma(0, U_FP32).unwrap(), 0.0);
        let g1 = gamma(1, U_FP32).unwrap();
        // geometric series u + u^2 + u^3 + ... as an independent evaluation
        let u = U_FP32;
        let series = u + u * u + u * u * u + u.powi(4);
        assert!((g1 - series).abs() / series < 1e-14);
        assert!((g1 - 5.960_465_3e-8).abs() / g1 < 1e-6);
        assert!(gamma(1 << 24, U_FP32).is_err());
    }

    #[test]
    fn gamma_tilde_values() {
        assert_eq!(gamma_tilde(0, 4.0, U_FP32), 0.0);
        let v = gamma_tilde(1_000_000, 4.0, U_FP32);
        assert!((v - 2.3845e-4).abs() / 2.3845e-4 < 1e-3);
        let approx = 4.0 * U_FP32 * 1000.0;
        assert!((v - approx).abs() / approx < 0.01);
        assert!(confidence(4.0, U_FP32) >= 0.9993);
    }

    #[test]
    fn monotone_and_tighter_for_large_k() {
        let mut prev = (0.0, 0.0);
        for k in 1..5000 {
            let (a, b) = (gamma(k, U_FP32).unwrap(), gamma_tilde(k, 4.0, U_FP32));
            assert!(a > prev.0 && b > prev.1);
            if k >= 32 {
                assert!(b <= a, "k={k}");
            }
            prev = (a, b);
        }
    }
}
