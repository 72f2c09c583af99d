use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grad::GradContext;
use super::project::{project_empirical, project_theoretical, CapCurve};
use super::{argmax, AttackError, Target};
use crate::bounds::{node_bound, BoundTensor, FpModel};
use crate::calibration::ThresholdSet;
use crate::exec::{execute, operands, DeviceProfile, Injection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackMode {
    /// Elementwise deterministic theoretical caps.
    #[serde(rename = "theo-d")]
    TheoDeterministic,
    /// Elementwise probabilistic theoretical caps.
    #[serde(rename = "theo-p")]
    TheoProbabilistic,
    /// Order-statistic caps from the calibrated envelopes.
    #[serde(rename = "emp")]
    Empirical,
    /// No caps; a diagnostic ceiling for attack strength.
    #[serde(rename = "none")]
    Unconstrained,
}

impl AttackMode {
    pub const ALL: [AttackMode; 4] = [
        AttackMode::TheoDeterministic,
        AttackMode::TheoProbabilistic,
        AttackMode::Empirical,
        AttackMode::Unconstrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::TheoDeterministic => "theo-d",
            AttackMode::TheoProbabilistic => "theo-p",
            AttackMode::Empirical => "emp",
            AttackMode::Unconstrained => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeCaps {
    Theoretical(BoundTensor),
    Empirical(CapCurve),
    Free,
}

/// Feasible perturbation set for one request: per injected node, its caps
/// and the Adam step size.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSpec {
    pub mode: AttackMode,
    pub scale: f64,
    pub caps: BTreeMap<usize, NodeCaps>,
    pub steps: BTreeMap<usize, f64>,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

impl FeasibleSpec {
    /// Caps for `inject` on request `ctx`. Theoretical caps are the
    /// operator-local bounds of the honest FP32 run on `profile`; empirical
    /// caps interpolate the envelopes behind `envelope`. The step of node
    /// `v` is a quarter of the median of its scaled bound; unconstrained
    /// nodes step by `free_step` times the RMS of their honest output.
    pub fn build(
        ctx: &GradContext<'_>,
        inject: &[usize],
        mode: AttackMode,
        scale: f64,
        envelope: Option<&ThresholdSet>,
        profile: &DeviceProfile,
        free_step: f64,
    ) -> Result<Self, AttackError> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(AttackError::Caps(format!("scale must be finite and >= 0, got {scale}")));
        }
        let g = ctx.graph();
        if let Some(&v) = inject.iter().find(|&&v| v >= g.len()) {
            return Err(AttackError::BadNode(v));
        }
        let mut caps = BTreeMap::new();
        let mut steps = BTreeMap::new();
        match mode {
            AttackMode::TheoDeterministic | AttackMode::TheoProbabilistic => {
                let model = if mode == AttackMode::TheoDeterministic {
                    FpModel::deterministic()
                } else {
                    FpModel::probabilistic()
                };
                let (_, trace) = execute(g, ctx.inputs(), profile)?;
                for &v in inject {
                    let ops = operands(g, v, &trace, ctx.inputs());
                    let tau = node_bound(g, v, &ops, &trace.outputs[v], profile.fma, &model)?;
                    steps.insert(v, 0.25 * scale * tau.median());
                    caps.insert(v, NodeCaps::Theoretical(tau));
                }
            }
            AttackMode::Empirical => {
                let th = envelope
                    .ok_or_else(|| AttackError::Caps("empirical mode needs calibrated envelopes".into()))?
                    .rescaled(1.0)?;
                if th.ops.len() != g.len() {
                    return Err(AttackError::Caps(format!("{} thresholds for {} nodes", th.ops.len(), g.len())));
                }
                for &v in inject {
                    let c = CapCurve::from_threshold(&th.grid, &th.ops[v])?;
                    steps.insert(v, 0.25 * scale * c.eval(0.5));
                    caps.insert(v, NodeCaps::Empirical(c));
                }
            }
            AttackMode::Unconstrained => {
                let vals = ctx.forward(&[])?;
                for &v in inject {
                    steps.insert(v, free_step * rms(&vals[v]));
                    caps.insert(v, NodeCaps::Free);
                }
            }
        }
        Ok(Self { mode, scale, caps, steps })
    }

    pub fn project(&self, v: usize, delta: &[f64]) -> Result<Vec<f64>, AttackError> {
        match &self.caps[&v] {
            NodeCaps::Theoretical(tau) => project_theoretical(delta, tau, self.scale),
            NodeCaps::Empirical(c) => project_empirical(delta, c, self.scale),
            NodeCaps::Free => Ok(delta.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub budget: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Consecutive updates the stopping test must hold for.
    pub patience: usize,
    /// Tolerance of the stopping test relative to `|m_0|`.
    pub stop_tol: f64,
    /// Unconstrained step as a fraction of the honest output RMS.
    pub free_step: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            budget: 500,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 10,
            stop_tol: 1e-3,
            free_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub iterations: usize,
    pub source: usize,
    pub target: usize,
    pub bucket: usize,
    /// Initial margin `z_c1 - z_c2`.
    pub m0: f64,
    /// Margin at termination.
    pub margin: f64,
    pub delta_m: f64,
    pub delta: f64,
}

/// Stop when the last `patience` updates all moved the margin by less than
/// `tol * |m_0|` and ended within `tol * |m_0|` of zero.
fn stalled(history: &[f64], m0: f64, cfg: &PgdConfig) -> bool {
    let p = cfg.patience;
    if history.len() <= p {
        return false;
    }
    let tol = cfg.stop_tol * m0.abs();
    let n = history.len();
    (n - p..n).all(|t| (history[t] - history[t - 1]).abs() < tol && history[t].abs() < tol)
}

/// Margin-loss PGD with Adam over additive perturbations at the injected
/// nodes, projected onto `feasible` after every step.
pub fn pgd_attack(
    ctx: &GradContext<'_>,
    logits: usize,
    feasible: &FeasibleSpec,
    target: Target,
    cfg: &PgdConfig,
) -> Result<AttackResult, AttackError> {
    if cfg.budget == 0 {
        return Err(AttackError::Budget);
    }
    let vals = ctx.forward(&[])?;
    let z0 = &vals[logits];
    let c1 = argmax(z0);
    let c2 = target.class;
    if c2 == c1 || c2 >= z0.len() {
        return Err(AttackError::Target { target: c2, predicted: c1 });
    }
    let m0 = z0[c1] - z0[c2];
    let mut seed = vec![0.0; z0.len()];
    seed[c2] = 1.0;
    seed[c1] = -1.0;
    let nodes: Vec<usize> = feasible.caps.keys().copied().collect();
    let mut delta: BTreeMap<usize, Vec<f64>> = nodes.iter().map(|&v| (v, vec![0.0; vals[v].len()])).collect();
    let mut m1 = delta.clone();
    let mut m2 = delta.clone();
    let mut history = vec![m0];
    let mut vals = vals;
    let mut iterations = 0;
    let mut margin = m0;
    while margin >= 0.0 && iterations < cfg.budget && !stalled(&history, m0, cfg) {
        let grads = ctx.backward(&vals, logits, &seed)?;
        iterations += 1;
        let t = iterations as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for &v in &nodes {
            let Some(gv) = grads[v].as_ref() else { continue };
            let eta = feasible.steps[&v];
            let (d, a, b) = (delta.get_mut(&v).unwrap(), m1.get_mut(&v).unwrap(), m2.get_mut(&v).unwrap());
            for k in 0..d.len() {
                a[k] = cfg.beta1 * a[k] + (1.0 - cfg.beta1) * gv[k];
                b[k] = cfg.beta2 * b[k] + (1.0 - cfg.beta2) * gv[k] * gv[k];
                d[k] += eta * (a[k] / bc1) / ((b[k] / bc2).sqrt() + cfg.adam_eps);
            }
            *d = feasible.project(v, d)?;
        }
        let inj: Vec<Injection> = delta
            .iter()
            .map(|(&node, d)| Injection { node, delta: d.clone() })
            .collect();
        vals = ctx.forward(&inj)?;
        margin = vals[logits][c1] - vals[logits][c2];
        history.push(margin);
    }
    let delta_m = m0 - margin;
    Ok(AttackResult {
        success: margin < 0.0,
        iterations,
        source: c1,
        target: c2,
        bucket: target.bucket,
        m0,
        margin,
        delta_m,
        delta: if m0 > 0.0 { delta_m / m0 } else { 0.0 },
    })
}
