//! Cross-profile percentile calibration and threshold construction.

mod stability;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, DeviceProfile, ExecError, Feeds};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub use stability::{
    running_medians, stability_report, summarize, symmetric_rel_change, MetricSummary, OpStability,
    StabilityReport, StabilitySummary,
};

pub const THRESHOLD_FILE_VERSION: u32 = 1;
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("percentile of an empty set")]
    Empty,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("need at least 2 device profiles, got {0}")]
    TooFewProfiles(usize),
    #[error("need at least one calibration input")]
    NoInputs,
    #[error("alpha must be positive, got {0}")]
    Alpha(f64),
    #[error("grid must be strictly increasing and span 0..=100")]
    Grid,
    #[error("grid mismatch")]
    GridMismatch,
    #[error("window W={w} must satisfy 1 <= W < n={n}")]
    Window { w: usize, n: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Percentile grid {0, 1, 5, 10, 15, ..., 90, 95, 99, 100}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileGrid(pub Vec<f64>);

impl Default for PercentileGrid {
    fn default() -> Self {
        let mut g = vec![0.0, 1.0];
        g.extend((1..=19).map(|k| 5.0 * k as f64));
        g.extend([99.0, 100.0]);
        Self(g)
    }
}

impl PercentileGrid {
    pub fn validate(&self) -> Result<(), CalibError> {
        let g = &self.0;
        if g.first() != Some(&0.0)
            || g.last() != Some(&100.0)
            || g.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CalibError::Grid);
        }
        Ok(())
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `abs = |a - b|`, `rel = |a - b| / (|a| + eps)`, flattened, in FP64.
pub fn elementwise_errors(a: &Tensor, b: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>), CalibError> {
    if a.shape() != b.shape() {
        return Err(CalibError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(errors_f64(&a.to_f64(), &b.to_f64(), eps))
}

pub fn errors_f64(a: &[f64], b: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            (d, d / (x.abs() + eps))
        })
        .unzip()
}

fn interp_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear interpolation between closest order statistics at rank
/// `(n - 1) p / 100`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, CalibError> {
    if values.is_empty() {
        return Err(CalibError::Empty);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(CalibError::BadPercentile(p));
    }
    Ok(interp_sorted(&sorted_copy(values), p))
}

/// All grid percentiles with a single sort.
pub fn percentiles(values: &[f64], grid: &PercentileGrid) -> Result<Vec<f64>, CalibError> {
    if values.is_empty() {
        return Err(CalibError::Empty);
    }
    let s = sorted_copy(values);
    Ok(grid.points().iter().map(|&p| interp_sorted(&s, p)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileProfile {
    pub abs: Vec<f64>,
    pub rel: Vec<f64>,
}

impl PercentileProfile {
    pub fn zeros(n: usize) -> Self {
        Self {
            abs: vec![0.0; n],
            rel: vec![0.0; n],
        }
    }

    /// Profile of the deviation of `observed` from `reference`; the relative
    /// error uses `reference` in the denominator.
    pub fn between(reference: &[f64], observed: &[f64], grid: &PercentileGrid, eps: f64) -> Self {
        let (abs, rel) = errors_f64(reference, observed, eps);
        Self {
            abs: percentiles(&abs, grid).expect("non-empty tensor"),
            rel: percentiles(&rel, grid).expect("non-empty tensor"),
        }
    }

    pub fn max_assign(&mut self, other: &PercentileProfile) {
        for (a, b) in self.abs.iter_mut().zip(&other.abs) {
            *a = a.max(*b);
        }
        for (a, b) in self.rel.iter_mut().zip(&other.rel) {
            *a = a.max(*b);
        }
    }

    pub fn dominates(&self, other: &PercentileProfile) -> bool {
        self.abs.iter().zip(&other.abs).all(|(a, b)| a >= b)
            && self.rel.iter().zip(&other.rel).all(|(a, b)| a >= b)
    }
}

/// Calibration output: per-node envelopes and, per input, the envelope over
/// device pairs (the samples behind stability diagnostics).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub grid: PercentileGrid,
    pub epsilon: f64,
    pub envelopes: Vec<PercentileProfile>,
    /// `per_input[s][i]`: envelope of node `i` over device pairs for input `s`.
    pub per_input: Vec<Vec<PercentileProfile>>,
}

/// Executes each input under every profile and takes the pointwise max of
/// the per-node error profiles over ordered device pairs and inputs.
pub fn calibrate(
    g: &Graph,
    dataset: &[Feeds],
    profiles: &[DeviceProfile],
    grid: &PercentileGrid,
    epsilon: f64,
) -> Result<Calibration, CalibError> {
    if profiles.len() < 2 {
        return Err(CalibError::TooFewProfiles(profiles.len()));
    }
    if dataset.is_empty() {
        return Err(CalibError::NoInputs);
    }
    grid.validate()?;
    let per_input: Vec<Vec<PercentileProfile>> = dataset
        .par_iter()
        .map(|x| {
            let traces: Vec<Vec<Vec<f64>>> = profiles
                .iter()
                .map(|p| {
                    let (_, t) = exec::execute(g, x, p)?;
                    Ok(t.outputs.iter().map(Tensor::to_f64).collect())
                })
                .collect::<Result<_, CalibError>>()?;
            Ok((0..g.len())
                .map(|i| {
                    let mut env = PercentileProfile::zeros(grid.len());
                    for (j, tj) in traces.iter().enumerate() {
                        for (k, tk) in traces.iter().enumerate() {
                            if j != k {
                                env.max_assign(&PercentileProfile::between(&tj[i], &tk[i], grid, epsilon));
                            }
                        }
                    }
                    env
                })
                .collect())
        })
        .collect::<Result<_, CalibError>>()?;
    let mut envelopes = vec![PercentileProfile::zeros(grid.len()); g.len()];
    for sample in &per_input {
        for (e, s) in envelopes.iter_mut().zip(sample) {
            e.max_assign(s);
        }
    }
    Ok(Calibration {
        grid: grid.clone(),
        epsilon,
        envelopes,
        per_input,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpThreshold {
    pub name: String,
    pub tau_abs: Vec<f64>,
    pub tau_rel: Vec<f64>,
}

/// Committed thresholds: `alpha` times the calibrated envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub version: u32,
    pub alpha: f64,
    pub epsilon: f64,
    pub grid: Vec<f64>,
    pub ops: Vec<OpThreshold>,
}

pub fn build_thresholds(
    names: &[String],
    envelopes: &[PercentileProfile],
    grid: &PercentileGrid,
    epsilon: f64,
    alpha: f64,
) -> Result<ThresholdSet, CalibError> {
    if !(alpha > 0.0) {
        return Err(CalibError::Alpha(alpha));
    }
    Ok(ThresholdSet {
        version: THRESHOLD_FILE_VERSION,
        alpha,
        epsilon,
        grid: grid.0.clone(),
        ops: names
            .iter()
            .zip(envelopes)
            .map(|(n, e)| OpThreshold {
                name: n.clone(),
                tau_abs: e.abs.iter().map(|v| alpha * v).collect(),
                tau_rel: e.rel.iter().map(|v| alpha * v).collect(),
            })
            .collect(),
    })
}

impl Calibration {
    pub fn thresholds(&self, g: &Graph, alpha: f64) -> Result<ThresholdSet, CalibError> {
        let names: Vec<String> = g.nodes().iter().map(|n| n.name.clone()).collect();
        build_thresholds(&names, &self.envelopes, &self.grid, self.epsilon, alpha)
    }

    /// Per-operator samples for stability diagnostics: for node `i`, one
    /// row per input of abs-envelope values over the grid.
    pub fn stability_samples(&self, i: usize) -> Vec<Vec<f64>> {
        self.per_input.iter().map(|s| s[i].abs.clone()).collect()
    }
}

impl ThresholdSet {
    pub fn grid(&self) -> PercentileGrid {
        PercentileGrid(self.grid.clone())
    }

    /// Same envelopes under a different safety factor.
    pub fn rescaled(&self, alpha: f64) -> Result<ThresholdSet, CalibError> {
        if !(alpha > 0.0) {
            return Err(CalibError::Alpha(alpha));
        }
        let f = alpha / self.alpha;
        Ok(ThresholdSet {
            alpha,
            ops: self
                .ops
                .iter()
                .map(|o| OpThreshold {
                    name: o.name.clone(),
                    tau_abs: o.tau_abs.iter().map(|v| v * f).collect(),
                    tau_rel: o.tau_rel.iter().map(|v| v * f).collect(),
                })
                .collect(),
            ..self.clone()
        })
    }

    /// Canonical byte stream of the threshold file.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("serializable")
    }

    pub fn from_bytes(b: &[u8]) -> Result<ThresholdSet, serde_json::Error> {
        serde_json::from_slice(b)
    }

    /// Header chunk (everything but the per-op entries) followed by one chunk
    /// per operator entry; the leaves of the threshold Merkle tree.
    pub fn chunks(&self) -> Vec<Vec<u8>> {
        let header = serde_json::json!({
            "version": self.version,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "grid": self.grid,
        });
        let mut out = vec![serde_json::to_vec(&header).expect("serializable")];
        out.extend(self.ops.iter().map(|o| serde_json::to_vec(o).expect("serializable")));
        out
    }

    pub fn max_tau_abs(&self) -> f64 {
        self.ops
            .iter()
            .flat_map(|o| o.tau_abs.last().copied())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shape() {
        let g = PercentileGrid::default();
        assert_eq!(g.len(), 23);
        g.validate().unwrap();
        assert_eq!(&g.0[..4], &[0.0, 1.0, 5.0, 10.0]);
        assert_eq!(&g.0[19..], &[90.0, 95.0, 99.0, 100.0]);
    }

    #[test]
    fn error_examples() {
        let a = Tensor::new(vec![1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(elementwise_errors(&a, &b, 0.0).unwrap(), (vec![1.0], vec![0.5]));
        assert_eq!(elementwise_errors(&a, &a, 0.0).unwrap(), (vec![0.0], vec![0.0]));
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let t = Tensor::new(vec![1], vec![1e-12]).unwrap();
        let (_, rel) = elementwise_errors(&z, &t, 1e-12).unwrap();
        assert!((rel[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[5.0], 37.0).unwrap(), 5.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0).unwrap(), 2.5);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 100.0).unwrap(), 4.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn thresholds_scale() {
        let env = PercentileProfile {
            abs: vec![1e-6; 23],
            rel: vec![2e-6; 23],
        };
        let grid = PercentileGrid::default();
        let t1 = build_thresholds(&["a".into()], &[env.clone()], &grid, 1e-12, 1.0).unwrap();
        assert_eq!(t1.ops[0].tau_abs, env.abs);
        let t3 = build_thresholds(&["a".into()], &[env.clone()], &grid, 1e-12, 3.0).unwrap();
        assert!((t3.ops[0].tau_abs[0] - 3e-6).abs() < 1e-20);
        let t2 = t1.rescaled(2.0).unwrap();
        assert_eq!(t2.ops[0].tau_rel[5], 2.0 * t1.ops[0].tau_rel[5]);
        assert!(build_thresholds(&["a".into()], &[env], &grid, 1e-12, 0.0).is_err());
    }

    #[test]
    fn threshold_bytes_roundtrip() {
        let env = PercentileProfile {
            abs: (0..23).map(|k| k as f64 * 1.234_567_89e-7).collect(),
            rel: (0..23).map(|k| k as f64 * 3.3e-5).collect(),
        };
        let t = build_thresholds(&["a".into()], &[env], &PercentileGrid::default(), 1e-12, 3.0).unwrap();
        let b = t.to_bytes();
        assert_eq!(ThresholdSet::from_bytes(&b).unwrap().to_bytes(), b);
    }
}
