use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::bounds::BoundTensor;
use crate::calibration::OpThreshold;

/// Piecewise-linear cap on the quantile function of `|delta|`, over ranks
/// in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapCurve {
    knots: Vec<(f64, f64)>,
}

impl CapCurve {
    /// Knots must have strictly increasing ranks in `[0, 1]`, start at rank
    /// 0, end at rank 1, and carry nonnegative caps.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, AttackError> {
        let ok = knots.len() >= 2
            && knots[0].0 == 0.0
            && knots.last().unwrap().0 == 1.0
            && knots.windows(2).all(|w| w[1].0 > w[0].0)
            && knots.iter().all(|&(_, c)| c >= 0.0 && c.is_finite());
        if !ok {
            return Err(AttackError::Caps("cap curve knots must span ranks 0..=1 with finite caps >= 0".into()));
        }
        Ok(Self { knots })
    }

    pub fn constant(c: f64) -> Result<Self, AttackError> {
        Self::new(vec![(0.0, c), (1.0, c)])
    }

    /// Interpolates `(0, 0)` and `(p / 100, tau_abs(p))` for every grid
    /// point `p > 0`.
    pub fn from_threshold(grid: &[f64], op: &OpThreshold) -> Result<Self, AttackError> {
        if grid.len() != op.tau_abs.len() {
            return Err(AttackError::Caps("grid and threshold lengths differ".into()));
        }
        let mut knots = vec![(0.0, 0.0)];
        knots.extend(grid.iter().zip(&op.tau_abs).filter(|(p, _)| **p > 0.0).map(|(&p, &t)| (p / 100.0, t)));
        Self::new(knots)
    }

    pub fn eval(&self, r: f64) -> f64 {
        let r = r.clamp(0.0, 1.0);
        let k = self.knots.partition_point(|&(x, _)| x < r);
        if k == 0 {
            return self.knots[0].1;
        }
        let (x0, y0) = self.knots[k - 1];
        let (x1, y1) = self.knots[k];
        y0 + (y1 - y0) * (r - x0) / (x1 - x0)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Scaled caps at the ranks `(k - 1/2) / n`, repaired to be
    /// nondecreasing.
    pub fn rank_caps(&self, n: usize, scale: f64) -> Vec<f64> {
        let mut caps: Vec<f64> = (1..=n).map(|k| scale * self.eval((k as f64 - 0.5) / n as f64)).collect();
        for k in 1..n {
            caps[k] = caps[k].max(caps[k - 1]);
        }
        caps
    }
}

/// Elementwise clip to `[-scale * tau, scale * tau]`.
pub fn project_theoretical(delta: &[f64], tau: &BoundTensor, scale: f64) -> Result<Vec<f64>, AttackError> {
    if delta.len() != tau.eps.len() {
        return Err(AttackError::Shape(format!("delta has {} values, bound has {}", delta.len(), tau.eps.len())));
    }
    Ok(delta
        .iter()
        .zip(&tau.eps)
        .map(|(&d, &t)| {
            let c = scale * t;
            d.clamp(-c, c)
        })
        .collect())
}

fn sorted_order(a: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
    idx
}

/// Order-statistic projection: the k-th smallest magnitude is clipped to
/// the scaled cap at rank `(k - 1/2) / n`; signs and positions are kept.
pub fn project_empirical(delta: &[f64], curve: &CapCurve, scale: f64) -> Result<Vec<f64>, AttackError> {
    if delta.is_empty() {
        return Err(AttackError::Empty);
    }
    let a: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    let caps = curve.rank_caps(a.len(), scale);
    let mut out = delta.to_vec();
    for (k, &i) in sorted_order(&a).iter().enumerate() {
        out[i] = delta[i].signum() * a[i].min(caps[k]);
    }
    Ok(out)
}

pub fn theoretical_feasible(delta: &[f64], tau: &BoundTensor, scale: f64) -> bool {
    delta.len() == tau.eps.len() && delta.iter().zip(&tau.eps).all(|(d, t)| d.abs() <= scale * t)
}

/// Quantile check: the k-th smallest `|delta|` is within the scaled cap at
/// rank `(k - 1/2) / n`.
pub fn empirical_feasible(delta: &[f64], curve: &CapCurve, scale: f64) -> bool {
    let mut a: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    a.sort_by(f64::total_cmp);
    let caps = curve.rank_caps(a.len(), scale);
    a.iter().zip(&caps).all(|(v, c)| v <= c)
}
