//! Convergence diagnostics for per-operator percentile estimates.

use serde::{Deserialize, Serialize};

use super::{percentile, CalibError};

/// `2|a - b| / (|a| + |b| + eps)`, zero when both sides vanish.
pub fn symmetric_rel_change(a: f64, b: f64, eps: f64) -> f64 {
    let d = a.abs() + b.abs() + eps;
    if d == 0.0 {
        0.0
    } else {
        2.0 * (a - b).abs() / d
    }
}

fn median(v: &[f64]) -> f64 {
    percentile(v, 50.0).expect("non-empty")
}

/// Median of the first `k` samples, for `k = 1..=n`.
pub fn running_medians(y: &[f64]) -> Vec<f64> {
    (1..=y.len()).map(|k| median(&y[..k])).collect()
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    // shift by the first value so constant input gives exactly zero
    let d: Vec<f64> = v.iter().map(|x| x - v[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
}

/// SupNorm, Jackknife, TailAdj and RollSD of one sample sequence.
pub fn diagnostics(y: &[f64], w: usize, eps: f64) -> Result<[f64; 4], CalibError> {
    let y: Vec<f64> = y.iter().copied().filter(|v| v.is_finite()).collect();
    let n = y.len();
    if w == 0 || n <= w {
        return Err(CalibError::Window { w, n });
    }
    let run = running_medians(&y);
    let theta = run[n - 1];
    let scale = theta.abs() + eps;
    let norm = |x: f64| if scale == 0.0 { 0.0 } else { x.abs() / scale };
    // run[k - 1] is the running median after k samples
    let sup = (n - w..n)
        .map(|k| symmetric_rel_change(theta, run[k - 1], eps))
        .fold(0.0, f64::max);
    let mut rest = Vec::with_capacity(n - 1);
    let jk = (0..n)
        .map(|t| {
            rest.clear();
            rest.extend(y.iter().enumerate().filter(|&(s, _)| s != t).map(|(_, v)| *v));
            norm(median(&rest) - theta)
        })
        .fold(0.0, f64::max);
    let tail = (n - w..n)
        .map(|k| norm(run[k] - run[k - 1]))
        .fold(0.0, f64::max);
    let windows: Vec<f64> = (w..=n).map(|k| median(&y[k - w..k])).collect();
    let roll = norm(sample_sd(&windows));
    Ok([sup, jk, tail, roll])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpStability {
    pub sup_norm: Vec<f64>,
    pub jackknife: Vec<f64>,
    pub tail_adj: Vec<f64>,
    pub roll_sd: Vec<f64>,
    /// Worst SupNorm drift across percentile columns.
    pub delta_inf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub window: usize,
    pub n: usize,
    pub columns: Vec<f64>,
    pub ops: Vec<OpStability>,
}

/// `samples[i][t][c]`: operator `i`, sample `t`, percentile column `c`.
pub fn stability_report(
    samples: &[Vec<Vec<f64>>],
    columns: &[f64],
    w: usize,
    eps: f64,
) -> Result<StabilityReport, CalibError> {
    let mut n = 0;
    let ops = samples
        .iter()
        .map(|op| {
            n = op.len();
            let mut s = OpStability {
                sup_norm: vec![],
                jackknife: vec![],
                tail_adj: vec![],
                roll_sd: vec![],
                delta_inf: 0.0,
            };
            for c in 0..columns.len() {
                let seq: Vec<f64> = op.iter().map(|row| row[c]).collect();
                let [a, b, t, r] = diagnostics(&seq, w, eps)?;
                s.sup_norm.push(a);
                s.jackknife.push(b);
                s.tail_adj.push(t);
                s.roll_sd.push(r);
                s.delta_inf = s.delta_inf.max(a);
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, CalibError>>()?;
    Ok(StabilityReport {
        window: w,
        n,
        columns: columns.to_vec(),
        ops,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub p50: f64,
    pub p90: f64,
}

/// Cross-operator 50th/90th percentiles of each metric, per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub columns: Vec<f64>,
    pub sup_norm: Vec<MetricSummary>,
    pub jackknife: Vec<MetricSummary>,
    pub tail_adj: Vec<MetricSummary>,
    pub roll_sd: Vec<MetricSummary>,
    pub delta_inf: MetricSummary,
}

pub fn summarize(r: &StabilityReport) -> Result<StabilitySummary, CalibError> {
    let col = |f: &dyn Fn(&OpStability) -> &Vec<f64>| -> Result<Vec<MetricSummary>, CalibError> {
        (0..r.columns.len())
            .map(|c| {
                let v: Vec<f64> = r.ops.iter().map(|o| f(o)[c]).collect();
                Ok(MetricSummary {
                    p50: percentile(&v, 50.0)?,
                    p90: percentile(&v, 90.0)?,
                })
            })
            .collect()
    };
    let d: Vec<f64> = r.ops.iter().map(|o| o.delta_inf).collect();
    Ok(StabilitySummary {
        columns: r.columns.clone(),
        sup_norm: col(&|o| &o.sup_norm)?,
        jackknife: col(&|o| &o.jackknife)?,
        tail_adj: col(&|o| &o.tail_adj)?,
        roll_sd: col(&|o| &o.roll_sd)?,
        delta_inf: MetricSummary {
            p50: percentile(&d, 50.0)?,
            p90: percentile(&d, 90.0)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_change_examples() {
        assert_eq!(symmetric_rel_change(2.0, 2.0, 1e-12), 0.0);
        assert_eq!(symmetric_rel_change(1.0, 3.0, 0.0), 1.0);
        assert_eq!(symmetric_rel_change(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn constant_sequence_is_stable() {
        let y = vec![0.37; 50];
        assert_eq!(diagnostics(&y, 10, 1e-12).unwrap(), [0.0; 4]);
    }

    #[test]
    fn window_must_be_smaller_than_n() {
        assert!(diagnostics(&[1.0; 10], 10, 1e-12).is_err());
        assert!(diagnostics(&[1.0; 10], 0, 1e-12).is_err());
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let mut y = vec![1.0; 49];
        y.push(2.0);
        let [_, jk, _, _] = diagnostics(&y, 10, 1e-12).unwrap();
        let theta = {
            let mut s = y.clone();
            s.sort_by(f64::total_cmp);
            (s[24] + s[25]) / 2.0
        };
        let mut worst: f64 = 0.0;
        for t in 0..y.len() {
            let mut r: Vec<f64> = y.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, v)| *v).collect();
            r.sort_by(f64::total_cmp);
            let m = r[r.len() / 2];
            worst = worst.max((m - theta).abs() / (theta.abs() + 1e-12));
        }
        assert_eq!(jk, worst);
    }
}
