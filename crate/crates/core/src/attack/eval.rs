use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grad::GradContext;
use super::pgd::{pgd_attack, AttackMode, AttackResult, FeasibleSpec, PgdConfig};
use super::{bucket_targets, AttackError, Target};
use crate::calibration::ThresholdSet;
use crate::exec::{execute, DeviceProfile, Feeds};
use crate::graph::Graph;
use crate::protocol::screen;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Attack sweep settings. `inject` defaults to every arithmetic node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cells: Vec<(AttackMode, f64)>,
    pub buckets: usize,
    pub pgd: PgdConfig,
    pub seed: u64,
    pub inject: Option<Vec<usize>>,
    /// Profile of the attacker's own execution (theoretical caps).
    pub profile: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cells: vec![(AttackMode::Empirical, 3.0)],
            buckets: 5,
            pgd: PgdConfig::default(),
            seed: 0,
            inject: None,
            profile: "seq".into(),
        }
    }
}

/// One table cell: a (mode, alpha) configuration restricted to a bucket,
/// or to all buckets when `bucket` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub mode: AttackMode,
    pub alpha: f64,
    pub bucket: Option<usize>,
    pub pairs: usize,
    pub successes: usize,
    /// Percent.
    pub asr: f64,
    /// Mean margin change over failed attacks.
    pub dm_fail: f64,
    /// Mean normalized margin change over failed attacks.
    pub delta_fail: f64,
    /// Percent of honest runs the screen disputes at this alpha.
    pub fp_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CellRow>,
    pub results: BTreeMap<String, Vec<AttackResult>>,
}

pub fn default_inject(g: &Graph) -> Vec<usize> {
    (0..g.len()).filter(|&i| !g.node(i).kind.is_data_movement()).collect()
}

/// (input index, target) pairs: one target per bucket for every input.
pub fn attack_pairs(
    g: &Graph,
    logits: usize,
    dataset: &[Feeds],
    buckets: usize,
    seed: u64,
) -> Result<Vec<(usize, Target)>, AttackError> {
    if dataset.is_empty() {
        return Err(AttackError::NoData);
    }
    let root = Rng::new(seed);
    let mut pairs = Vec::new();
    for (s, x) in dataset.iter().enumerate() {
        let vals = GradContext::new(g, x).forward(&[])?;
        let mut rng = root.fork(s as u64);
        for t in bucket_targets(&vals[logits], buckets, &mut rng)? {
            pairs.push((s, t));
        }
    }
    Ok(pairs)
}

/// Runs one (mode, scale) configuration over all pairs.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    g: &Graph,
    logits: usize,
    dataset: &[Feeds],
    pairs: &[(usize, Target)],
    mode: AttackMode,
    scale: f64,
    envelope: Option<&ThresholdSet>,
    cfg: &EvalConfig,
) -> Result<Vec<AttackResult>, AttackError> {
    let profile = DeviceProfile::by_id(&cfg.profile)
        .ok_or_else(|| AttackError::Caps(format!("unknown profile `{}`", cfg.profile)))?;
    let inject = cfg.inject.clone().unwrap_or_else(|| default_inject(g));
    let mut out = Vec::with_capacity(pairs.len());
    let mut cache: Option<(usize, GradContext<'_>, FeasibleSpec)> = None;
    for &(s, target) in pairs {
        if cache.as_ref().map(|c| c.0) != Some(s) {
            let ctx = GradContext::new(g, &dataset[s]);
            let spec = FeasibleSpec::build(&ctx, &inject, mode, scale, envelope, &profile, cfg.pgd.free_step)?;
            cache = Some((s, ctx, spec));
        }
        let (_, ctx, spec) = cache.as_ref().unwrap();
        out.push(pgd_attack(ctx, logits, spec, target, &cfg.pgd)?);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-bucket rows followed by the all-buckets row.
pub fn summarize_cell(mode: AttackMode, alpha: f64, results: &[AttackResult], buckets: usize, fp_rate: Option<f64>) -> Vec<CellRow> {
    let row = |bucket: Option<usize>| {
        let rs: Vec<&AttackResult> = results.iter().filter(|r| bucket.is_none_or(|b| r.bucket == b)).collect();
        let fails: Vec<&&AttackResult> = rs.iter().filter(|r| !r.success).collect();
        let successes = rs.len() - fails.len();
        CellRow {
            mode,
            alpha,
            bucket,
            pairs: rs.len(),
            successes,
            asr: if rs.is_empty() { 0.0 } else { 100.0 * successes as f64 / rs.len() as f64 },
            dm_fail: mean(&fails.iter().map(|r| r.delta_m).collect::<Vec<_>>()),
            delta_fail: mean(&fails.iter().map(|r| r.delta).collect::<Vec<_>>()),
            fp_rate,
        }
    };
    let mut rows: Vec<CellRow> = (0..buckets).map(|b| row(Some(b))).collect();
    rows.push(row(None));
    rows
}

/// Honest runs through the challenger's screen. Run `s` pairs proposer and
/// challenger profiles by cycling through the ordered pairs of `profiles`.
/// Returns (disputes raised, runs).
pub fn false_positive_rate(
    g: &Graph,
    thresholds: &ThresholdSet,
    heldout: &[Feeds],
    profiles: &[DeviceProfile],
) -> Result<(usize, usize), AttackError> {
    if heldout.is_empty() {
        return Err(AttackError::NoData);
    }
    let pairs: Vec<(usize, usize)> = (0..profiles.len())
        .flat_map(|a| (0..profiles.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    if pairs.is_empty() {
        return Err(AttackError::Caps("need at least two profiles".into()));
    }
    let mut fires = 0;
    for (s, x) in heldout.iter().enumerate() {
        let (p, c) = pairs[s % pairs.len()];
        let proposed: Vec<Tensor> = execute(g, x, &profiles[p])?.0;
        let local: Vec<Tensor> = execute(g, x, &profiles[c])?.0;
        if screen(g, thresholds, &local, &proposed)? {
            fires += 1;
        }
    }
    Ok((fires, heldout.len()))
}

/// Attack table in the (mode, alpha, bucket) layout plus the false-positive
/// rate of honest runs at each alpha. `envelope` holds the calibrated
/// envelopes; alpha scales both the attack caps and the screen thresholds.
pub fn evaluate(
    g: &Graph,
    logits: usize,
    dataset: &[Feeds],
    envelope: &ThresholdSet,
    honest: Option<(&[Feeds], &[DeviceProfile])>,
    cfg: &EvalConfig,
) -> Result<EvalReport, AttackError> {
    let pairs = attack_pairs(g, logits, dataset, cfg.buckets, cfg.seed)?;
    let mut fp: BTreeMap<u64, f64> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut results = BTreeMap::new();
    for &(mode, alpha) in &cfg.cells {
        let fp_rate = match honest {
            Some((heldout, profiles)) if alpha > 0.0 => {
                let key = alpha.to_bits();
                if !fp.contains_key(&key) {
                    let (f, n) = false_positive_rate(g, &envelope.rescaled(alpha)?, heldout, profiles)?;
                    fp.insert(key, 100.0 * f as f64 / n as f64);
                }
                Some(fp[&key])
            }
            _ => None,
        };
        let rs = run_cell(g, logits, dataset, &pairs, mode, alpha, Some(envelope), cfg)?;
        rows.extend(summarize_cell(mode, alpha, &rs, cfg.buckets, fp_rate));
        results.insert(format!("{mode}@{alpha}"), rs);
    }
    Ok(EvalReport { rows, results })
}
