//! Optimistic execution and the N-way dispute game, simulated over an
//! append-only ledger. The dispute state is a pure fold over ledger entries.

mod actors;
mod cost;
mod ledger;
mod sim;
mod state;

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::bounds::{BoundError, BoundMode, FpModel};
use crate::calibration::{CalibError, OpThreshold, PercentileGrid, PercentileProfile, ThresholdSet};
use crate::commit::{CommitError, Meta};
use crate::exec::{DeviceProfile, ExecError};
use crate::graph::{Graph, GraphError};
use crate::tensor::{Tensor, TensorFile};

pub use actors::{member_vote, Challenger, ChallengerBehavior, Proposer, ProposerBehavior};
pub use cost::{dcr, merkle_checks, Dcr};
pub use ledger::{Entry, Ledger, Message};
pub use sim::{replay, run_dispute, Dispute, DisputeRun, Scenario};
pub use state::{
    committee_profiles, settle, ChildReveal, Contract, DisputeState, LeafPath, Party, Payouts, Phase, Selection,
    SliceIo, Stakes, Verdict, VerdictPath, VoteRecord,
};

pub const KERNEL_VERSION: &str = "tolver-kernels-1";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("`{msg}` not allowed in phase {phase:?}")]
    WrongPhase { msg: &'static str, phase: Phase },
    #[error("{sender} may not post `{msg}`")]
    WrongParty { sender: Party, msg: &'static str },
    #[error("deadline was tick {deadline}, now {tick}")]
    Late { deadline: u64, tick: u64 },
    #[error("percentile grid mismatch: {0} observed points vs {1} thresholds")]
    GridMismatch(usize, usize),
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("ledger corrupt at entry {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
    #[error("dispute is not settled")]
    Unsettled,
    #[error("replay diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A ratio that may be infinite; serialized as a number or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Ratio(pub f64);

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            Err(serde::ser::Error::custom("ratio must be finite or +inf"))
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ratio(v)),
            Raw::Str(s) if s == "inf" => Ok(Ratio(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad ratio `{s}`"))),
        }
    }
}

/// Tensor carried in ledger payloads as base64 of its binary file encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob(pub Tensor);

impl Serialize for Blob {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(TensorFile::from(&self.0).encode()))
    }
}

impl<'de> Deserialize<'de> for Blob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(s)
            .map_err(serde::de::Error::custom)?;
        let t = TensorFile::decode(&bytes)
            .and_then(TensorFile::into_tensor)
            .map_err(serde::de::Error::custom)?;
        Ok(Blob(t))
    }
}

/// Every knob that affects a verification outcome. Carried in the
/// commitment meta, so the contract never relies on hidden configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub n: usize,
    pub window: u64,
    pub round_timeout: u64,
    pub committee_size: usize,
    pub bond: u64,
    pub model: FpModel,
    pub pool: Vec<String>,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            n: 4,
            window: 10,
            round_timeout: 10,
            committee_size: 5,
            bond: 100,
            model: FpModel::default(),
            pool: DeviceProfile::pool().into_iter().map(|p| p.id).collect(),
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.n < 2 {
            return bad(format!("split size must be at least 2, got {}", self.n));
        }
        if self.window == 0 || self.round_timeout == 0 {
            return bad("window and round timeout must be positive".into());
        }
        if self.committee_size == 0 || self.committee_size % 2 == 0 {
            return bad(format!("committee size must be odd, got {}", self.committee_size));
        }
        if self.committee_size > self.pool.len() {
            return bad(format!(
                "committee of {} cannot be drawn from a pool of {}",
                self.committee_size,
                self.pool.len()
            ));
        }
        if let Some(p) = self.pool.iter().find(|p| DeviceProfile::by_id(p).is_none()) {
            return bad(format!("unknown device profile `{p}`"));
        }
        self.model.validate().map_err(|e| ProtocolError::Config(e.to_string()))
    }

    pub fn profiles(&self) -> Vec<DeviceProfile> {
        self.pool.iter().filter_map(|p| DeviceProfile::by_id(p)).collect()
    }

    pub fn write_meta(&self, meta: &mut Meta) {
        meta.set("window", self.window);
        meta.set("n", self.n);
        meta.set("round_timeout", self.round_timeout);
        meta.set("committee_size", self.committee_size);
        meta.set("bond", self.bond);
        meta.set("fp_u", self.model.u);
        meta.set("fp_lambda", self.model.lambda);
        meta.set(
            "fp_mode",
            match self.model.mode {
                BoundMode::Deterministic => "deterministic",
                BoundMode::Probabilistic => "probabilistic",
            },
        );
        meta.set("pool", self.pool.join(","));
    }

    pub fn from_meta(meta: &Meta) -> Result<Self, ProtocolError> {
        fn get<T: std::str::FromStr>(m: &Meta, k: &str) -> Result<T, ProtocolError> {
            m.get(k)
                .ok_or_else(|| ProtocolError::Config(format!("meta lacks `{k}`")))?
                .parse()
                .map_err(|_| ProtocolError::Config(format!("meta `{k}` is malformed")))
        }
        let mode = match meta.get("fp_mode") {
            Some("deterministic") => BoundMode::Deterministic,
            Some("probabilistic") => BoundMode::Probabilistic,
            _ => return Err(ProtocolError::Config("meta `fp_mode` is malformed".into())),
        };
        let p = Self {
            n: get(meta, "n")?,
            window: get(meta, "window")?,
            round_timeout: get(meta, "round_timeout")?,
            committee_size: get(meta, "committee_size")?,
            bond: get(meta, "bond")?,
            model: FpModel {
                u: get(meta, "fp_u")?,
                lambda: get(meta, "fp_lambda")?,
                mode,
            },
            pool: meta
                .get("pool")
                .ok_or_else(|| ProtocolError::Config("meta lacks `pool`".into()))?
                .split(',')
                .map(str::to_string)
                .collect(),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Max over grid points and over {abs, rel} of observed / threshold. A zero
/// threshold gives 0 when nothing was observed, otherwise infinity.
pub fn p_max(observed: &PercentileProfile, tau: &OpThreshold) -> Result<f64, ProtocolError> {
    if observed.abs.len() != tau.tau_abs.len() {
        return Err(ProtocolError::GridMismatch(observed.abs.len(), tau.tau_abs.len()));
    }
    if observed.rel.len() != tau.tau_rel.len() {
        return Err(ProtocolError::GridMismatch(observed.rel.len(), tau.tau_rel.len()));
    }
    let ratio = |o: f64, t: f64| {
        if t > 0.0 {
            o / t
        } else if o == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    Ok(observed
        .abs
        .iter()
        .zip(&tau.tau_abs)
        .chain(observed.rel.iter().zip(&tau.tau_rel))
        .map(|(&o, &t)| ratio(o, t))
        .fold(0.0, f64::max))
}

/// `p_max` of a proposer tensor against a reference for node `i`.
pub fn op_ratio(thresholds: &ThresholdSet, i: usize, reference: &[f64], proposed: &[f64]) -> Result<f64, ProtocolError> {
    let tau = thresholds
        .ops
        .get(i)
        .ok_or_else(|| ProtocolError::Rejected(format!("no threshold for node {i}")))?;
    if reference.len() != proposed.len() || reference.is_empty() {
        return Err(ProtocolError::Rejected(format!("node {i}: tensor sizes differ or are empty")));
    }
    let grid = PercentileGrid(thresholds.grid.clone());
    p_max(&PercentileProfile::between(reference, proposed, &grid, thresholds.epsilon), tau)
}

/// Worst `p_max` over the graph outputs of the proposer's result against a
/// local run.
pub fn screen_ratio(
    g: &Graph,
    thresholds: &ThresholdSet,
    local_outputs: &[Tensor],
    proposed: &[Tensor],
) -> Result<f64, ProtocolError> {
    if local_outputs.len() != g.outputs().len() || proposed.len() != g.outputs().len() {
        return Err(ProtocolError::Rejected("output count mismatch".into()));
    }
    let mut worst: f64 = 0.0;
    for ((&o, l), p) in g.outputs().iter().zip(local_outputs).zip(proposed) {
        worst = worst.max(op_ratio(thresholds, o, &l.to_f64(), &p.to_f64())?);
    }
    Ok(worst)
}

/// True iff the proposer's outputs are dispute-worthy (`p_max > 1` at some
/// output).
pub fn screen(
    g: &Graph,
    thresholds: &ThresholdSet,
    local_outputs: &[Tensor],
    proposed: &[Tensor],
) -> Result<bool, ProtocolError> {
    Ok(screen_ratio(g, thresholds, local_outputs, proposed)? > 1.0)
}
