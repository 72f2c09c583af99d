use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tolver_core::bounds::{BoundMode, FpModel, U_FP32};
use tolver_core::calibration::DEFAULT_EPSILON;
use tolver_core::exec::DeviceProfile;
use tolver_core::protocol::{ChallengerBehavior, ProposerBehavior, ProtocolParams};

use crate::ConfigError;

/// Everything a run needs. Knobs that change a verification outcome end up
/// in the commitment meta (`protocol`) or the threshold file
/// (`calibration.alpha`, `calibration.epsilon`, the grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub protocol: ProtocolKnobs,
    pub calibration: CalibrationKnobs,
    pub attack: AttackKnobs,
    pub parties: Parties,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Built-in model name; ignored when `graph` is set. Commands pick their
    /// own default when neither is given.
    pub model: Option<String>,
    pub graph: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub thresholds: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    /// Request input as a tensor file; sampled from `seeds.input` otherwise.
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolKnobs {
    pub n: usize,
    pub window: u64,
    pub round_timeout: u64,
    pub committee_size: usize,
    pub bond: u64,
    pub fp_u: f64,
    pub fp_lambda: f64,
    /// `deterministic` or `probabilistic`.
    pub fp_mode: String,
    pub pool: Vec<String>,
}

impl Default for ProtocolKnobs {
    fn default() -> Self {
        let p = ProtocolParams::default();
        Self {
            n: p.n,
            window: p.window,
            round_timeout: p.round_timeout,
            committee_size: p.committee_size,
            bond: p.bond,
            fp_u: U_FP32,
            fp_lambda: p.model.lambda,
            fp_mode: "probabilistic".into(),
            pool: p.pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationKnobs {
    pub alpha: f64,
    pub epsilon: f64,
    pub dataset_size: usize,
    pub profiles: Vec<String>,
    /// Rolling window of the stability diagnostics.
    pub window: usize,
    /// Percentile columns reported in the stability table.
    pub columns: Vec<f64>,
}

impl Default for CalibrationKnobs {
    fn default() -> Self {
        Self {
            alpha: 3.0,
            epsilon: DEFAULT_EPSILON,
            dataset_size: 50,
            profiles: DeviceProfile::pool().into_iter().map(|p| p.id).collect(),
            window: 10,
            columns: vec![30.0, 50.0, 70.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackKnobs {
    /// `theo-d`, `theo-p`, `emp` or `none`.
    pub mode: String,
    pub alpha: f64,
    pub budget: usize,
    pub inputs: usize,
    pub buckets: usize,
    /// Profile of the attacker's own execution.
    pub profile: String,
}

impl Default for AttackKnobs {
    fn default() -> Self {
        Self {
            mode: "emp".into(),
            alpha: 3.0,
            budget: 500,
            inputs: 10,
            buckets: 5,
            profile: "seq".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Parties {
    pub proposer_profile: String,
    pub challenger_profile: String,
    pub proposer: ProposerBehavior,
    pub challenger: ChallengerBehavior,
    /// `node=<index or name>,scale=<k>`: add `k` times the largest committed
    /// absolute threshold at that node or any graph output to every element
    /// of the node's output (at least 1e-6).
    pub inject: Option<String>,
}

impl Default for Parties {
    fn default() -> Self {
        let pool = DeviceProfile::pool();
        Self {
            proposer_profile: pool[1].id.clone(),
            challenger_profile: pool[0].id.clone(),
            proposer: ProposerBehavior::Honest,
            challenger: ChallengerBehavior::Honest,
            inject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub input: u64,
    pub attack: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 2024,
            data: 1,
            input: 2,
            attack: 3,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            protocol: ProtocolKnobs::default(),
            calibration: CalibrationKnobs::default(),
            attack: AttackKnobs::default(),
            parties: Parties::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    pub fn protocol_params(&self) -> Result<ProtocolParams> {
        let k = &self.protocol;
        let mode = match k.fp_mode.as_str() {
            "deterministic" => BoundMode::Deterministic,
            "probabilistic" => BoundMode::Probabilistic,
            other => bail!(ConfigError(format!("unknown fp_mode `{other}`"))),
        };
        let p = ProtocolParams {
            n: k.n,
            window: k.window,
            round_timeout: k.round_timeout,
            committee_size: k.committee_size,
            bond: k.bond,
            model: FpModel {
                u: k.fp_u,
                lambda: k.fp_lambda,
                mode,
            },
            pool: k.pool.clone(),
        };
        p.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(p)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.paths.ledger.clone().unwrap_or_else(|| self.out_dir().join("ledger.jsonl"))
    }
}

pub fn profile(id: &str) -> Result<DeviceProfile> {
    DeviceProfile::by_id(id).ok_or_else(|| {
        let known: Vec<String> = DeviceProfile::pool().into_iter().map(|p| p.id).collect();
        ConfigError(format!("unknown device profile `{id}` (known: {})", known.join(", "))).into()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_protocol_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.protocol_params().unwrap(), ProtocolParams::default());
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"protocol": {"n": 8}, "seeds": {"input": 9}}"#).unwrap();
        assert_eq!(c.protocol.n, 8);
        assert_eq!(c.protocol.window, 10);
        assert_eq!(c.seeds.input, 9);
        assert!(serde_json::from_str::<RunConfig>(r#"{"protocol": {"split": 8}}"#).is_err());
    }

    #[test]
    fn bad_knobs_are_config_errors() {
        let mut c = RunConfig::default();
        c.protocol.committee_size = 4;
        assert!(c.protocol_params().unwrap_err().downcast_ref::<ConfigError>().is_some());
        c.protocol.committee_size = 5;
        c.protocol.fp_mode = "exact".into();
        assert!(c.protocol_params().is_err());
    }
}
