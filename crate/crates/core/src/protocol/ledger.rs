use std::path::Path;

use serde::{Deserialize, Serialize};

use super::state::{ChildReveal, LeafPath, Party, Verdict};
use super::{Blob, ProtocolError, Ratio};
use crate::commit::canon::sha256;
use crate::commit::{Commitment, Hash32};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Message {
    /// Commitment plus the revealed request inputs (declared order) and
    /// outputs (graph output order).
    Submit {
        commitment: Commitment,
        inputs: Vec<(String, Blob)>,
        outputs: Vec<Blob>,
    },
    Finalize,
    Challenge {
        p_max: Ratio,
    },
    Partition {
        children: Vec<ChildReveal>,
    },
    Select {
        child: usize,
        p_max: Ratio,
    },
    Concede,
    ClaimTimeout,
    Route {
        path: LeafPath,
        /// Worst `|y_P - y_ref| / tau_theo` seen by the challenger.
        ratio: Ratio,
    },
    Vote {
        profile: String,
        within: bool,
        p_max: Ratio,
    },
    Settle {
        verdict: Verdict,
    },
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Submit { .. } => "submit",
            Message::Finalize => "finalize",
            Message::Challenge { .. } => "challenge",
            Message::Partition { .. } => "partition",
            Message::Select { .. } => "select",
            Message::Concede => "concede",
            Message::ClaimTimeout => "claim_timeout",
            Message::Route { .. } => "route",
            Message::Vote { .. } => "vote",
            Message::Settle { .. } => "settle",
        }
    }

    pub fn digest(&self) -> Hash32 {
        Hash32(sha256(&serde_json::to_vec(self).expect("serializable")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub seq: u64,
    pub tick: u64,
    pub sender: Party,
    #[serde(flatten)]
    pub message: Message,
    /// SHA-256 of the serialized message.
    pub digest: Hash32,
}

/// Append-only, totally ordered message log with a logical clock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ledger {
    entries: Vec<Entry>,
    tick: u64,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn advance(&mut self, ticks: u64) {
        self.tick += ticks;
    }

    pub fn advance_to(&mut self, tick: u64) {
        self.tick = self.tick.max(tick);
    }

    /// The entry that appending `message` now would produce.
    pub fn prepare(&self, sender: Party, message: Message) -> Entry {
        Entry {
            seq: self.entries.len() as u64,
            tick: self.tick,
            sender,
            digest: message.digest(),
            message,
        }
    }

    pub(crate) fn push(&mut self, e: Entry) {
        debug_assert_eq!(e.seq, self.entries.len() as u64);
        self.entries.push(e);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Parses a JSON-lines log, checking sequence numbers, tick order and
    /// payload digests.
    pub fn from_jsonl(text: &str) -> Result<Self, ProtocolError> {
        let mut l = Ledger::new();
        for (k, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let e: Entry = serde_json::from_str(line).map_err(|err| ProtocolError::Corrupt {
                seq: k as u64,
                reason: err.to_string(),
            })?;
            let corrupt = |reason: &str| ProtocolError::Corrupt {
                seq: k as u64,
                reason: reason.into(),
            };
            if e.seq != k as u64 {
                return Err(corrupt("sequence gap"));
            }
            if e.tick < l.tick {
                return Err(corrupt("tick went backwards"));
            }
            if e.digest != e.message.digest() {
                return Err(corrupt("payload digest mismatch"));
            }
            l.tick = e.tick;
            l.entries.push(e);
        }
        Ok(l)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProtocolError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| ProtocolError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        Self::from_jsonl(&std::fs::read_to_string(path).map_err(|e| ProtocolError::Io(e.to_string()))?)
    }
}
