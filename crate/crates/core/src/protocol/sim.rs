use super::actors::{member_vote, Challenger, ChallengerBehavior, Proposer, ProposerBehavior};
use super::ledger::{Ledger, Message};
use super::state::{Contract, DisputeState, Party, Phase};
use super::{ProtocolError, ProtocolParams};
use crate::exec::{DeviceProfile, Feeds, Injection};

/// A ledger bound to a contract. Every append is validated by folding it
/// into the state; a decided verdict is settled by the contract right away.
pub struct Dispute<'c> {
    contract: &'c Contract,
    ledger: Ledger,
    state: DisputeState,
}

impl<'c> Dispute<'c> {
    pub fn new(contract: &'c Contract) -> Self {
        Self {
            contract,
            ledger: Ledger::new(),
            state: DisputeState::default(),
        }
    }

    /// Continues from an existing transcript, which must replay cleanly.
    pub fn resume(contract: &'c Contract, ledger: Ledger) -> Result<Self, ProtocolError> {
        let state = replay(contract, &ledger)?;
        Ok(Self {
            contract,
            ledger,
            state,
        })
    }

    pub fn state(&self) -> &DisputeState {
        &self.state
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn advance(&mut self, ticks: u64) {
        self.ledger.advance(ticks);
    }

    pub fn advance_to(&mut self, tick: u64) {
        self.ledger.advance_to(tick);
    }

    /// Appends `message` if the contract accepts it; returns its sequence
    /// number.
    pub fn post(&mut self, sender: Party, message: Message) -> Result<u64, ProtocolError> {
        let e = self.ledger.prepare(sender, message);
        let seq = e.seq;
        let mut next = self.state.clone();
        self.contract.apply(&mut next, &e)?;
        self.ledger.push(e);
        self.state = next;
        if let Some(verdict) = self.state.pending.clone() {
            let e = self.ledger.prepare(Party::Contract, Message::Settle { verdict });
            self.contract.apply(&mut self.state, &e)?;
            self.ledger.push(e);
        }
        Ok(seq)
    }

    pub fn into_parts(self) -> (Ledger, DisputeState) {
        (self.ledger, self.state)
    }
}

/// Rebuilds the dispute state from a ledger alone.
pub fn replay(contract: &Contract, ledger: &Ledger) -> Result<DisputeState, ProtocolError> {
    let mut st = DisputeState::default();
    for e in ledger.entries() {
        contract.apply(&mut st, e).map_err(|err| ProtocolError::Diverged(format!("entry {}: {err}", e.seq)))?;
    }
    Ok(st)
}

/// One request and the behaviour of both parties.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub inputs: Feeds,
    pub params: ProtocolParams,
    pub proposer_profile: DeviceProfile,
    pub challenger_profile: DeviceProfile,
    pub injections: Vec<Injection>,
    pub proposer: ProposerBehavior,
    pub challenger: ChallengerBehavior,
}

impl Scenario {
    /// Honest parties on two different profiles.
    pub fn new(inputs: Feeds, params: ProtocolParams) -> Self {
        let pool = DeviceProfile::pool();
        Self {
            inputs,
            params,
            proposer_profile: pool[1].clone(),
            challenger_profile: pool[0].clone(),
            injections: vec![],
            proposer: ProposerBehavior::Honest,
            challenger: ChallengerBehavior::Honest,
        }
    }

    pub fn with_injections(mut self, injections: Vec<Injection>) -> Self {
        self.injections = injections;
        self
    }
}

#[derive(Debug, Clone)]
pub struct DisputeRun {
    pub ledger: Ledger,
    pub state: DisputeState,
    /// Re-execution FLOPs the challenger actually spent.
    pub challenger_flops: u64,
}

/// Drives all actors on a deterministic single-threaded schedule, one tick
/// per move, until the dispute settles.
pub fn run_dispute(contract: &Contract, sc: &Scenario) -> Result<DisputeRun, ProtocolError> {
    sc.params.validate()?;
    let proposer = Proposer::new(
        contract,
        sc.inputs.clone(),
        sc.proposer_profile.clone(),
        &sc.injections,
        sc.proposer,
    )?;
    let mut challenger = Challenger::new(contract, &sc.inputs, sc.challenger_profile.clone(), sc.challenger)?;
    let mut d = Dispute::new(contract);
    d.post(Party::Proposer, proposer.submit(&sc.params)?)?;
    d.advance(1);
    match challenger.challenge(d.state())? {
        Some(m) => {
            d.post(Party::Challenger, m)?;
        }
        None => {
            d.advance_to(d.state().deadline);
            d.post(Party::Proposer, Message::Finalize)?;
        }
    }
    let limit = 4 * contract.graph().len() + 16;
    for _ in 0..limit {
        if d.state().is_settled() {
            break;
        }
        d.advance(1);
        let st = d.state();
        let claim = |d: &mut Dispute<'_>, by: Party| -> Result<(), ProtocolError> {
            d.advance_to(d.state().deadline);
            d.post(by, Message::ClaimTimeout)?;
            Ok(())
        };
        match st.phase {
            Phase::Challenged if sc.proposer == ProposerBehavior::Silent => claim(&mut d, Party::Challenger)?,
            Phase::Challenged => {
                let m = proposer.partition(st)?;
                d.post(Party::Proposer, m)?;
            }
            Phase::Partitioned | Phase::Leaf if st.on_clock() == Some(Party::Challenger) && sc.challenger == ChallengerBehavior::Silent => {
                claim(&mut d, Party::Proposer)?
            }
            Phase::Partitioned => {
                let m = challenger.select(st)?;
                d.post(Party::Challenger, m)?;
            }
            Phase::Leaf if st.route.is_none() => {
                let m = challenger.route(st)?;
                d.post(Party::Challenger, m)?;
            }
            Phase::Leaf => {
                for m in 0..d.state().committee.len() {
                    let v = member_vote(contract, d.state(), m)?;
                    d.post(Party::Member(m), v)?;
                }
            }
            p => return Err(ProtocolError::Rejected(format!("simulation stuck in phase {p:?}"))),
        }
    }
    if !d.state().is_settled() {
        return Err(ProtocolError::Rejected("dispute did not settle".into()));
    }
    let (ledger, state) = d.into_parts();
    Ok(DisputeRun {
        ledger,
        state,
        challenger_flops: challenger.flops(),
    })
}
