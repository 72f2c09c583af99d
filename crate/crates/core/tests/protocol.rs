mod common;

use tolver_core::bounds::node_bound;
use tolver_core::calibration::ThresholdSet;
use tolver_core::exec::{eval_op, execute_injected, DeviceProfile, Feeds, Injection};
use tolver_core::graph::OpKind;
use tolver_core::protocol::{
    dcr, replay, run_dispute, ChallengerBehavior, Contract, Dispute, DisputeRun, Ledger, LeafPath, Message, Party,
    Phase, Proposer, ProposerBehavior, ProtocolError, ProtocolParams, Ratio, Scenario, VerdictPath, screen_ratio,
};
use tolver_core::rng::Rng;
use tolver_core::zoo::{build_model, GraphBuilder, ModelKind, ZooModel};

const SEED: u64 = 99;

struct Fixture {
    model: ZooModel,
    contract: Contract,
    x: Feeds,
}

fn mlp(alpha: f64, calibration: usize) -> Fixture {
    let model = build_model(ModelKind::Mlp, SEED).unwrap();
    let env = common::envelopes(&model, calibration, &DeviceProfile::pool(), SEED);
    let contract = Contract::new(model.graph.clone(), env.rescaled(alpha).unwrap()).unwrap();
    let x = model.sample_input(&mut Rng::new(SEED).fork(3));
    Fixture { model, contract, x }
}

/// One linear layer: the whole dispute happens at the leaf.
fn single_op() -> Fixture {
    let mut b = GraphBuilder::new(SEED);
    let x = b.input("x", &[8, 48]);
    let w = b.normal("w", &[24, 48], 0.2);
    b.op("proj", OpKind::Linear, vec![x, w]);
    let graph = b.finish(vec![0]).unwrap();
    let model = ZooModel {
        kind: ModelKind::Chain,
        graph,
        classes: 0,
    };
    let env = common::envelopes(&model, 100, &DeviceProfile::pool(), SEED);
    let contract = Contract::new(model.graph.clone(), env.rescaled(3.0).unwrap()).unwrap();
    let x = model.sample_input(&mut Rng::new(SEED).fork(3));
    Fixture { model, contract, x }
}

fn run(fx: &Fixture, sc: &Scenario) -> DisputeRun {
    let r = run_dispute(&fx.contract, sc).unwrap();
    assert!(r.state.is_settled());
    let replayed = replay(&fx.contract, &r.ledger).unwrap();
    assert_eq!(replayed, r.state);
    r
}

fn verdict(r: &DisputeRun) -> (Party, VerdictPath) {
    let v = r.state.outcome.as_ref().unwrap();
    (v.winner, v.path)
}

fn log_ceil(n: usize, base: usize) -> usize {
    let mut k = 0;
    let mut cap = 1;
    while cap < n {
        cap *= base;
        k += 1;
    }
    k
}

fn faulty(fx: &Fixture, params: ProtocolParams, v: usize) -> Scenario {
    Scenario::new(fx.x.clone(), params).with_injections(vec![common::fault(fx.contract.thresholds(), &fx.model.graph, v)])
}

#[test]
fn unchallenged_result_pays_the_proposer_after_the_window() {
    let fx = mlp(3.0, 50);
    let r = run(&fx, &Scenario::new(fx.x.clone(), ProtocolParams::default()));
    assert_eq!(verdict(&r), (Party::Proposer, VerdictPath::Unchallenged));
    let p = r.state.payouts.unwrap();
    assert_eq!((p.proposer, p.challenger), (100, 0));
    let finalize = r.ledger.entries().iter().find(|e| e.message == Message::Finalize).unwrap();
    assert_eq!(finalize.tick, 10);
}

#[test]
fn challenge_window_is_closed_open() {
    let fx = mlp(3.0, 50);
    let params = ProtocolParams::default();
    let proposer = Proposer::new(&fx.contract, fx.x.clone(), DeviceProfile::pool()[1].clone(), &[], ProposerBehavior::Honest).unwrap();
    let challenge = Message::Challenge {
        p_max: Ratio(f64::INFINITY),
    };

    let mut d = Dispute::new(&fx.contract);
    d.post(Party::Proposer, proposer.submit(&params).unwrap()).unwrap();
    assert_eq!(d.state().deadline, 10);
    d.advance_to(9);
    assert!(d.post(Party::Proposer, Message::Finalize).is_err());
    d.post(Party::Challenger, challenge.clone()).unwrap();
    assert_eq!(d.state().phase, Phase::Challenged);

    let mut d = Dispute::new(&fx.contract);
    d.post(Party::Proposer, proposer.submit(&params).unwrap()).unwrap();
    d.advance_to(10);
    assert!(matches!(
        d.post(Party::Challenger, challenge.clone()),
        Err(ProtocolError::Late { deadline: 10, tick: 10 })
    ));
    // a challenge needs a claimed exceedance
    assert!(Dispute::new(&fx.contract).post(Party::Challenger, challenge).is_err());
    d.post(Party::Proposer, Message::Finalize).unwrap();
    assert!(d.state().is_settled());
    assert!(d.post(Party::Proposer, Message::Finalize).is_err());
}

#[test]
fn only_the_right_party_may_move() {
    let fx = mlp(3.0, 50);
    let params = ProtocolParams::default();
    let proposer = Proposer::new(&fx.contract, fx.x.clone(), DeviceProfile::pool()[1].clone(), &[], ProposerBehavior::Honest).unwrap();
    let mut d = Dispute::new(&fx.contract);
    let submit = proposer.submit(&params).unwrap();
    assert!(matches!(
        d.post(Party::Challenger, submit.clone()),
        Err(ProtocolError::WrongParty { .. })
    ));
    d.post(Party::Proposer, submit).unwrap();
    d.advance(1);
    d.post(Party::Challenger, Message::Challenge { p_max: Ratio(2.0) }).unwrap();
    assert!(matches!(d.post(Party::Challenger, Message::Concede), Ok(_)));
    assert_eq!(d.state().outcome.as_ref().unwrap().winner, Party::Proposer);
}

#[test]
fn silent_parties_lose_by_timeout() {
    let fx = mlp(3.0, 50);
    let base = faulty(&fx, ProtocolParams::default(), fx.model.graph.len() - 2);

    let r = run(&fx, &Scenario {
        proposer: ProposerBehavior::Silent,
        ..base.clone()
    });
    assert_eq!(verdict(&r), (Party::Challenger, VerdictPath::Timeout));
    assert_eq!(r.state.payouts.unwrap().challenger, 200);

    let r = run(&fx, &Scenario {
        challenger: ChallengerBehavior::Silent,
        ..base
    });
    assert_eq!(verdict(&r), (Party::Proposer, VerdictPath::Timeout));
    assert_eq!(r.state.payouts.unwrap().proposer, 200);
}

#[test]
fn forged_record_is_slashed() {
    let fx = mlp(3.0, 50);
    let r = run(&fx, &Scenario {
        proposer: ProposerBehavior::ForgeRecord,
        ..faulty(&fx, ProtocolParams::default(), fx.model.graph.len() - 2)
    });
    assert_eq!(verdict(&r), (Party::Challenger, VerdictPath::RecordVerification));
}

#[test]
fn eager_challenge_of_an_honest_result_is_conceded() {
    let fx = mlp(3.0, 50);
    let r = run(&fx, &Scenario {
        challenger: ChallengerBehavior::Eager,
        ..Scenario::new(fx.x.clone(), ProtocolParams::default())
    });
    assert_eq!(verdict(&r), (Party::Proposer, VerdictPath::Concession));
    assert_eq!(r.state.payouts.unwrap().proposer, 200);
}

#[test]
fn injected_faults_localize_within_the_round_budget() {
    let fx = mlp(3.0, 50);
    let len = fx.model.graph.len();
    for n in [2, 3, 4, 8] {
        let params = ProtocolParams {
            n,
            ..ProtocolParams::default()
        };
        let mut disputed = 0;
        for v in 0..len {
            let sc = faulty(&fx, params.clone(), v);
            let r = run(&fx, &sc);
            if verdict(&r) == (Party::Proposer, VerdictPath::Unchallenged) {
                // masked downstream, e.g. by a relu: nothing to dispute
                let (y, _) = execute_injected(&fx.model.graph, &fx.x, &sc.proposer_profile, &sc.injections).unwrap();
                let (mine, _) = execute_injected(&fx.model.graph, &fx.x, &sc.challenger_profile, &[]).unwrap();
                assert!(screen_ratio(&fx.model.graph, fx.contract.thresholds(), &mine, &y).unwrap() <= 1.0);
                continue;
            }
            disputed += 1;
            assert_eq!(r.state.outcome.as_ref().unwrap().winner, Party::Challenger, "N={n} site {v}");
            assert_eq!(r.state.leaf, Some(v), "N={n} site {v}");
            assert!(r.state.round <= log_ceil(len, n), "N={n} site {v}: {} rounds", r.state.round);
            // each round is a partition and a selection; the leaf adds a route
            // and the committee votes
            let moves = r.ledger.entries().iter().filter(|e| e.sender != Party::Contract).count();
            assert!(moves <= 2 + 2 * (log_ceil(len, n) + 2) + 1 + 5, "N={n} site {v}: {moves} moves");
            let c = dcr(&fx.model.graph, &r.state).unwrap();
            assert!(c.ratio > 0.0 && c.ratio <= 1.5);
        }
        assert!(2 * disputed > len, "N={n}: only {disputed} of {len} faults reached the outputs");
    }
}

#[test]
fn honest_proposer_never_loses_funds() {
    let fx = mlp(3.0, 200);
    let pool = DeviceProfile::pool();
    let mut rng = Rng::new(SEED).fork(11);
    let mut challenged = 0;
    for t in 0..200 {
        let x = fx.model.sample_input(&mut rng);
        let (a, b) = (t % pool.len(), (t / pool.len() + 1 + t) % pool.len());
        let b = if a == b { (b + 1) % pool.len() } else { b };
        let sc = Scenario {
            proposer_profile: pool[a].clone(),
            challenger_profile: pool[b].clone(),
            ..Scenario::new(x, ProtocolParams::default())
        };
        let r = run(&fx, &sc);
        assert_eq!(verdict(&r).0, Party::Proposer, "trial {t}");
        assert!(r.state.payouts.unwrap().proposer >= 100);
        challenged += (verdict(&r).1 != VerdictPath::Unchallenged) as usize;
    }
    // a screen that fires on an honest result costs the challenger its stake
    assert!(challenged <= 2, "{challenged} honest results were challenged");
}

fn leaf_scenario(fx: &Fixture, delta: Vec<f64>) -> Scenario {
    let inj = if delta.is_empty() {
        vec![]
    } else {
        vec![Injection { node: 0, delta }]
    };
    Scenario {
        challenger: ChallengerBehavior::Eager,
        ..Scenario::new(fx.x.clone(), ProtocolParams::default()).with_injections(inj)
    }
}

/// The bound the challenger computes around its own output.
fn challenger_tau(fx: &Fixture) -> Vec<f64> {
    let g = &fx.model.graph;
    let seq = DeviceProfile::pool()[0].clone();
    let x = &fx.x["x"];
    let w = g.weight("w").unwrap();
    let y = eval_op(g, 0, &[x, w], &seq).unwrap();
    node_bound(g, 0, &[x, w], &y, seq.fma, &ProtocolParams::default().model).unwrap().eps
}

#[test]
fn single_op_dispute_starts_at_the_leaf() {
    let fx = single_op();
    let honest = run(&fx, &leaf_scenario(&fx, vec![]));
    assert_eq!(honest.state.round, 0);
    assert_eq!(honest.state.leaf, Some(0));
    assert_eq!(honest.state.route, Some(LeafPath::Committee));
    assert_eq!(verdict(&honest), (Party::Proposer, VerdictPath::Committee));
    assert_eq!(honest.state.votes.len(), 5);
    assert!(honest.state.votes.iter().filter(|v| v.within).count() >= 3);
    let c = dcr(&fx.model.graph, &honest.state).unwrap();
    assert!((c.ratio - 1.0).abs() < 1e-9);
}

#[test]
fn inside_the_worst_case_bound_but_outside_calibrated_caps_is_slashed_by_committee() {
    let fx = single_op();
    let tau = challenger_tau(&fx);
    let r = run(&fx, &leaf_scenario(&fx, tau.iter().map(|t| 0.5 * t).collect()));
    assert_eq!(r.state.route, Some(LeafPath::Committee));
    assert_eq!(verdict(&r), (Party::Challenger, VerdictPath::Committee));

    let r = run(&fx, &leaf_scenario(&fx, tau.iter().map(|t| 10.0 * t).collect()));
    assert_eq!(r.state.route, Some(LeafPath::Theoretical));
    assert_eq!(verdict(&r), (Party::Challenger, VerdictPath::Theoretical));
}

#[test]
fn committee_members_are_distinct_and_fixed_by_the_commitment() {
    let fx = single_op();
    let a = run(&fx, &leaf_scenario(&fx, vec![]));
    let b = run(&fx, &leaf_scenario(&fx, vec![]));
    assert_eq!(a.state.committee, b.state.committee);
    let mut ids = a.state.committee.clone();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 5);
}

#[test]
fn transcripts_are_deterministic_and_tamper_evident() {
    let fx = mlp(3.0, 50);
    let sc = faulty(&fx, ProtocolParams::default(), 12);
    let a = run(&fx, &sc);
    let b = run(&fx, &sc);
    let text = a.ledger.to_jsonl();
    assert_eq!(text, b.ledger.to_jsonl());
    assert_eq!(replay(&fx.contract, &Ledger::from_jsonl(&text).unwrap()).unwrap().digest(), a.state.digest());

    // drop the final settlement: the replay is valid but not terminal
    let cut: String = text.lines().take(a.ledger.len() - 1).map(|l| format!("{l}\n")).collect();
    let partial = replay(&fx.contract, &Ledger::from_jsonl(&cut).unwrap()).unwrap();
    assert!(!partial.is_settled());

    // a contract built from other thresholds rejects the transcript
    let other = Contract::new(fx.model.graph.clone(), rescale(fx.contract.thresholds(), 2.0)).unwrap();
    assert!(replay(&other, &a.ledger).is_err());
}

fn rescale(t: &ThresholdSet, k: f64) -> ThresholdSet {
    t.rescaled(k).unwrap()
}
