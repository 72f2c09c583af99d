//! End-to-end acceptance sweep. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `ACCEPTANCE_ONLY=4,5` restricts the run.

mod common;

use std::time::Instant;

use tolver_core::attack::{attack_pairs, run_cell, summarize_cell, AttackMode, EvalConfig};
use tolver_core::bounds::{co_execute, gamma_tilde, FpModel, U_FP32};
use tolver_core::calibration::{
    calibrate, stability_report, summarize, DEFAULT_EPSILON, PercentileGrid,
};
use tolver_core::exec::{reduce_sum, DeviceProfile, Reduction};
use tolver_core::graph::OpKind;
use tolver_core::protocol::{
    dcr, replay, run_dispute, ChallengerBehavior, Contract, Ledger, Party, ProposerBehavior, ProtocolParams,
    Scenario,
};
use tolver_core::rng::Rng;
use tolver_core::zoo::{batched_chain, build_model, chain, ModelKind, ZooModel, CHAIN_BLOCKS, CHAIN_WIDTH};

const SEED: u64 = 2024;
/// Calibration inputs for the false-positive check.
const FP_CALIBRATION: usize = 1000;
const HELDOUT_RUNS: usize = 200;
const ATTACK_INPUTS: usize = 40;
const INJECTIONS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn four_profiles() -> Vec<DeviceProfile> {
    DeviceProfile::pool()[..4].to_vec()
}

fn deterministic_bounds() -> Outcome {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for kind in OpKind::ALL {
        let st = common::bound_check(kind, 10_000, SEED);
        failures += st.failures;
        worst = worst.max(st.worst);
        cases += st.cases;
        if st.failures > 0 {
            println!("    {kind}: {} violating cases", st.failures);
        }
    }
    outcome(
        failures == 0,
        format!("{cases} cases over {} kinds, {failures} violations, worst |err|/bound {worst:.3}", OpKind::ALL.len()),
    )
}

fn probabilistic_bounds() -> Outcome {
    const N: usize = 10_000;
    const TRIALS: usize = 10_000;
    let bound_factor = gamma_tilde(N - 1, 4.0, U_FP32);
    let mut rng = Rng::new(SEED).fork(2);
    let (mut seq_viol, mut perm_viol) = (0, 0);
    let mut v = vec![0f32; N];
    for _ in 0..TRIALS {
        // multiples of 2^-24 in [0, 1): the FP64 sum is exact
        for x in v.iter_mut() {
            *x = rng.below(1 << 24) as f32 / 16_777_216.0;
        }
        let exact: f64 = v.iter().map(|&x| x as f64).sum();
        let bound = bound_factor * exact;
        let s = reduce_sum(&v, &Reduction::Sequential) as f64;
        seq_viol += ((s - exact).abs() > bound) as usize;
        let p = rng.permutation(N);
        let permuted: Vec<f32> = p.iter().map(|&i| v[i]).collect();
        let s = reduce_sum(&permuted, &Reduction::Sequential) as f64;
        perm_viol += ((s - exact).abs() > bound) as usize;
    }
    let rate = |c: usize| 100.0 * c as f64 / TRIALS as f64;
    let mut gamma_err: f64 = 0.0;
    for e in 2..=6 {
        let k = 10usize.pow(e);
        let approx = 4.0 * U_FP32 * (k as f64).sqrt();
        gamma_err = gamma_err.max((gamma_tilde(k, 4.0, U_FP32) - approx).abs() / approx);
    }
    let pass = rate(seq_viol) <= 0.5 && rate(perm_viol) <= 0.5 && gamma_err <= 0.01;
    outcome(
        pass,
        format!(
            "violations sequential {:.2}%, permuted {:.2}% (limit 0.5%); max gamma-tilde deviation from 4u*sqrt(k) {:.3}%",
            rate(seq_viol),
            rate(perm_viol),
            100.0 * gamma_err
        ),
    )
}

fn tightness() -> Outcome {
    let m = build_model(ModelKind::Transformer, SEED).unwrap();
    let g = &m.graph;
    let profiles = four_profiles();
    let env = common::envelopes(&m, 50, &profiles, SEED);
    let p50 = env.grid.iter().position(|&p| p == 50.0).unwrap();
    let inputs = m.sample_inputs(&mut Rng::new(SEED).fork(3), 10);
    let model = FpModel::probabilistic();
    let mut theo = vec![0.0; g.len()];
    for x in &inputs {
        for p in &profiles {
            let (_, _, bounds) = co_execute(g, x, p, &model).unwrap();
            for (t, b) in theo.iter_mut().zip(&bounds) {
                *t += b.median() / (inputs.len() * profiles.len()) as f64;
            }
        }
    }
    let mut ratios: Vec<f64> = (0..g.len())
        .filter(|&i| !g.node(i).kind.is_data_movement() && env.ops[i].tau_abs[p50] > 0.0)
        .map(|i| theo[i] / env.ops[i].tau_abs[p50])
        .collect();
    ratios.sort_by(f64::total_cmp);
    let med = ratios[ratios.len() / 2];
    outcome(
        med >= 10.0,
        format!(
            "median bound/envelope ratio {med:.1} over {} ops (min {:.2}, max {:.0})",
            ratios.len(),
            ratios[0],
            ratios[ratios.len() - 1]
        ),
    )
}

fn false_positives() -> Outcome {
    use tolver_core::attack::false_positive_rate;
    let profiles = four_profiles();
    let mut pass = true;
    let mut parts = vec![];
    for kind in [ModelKind::Mlp, ModelKind::Transformer] {
        let m = build_model(kind, SEED).unwrap();
        let env = common::envelopes(&m, FP_CALIBRATION, &profiles, SEED);
        let heldout = m.sample_inputs(&mut Rng::new(SEED).fork(4), HELDOUT_RUNS);
        for alpha in [1.0, 2.0, 3.0] {
            let (fires, runs) = false_positive_rate(&m.graph, &env.rescaled(alpha).unwrap(), &heldout, &profiles).unwrap();
            pass &= fires == 0;
            parts.push(format!("{kind}@{alpha}: {fires}/{runs}"));
        }
    }
    outcome(pass, format!("disputes raised on honest runs: {}", parts.join(", ")))
}

struct ChainFixture {
    model: ZooModel,
    contract: Contract,
    sites: Vec<usize>,
}

fn chain_fixture() -> ChainFixture {
    let model = chain(CHAIN_BLOCKS, CHAIN_WIDTH, SEED).unwrap();
    let params = ProtocolParams::default();
    let env = common::envelopes(&model, 50, &params.profiles(), SEED);
    let th = env.rescaled(3.0).unwrap();
    let contract = Contract::new(model.graph.clone(), th).unwrap();
    let mut rng = Rng::new(SEED).fork(5);
    let sites = (0..INJECTIONS).map(|_| rng.below(model.graph.len())).collect();
    ChainFixture { model, contract, sites }
}

fn localization(fx: &ChainFixture, n: usize) -> Result<(usize, usize, Vec<f64>), String> {
    let g = fx.contract.graph();
    let x = fx.model.sample_input(&mut Rng::new(SEED).fork(6));
    let mut hits = 0;
    let mut max_rounds = 0;
    let mut ratios = vec![];
    for &v in &fx.sites {
        let params = ProtocolParams {
            n,
            ..ProtocolParams::default()
        };
        let sc = Scenario::new(x.clone(), params).with_injections(vec![common::fault(fx.contract.thresholds(), g, v)]);
        let run = run_dispute(&fx.contract, &sc).map_err(|e| format!("site {v}: {e}"))?;
        let won = run.state.outcome.as_ref().is_some_and(|o| o.winner == Party::Challenger);
        hits += (run.state.leaf == Some(v) && won) as usize;
        max_rounds = max_rounds.max(run.state.selections.len());
        ratios.push(dcr(g, &run.state).map_err(|e| e.to_string())?.ratio);
    }
    Ok((hits, max_rounds, ratios))
}

fn localization_and_rounds(fx: &ChainFixture) -> Outcome {
    let mut pass = true;
    let mut parts = vec![];
    for (n, limit) in [(2, 11), (4, 6), (8, 4)] {
        match localization(fx, n) {
            Ok((hits, rounds, _)) => {
                let ok = hits == fx.sites.len() && if n == 2 { rounds == limit } else { rounds <= limit };
                pass &= ok;
                parts.push(format!("N={n}: leaf={hits}/{} rounds={rounds}", fx.sites.len()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("N={n}: {e}"));
            }
        }
    }
    outcome(pass, format!("|V|={}: {}", fx.contract.graph().len(), parts.join(", ")))
}

fn cost_ratio(fx: &ChainFixture) -> Outcome {
    match localization(fx, 2) {
        Ok((_, _, ratios)) => {
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(0.0, f64::max);
            outcome(
                lo >= 0.3 && hi <= 1.5,
                format!("DCR / forward FLOPs over {} disputes in [{lo:.3}, {hi:.3}]", ratios.len()),
            )
        }
        Err(e) => outcome(false, e),
    }
}

struct AttackFixture {
    name: ModelKind,
    model: ZooModel,
    data: Vec<tolver_core::exec::Feeds>,
    env: tolver_core::calibration::ThresholdSet,
}

fn attack_fixtures() -> Vec<AttackFixture> {
    [ModelKind::Mlp, ModelKind::Transformer]
        .into_iter()
        .map(|kind| {
            let model = build_model(kind, SEED).unwrap();
            let env = common::envelopes(&model, 50, &four_profiles(), SEED);
            let data = model.sample_inputs(&mut Rng::new(SEED).fork(7), ATTACK_INPUTS);
            AttackFixture {
                name: kind,
                model,
                data,
                env,
            }
        })
        .collect()
}

fn cell(fx: &AttackFixture, mode: AttackMode, alpha: f64) -> tolver_core::attack::CellRow {
    let cfg = EvalConfig {
        seed: SEED,
        ..EvalConfig::default()
    };
    let g = &fx.model.graph;
    let logits = fx.model.logits_node();
    let pairs = attack_pairs(g, logits, &fx.data, cfg.buckets, cfg.seed).unwrap();
    let rs = run_cell(g, logits, &fx.data, &pairs, mode, alpha, Some(&fx.env), &cfg).unwrap();
    summarize_cell(mode, alpha, &rs, cfg.buckets, None).pop().unwrap()
}

fn attack_robustness(fxs: &[AttackFixture]) -> Outcome {
    let mut pass = true;
    let mut parts = vec![];
    for fx in fxs {
        for alpha in [1.0, 2.0, 3.0] {
            let r = cell(fx, AttackMode::Empirical, alpha);
            pass &= r.successes == 0 && r.pairs >= 200;
            parts.push(format!("{} emp@{alpha} {:.1}% of {}", fx.name, r.asr, r.pairs));
        }
        let r = cell(fx, AttackMode::Unconstrained, 1.0);
        pass &= r.asr >= 90.0;
        parts.push(format!("{} unconstrained {:.1}%", fx.name, r.asr));
    }
    outcome(pass, parts.join(", "))
}

fn bound_mode_ordering(fxs: &[AttackFixture]) -> Outcome {
    let (mut d, mut p) = (0.0, 0.0);
    let mut parts = vec![];
    for fx in fxs {
        let rd = cell(fx, AttackMode::TheoDeterministic, 1.0);
        let rp = cell(fx, AttackMode::TheoProbabilistic, 1.0);
        d += rd.dm_fail * (rd.pairs - rd.successes) as f64;
        p += rp.dm_fail * (rp.pairs - rp.successes) as f64;
        parts.push(format!(
            "{}: theo-d dm_fail {:.3e} (ASR {:.1}%), theo-p {:.3e} (ASR {:.1}%)",
            fx.name, rd.dm_fail, rd.asr, rp.dm_fail, rp.asr
        ));
    }
    outcome(d > p, parts.join("; "))
}

fn commitment_integrity() -> Outcome {
    let st = common::tamper_sweep(1000, SEED);
    outcome(
        st.detected == st.tampered && st.accepted == st.honest,
        format!(
            "tampers detected {}/{}, honest accepted {}/{}",
            st.detected, st.tampered, st.accepted, st.honest
        ),
    )
}

fn gradients() -> Outcome {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for kind in OpKind::ALL {
        let st = common::grad_check(kind, 100, SEED, 1e-3);
        failures += st.failures;
        worst = worst.max(st.worst);
        if st.failures > 0 {
            println!("    {kind}: {} failing cases, worst {:.3e}", st.failures, st.worst);
        }
    }
    outcome(
        failures == 0,
        format!("{} kinds x 100 cases, {failures} failures, worst relative error {worst:.2e}", OpKind::ALL.len()),
    )
}

fn stability() -> Outcome {
    // 100 operators of 4096 elements each: 50 residual blocks, i.i.d. inputs
    let m = batched_chain(50, 64, 64, SEED).unwrap();
    let data = m.sample_inputs(&mut Rng::new(SEED).fork(8), 50);
    let cal = calibrate(&m.graph, &data, &four_profiles(), &PercentileGrid::default(), DEFAULT_EPSILON).unwrap();
    let cols: Vec<usize> = [30.0, 50.0, 70.0]
        .iter()
        .map(|p| cal.grid.0.iter().position(|q| q == p).unwrap())
        .collect();
    let samples: Vec<Vec<Vec<f64>>> = (0..m.graph.len())
        .map(|i| {
            cal.stability_samples(i)
                .into_iter()
                .map(|row| cols.iter().map(|&c| row[c]).collect())
                .collect()
        })
        .collect();
    let report = stability_report(&samples, &[30.0, 50.0, 70.0], 10, DEFAULT_EPSILON).unwrap();
    let s = summarize(&report).unwrap();
    if std::env::var("ACCEPTANCE_VERBOSE").is_ok() {
        println!("{}", serde_json::to_string(&s).unwrap());
    }
    let mut pass = true;
    let mut worst = [0.0f64; 2];
    for metric in [&s.sup_norm, &s.jackknife, &s.tail_adj] {
        for c in metric {
            worst[0] = worst[0].max(c.p50);
            worst[1] = worst[1].max(c.p90);
            pass &= c.p50 <= 0.01 && c.p90 <= 0.05;
        }
    }
    let flat = vec![vec![vec![0.25; 3]; 50]; 4];
    let z = stability_report(&flat, &[30.0, 50.0, 70.0], 10, DEFAULT_EPSILON).unwrap();
    let zero = z
        .ops
        .iter()
        .all(|o| [&o.sup_norm, &o.jackknife, &o.tail_adj, &o.roll_sd].iter().all(|v| v.iter().all(|&x| x == 0.0)));
    pass &= zero;
    let roll: f64 = s.roll_sd.iter().map(|c| c.p90).fold(0.0, f64::max);
    outcome(
        pass,
        format!(
            "{} operators, n=50, W=10: worst p50 {:.4}, worst p90 {:.4} (RollSD p90 {roll:.3}); constant sequences zero: {zero}",
            m.graph.len(),
            worst[0],
            worst[1]
        ),
    )
}

fn replay_determinism() -> Outcome {
    let m = build_model(ModelKind::Mlp, SEED).unwrap();
    let params = ProtocolParams::default();
    let env = common::envelopes(&m, 50, &params.profiles(), SEED);
    let contract = Contract::new(m.graph.clone(), env.rescaled(3.0).unwrap()).unwrap();
    let x = m.sample_input(&mut Rng::new(SEED).fork(9));
    let g = &m.graph;
    let mut scenarios = vec![Scenario::new(x.clone(), params.clone())];
    for n in [2, 4, 8] {
        for v in [3, g.len() / 2, g.len() - 2] {
            let p = ProtocolParams {
                n,
                ..params.clone()
            };
            scenarios.push(Scenario::new(x.clone(), p).with_injections(vec![common::fault(contract.thresholds(), g, v)]));
        }
    }
    let faulty = scenarios[1].clone();
    scenarios.push(Scenario {
        proposer: ProposerBehavior::Silent,
        ..faulty.clone()
    });
    scenarios.push(Scenario {
        proposer: ProposerBehavior::ForgeRecord,
        ..faulty.clone()
    });
    scenarios.push(Scenario {
        challenger: ChallengerBehavior::Silent,
        ..faulty
    });
    scenarios.push(Scenario {
        challenger: ChallengerBehavior::Eager,
        ..scenarios[0].clone()
    });
    let mut ok = 0;
    for sc in &scenarios {
        let a = run_dispute(&contract, sc).unwrap();
        let b = run_dispute(&contract, sc).unwrap();
        let text = a.ledger.to_jsonl();
        let reloaded = Ledger::from_jsonl(&text).unwrap();
        let same = text == b.ledger.to_jsonl()
            && a.state.is_settled()
            && replay(&contract, &a.ledger).unwrap().digest() == a.state.digest()
            && replay(&contract, &reloaded).unwrap().digest() == a.state.digest()
            && replay(&contract, &reloaded).unwrap() == a.state;
        ok += same as usize;
    }
    outcome(
        ok == scenarios.len(),
        format!("{ok}/{} settled transcripts replay bitwise and re-run to identical bytes", scenarios.len()),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut chain_fx: Option<ChainFixture> = None;
    let mut attack_fx: Option<Vec<AttackFixture>> = None;
    let titles = [
        "deterministic-bound soundness",
        "probabilistic-bound confidence",
        "tightness gap",
        "zero false positives",
        "localization and round count",
        "cost ratio",
        "attack robustness",
        "bound-mode ordering",
        "commitment integrity",
        "gradient correctness",
        "stability diagnostics",
        "replay determinism",
    ];
    let mut failed = vec![];
    for (k, title) in titles.iter().enumerate() {
        let id = k + 1;
        if !wanted(id) {
            continue;
        }
        let t0 = Instant::now();
        let o = match id {
            1 => deterministic_bounds(),
            2 => probabilistic_bounds(),
            3 => tightness(),
            4 => false_positives(),
            5 => localization_and_rounds(chain_fx.get_or_insert_with(chain_fixture)),
            6 => cost_ratio(chain_fx.get_or_insert_with(chain_fixture)),
            7 => attack_robustness(attack_fx.get_or_insert_with(attack_fixtures)),
            8 => bound_mode_ordering(attack_fx.get_or_insert_with(attack_fixtures)),
            9 => commitment_integrity(),
            10 => gradients(),
            11 => stability(),
            _ => replay_determinism(),
        };
        println!(
            "{} [{id:>2}] {title}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
