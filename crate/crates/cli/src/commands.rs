use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use tolver_core::attack::{attack_pairs, false_positive_rate, run_cell, summarize_cell, AttackMode, CellRow, EvalConfig, PgdConfig};
use tolver_core::calibration::{
    calibrate as calibrate_graph, stability_report, summarize, PercentileGrid, StabilityReport, ThresholdSet,
};
use tolver_core::exec::{Feeds, Injection};
use tolver_core::graph::{load_graph, save_graph, Graph, Ref};
use tolver_core::protocol::{
    dcr, merkle_checks, replay as replay_ledger, run_dispute, Challenger, Contract, Dispute, DisputeState, Ledger,
    Party, Proposer, ProtocolError, Scenario, VerdictPath,
};
use tolver_core::rng::Rng;
use tolver_core::tensor::{numel, read_tensor_file};
use tolver_core::zoo::{build_model, ModelKind, ZooModel};

use crate::config::{profile, RunConfig};
use crate::{ConfigError, TimeoutLoss, VerifyFailure};

struct Model {
    graph: Graph,
    zoo: Option<ZooModel>,
}

impl Model {
    fn sample_input(&self, rng: &mut Rng) -> Feeds {
        match &self.zoo {
            Some(z) => z.sample_input(rng),
            None => self
                .graph
                .inputs()
                .iter()
                .map(|s| (s.name.clone(), rng.normal_tensor(&s.shape, 1.0)))
                .collect(),
        }
    }

    fn sample_inputs(&self, rng: &mut Rng, count: usize) -> Vec<Feeds> {
        (0..count).map(|_| self.sample_input(rng)).collect()
    }
}

fn load_model(c: &RunConfig, default: ModelKind) -> Result<Model> {
    if let Some(g) = &c.paths.graph {
        let weights = c
            .paths
            .weights
            .clone()
            .unwrap_or_else(|| g.parent().unwrap_or(Path::new(".")).join("weights"));
        let graph = load_graph(g, &weights).map_err(|e| ConfigError(format!("graph {}: {e}", g.display())))?;
        return Ok(Model { graph, zoo: None });
    }
    let kind = match &c.paths.model {
        Some(name) => ModelKind::parse(name).ok_or_else(|| ConfigError(format!("unknown model `{name}`")))?,
        None => default,
    };
    let zoo = build_model(kind, c.seeds.model)?;
    Ok(Model {
        graph: zoo.graph.clone(),
        zoo: Some(zoo),
    })
}

fn load_thresholds(c: &RunConfig) -> Result<ThresholdSet> {
    let path = c
        .paths
        .thresholds
        .as_ref()
        .ok_or_else(|| ConfigError("no threshold file; run `tolver calibrate` first and pass --thresholds".into()))?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ThresholdSet::from_bytes(&bytes).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn contract(c: &RunConfig, default: ModelKind) -> Result<(Model, Contract)> {
    let m = load_model(c, default)?;
    let th = load_thresholds(c)?;
    let contract = Contract::new(m.graph.clone(), th).map_err(|e| ConfigError(e.to_string()))?;
    Ok((m, contract))
}

fn request_input(c: &RunConfig, m: &Model) -> Result<Feeds> {
    match &c.paths.input {
        Some(p) => {
            let spec = m
                .graph
                .inputs()
                .first()
                .ok_or_else(|| ConfigError("graph has no inputs".into()))?;
            if m.graph.inputs().len() != 1 {
                bail!(ConfigError("--input supports single-input graphs only".into()));
            }
            let t = read_tensor_file(p).with_context(|| format!("reading {}", p.display()))?;
            if t.shape() != spec.shape.as_slice() {
                bail!(ConfigError(format!("input shape {:?}, graph expects {:?}", t.shape(), spec.shape)));
            }
            Ok(Feeds::from([(spec.name.clone(), t)]))
        }
        None => Ok(m.sample_input(&mut Rng::new(c.seeds.input))),
    }
}

/// Parses `node=<index or name>,scale=<k>`.
fn injection(spec: &str, g: &Graph, th: &ThresholdSet) -> Result<Injection> {
    let mut node = None;
    let mut scale = 10.0;
    for part in spec.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--inject: expected key=value, got `{part}`")))?;
        match k.trim() {
            "node" => {
                let v = v.trim();
                node = Some(match v.parse::<usize>() {
                    Ok(i) => i,
                    Err(_) => g
                        .nodes()
                        .iter()
                        .position(|n| n.name == v)
                        .ok_or_else(|| ConfigError(format!("--inject: no node named `{v}`")))?,
                });
            }
            "scale" => {
                scale = v
                    .trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("--inject: bad scale `{v}`")))?
            }
            other => bail!(ConfigError(format!("--inject: unknown key `{other}`"))),
        }
    }
    let v = node.ok_or_else(|| ConfigError("--inject needs node=".into()))?;
    if v >= g.len() {
        bail!(ConfigError(format!("--inject: node {v} out of range for {} nodes", g.len())));
    }
    let top = |i: usize| th.ops[i].tau_abs.last().copied().unwrap_or(0.0);
    let cap = g.outputs().iter().map(|&o| top(o)).fold(top(v), f64::max);
    Ok(Injection {
        node: v,
        delta: vec![(scale * cap).max(1e-6); numel(g.shape(v))],
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn zoo(c: &RunConfig) -> Result<()> {
    let m = load_model(c, ModelKind::Mlp)?;
    let dir = c.out_dir();
    let graph = dir.join("graph.json");
    save_graph(&m.graph, &graph, &dir.join("weights"))?;
    println!("wrote {} ({} nodes, {} weights)", graph.display(), m.graph.len(), m.graph.weights().len());
    Ok(())
}

fn stability_csv(r: &StabilityReport, g: &Graph) -> String {
    let mut s = String::from("op,name,percentile,sup_norm,jackknife,tail_adj,roll_sd\n");
    for (i, o) in r.ops.iter().enumerate() {
        for (c, p) in r.columns.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{p},{:e},{:e},{:e},{:e}",
                g.node(i).name,
                o.sup_norm[c],
                o.jackknife[c],
                o.tail_adj[c],
                o.roll_sd[c]
            );
        }
    }
    s
}

pub fn calibrate(c: &RunConfig) -> Result<()> {
    let k = &c.calibration;
    let profiles = k.profiles.iter().map(|p| profile(p)).collect::<Result<Vec<_>>>()?;
    if profiles.len() < 2 {
        bail!(ConfigError(format!("calibration needs at least two profiles, got {}", profiles.len())));
    }
    if k.dataset_size == 0 {
        bail!(ConfigError("calibration needs at least one input".into()));
    }
    let m = load_model(c, ModelKind::Mlp)?;
    let data = m.sample_inputs(&mut Rng::new(c.seeds.data), k.dataset_size);
    let grid = PercentileGrid::default();
    let cal = calibrate_graph(&m.graph, &data, &profiles, &grid, k.epsilon).map_err(|e| ConfigError(e.to_string()))?;
    let th = cal.thresholds(&m.graph, k.alpha).map_err(|e| ConfigError(e.to_string()))?;
    let dir = c.out_dir();
    let th_path = dir.join("thresholds.json");
    write(&th_path, th.to_bytes())?;
    println!(
        "wrote {} ({} operators, alpha {}, {} inputs x {} profiles)",
        th_path.display(),
        th.ops.len(),
        th.alpha,
        k.dataset_size,
        profiles.len()
    );
    if k.dataset_size <= k.window {
        println!("stability diagnostics skipped: need more than {} inputs", k.window);
        return Ok(());
    }
    let cols: Vec<usize> = k
        .columns
        .iter()
        .map(|p| {
            grid.points()
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| ConfigError(format!("stability column {p} is not on the percentile grid")))
        })
        .collect::<Result<_, _>>()?;
    let samples: Vec<Vec<Vec<f64>>> = (0..m.graph.len())
        .map(|i| {
            cal.stability_samples(i)
                .into_iter()
                .map(|row| cols.iter().map(|&j| row[j]).collect())
                .collect()
        })
        .collect();
    let report = stability_report(&samples, &k.columns, k.window, k.epsilon)?;
    let csv = dir.join("stability.csv");
    write(&csv, stability_csv(&report, &m.graph))?;
    let s = summarize(&report)?;
    println!("wrote {}", csv.display());
    println!("{:<10} {:>8} {:>10} {:>10}", "metric", "column", "p50", "p90");
    for (name, rows) in [("SupNorm", &s.sup_norm), ("Jackknife", &s.jackknife), ("TailAdj", &s.tail_adj), ("RollSD", &s.roll_sd)] {
        for (p, r) in s.columns.iter().zip(rows) {
            println!("{name:<10} {:>8} {:>10.4} {:>10.4}", format!("p{p}"), r.p50, r.p90);
        }
    }
    println!("{:<10} {:>8} {:>10.4} {:>10.4}", "delta_inf", "-", s.delta_inf.p50, s.delta_inf.p90);
    Ok(())
}

fn injections(c: &RunConfig, g: &Graph, th: &ThresholdSet) -> Result<Vec<Injection>> {
    c.parties.inject.as_deref().map(|s| injection(s, g, th)).into_iter().collect()
}

pub fn commit(c: &RunConfig) -> Result<()> {
    let params = c.protocol_params()?;
    let (m, contract) = contract(c, ModelKind::Mlp)?;
    let x = request_input(c, &m)?;
    let inj = injections(c, &m.graph, contract.thresholds())?;
    let p = Proposer::new(&contract, x, profile(&c.parties.proposer_profile)?, &inj, c.parties.proposer)?;
    let mut d = Dispute::new(&contract);
    d.post(Party::Proposer, p.submit(&params)?)?;
    let path = c.ledger_path();
    write(&path, d.ledger().to_jsonl())?;
    let cm = d.state().commitment.as_ref().expect("submitted");
    println!("c0 {}", cm.c0);
    println!("challenge window closes at tick {}", d.state().deadline);
    println!("wrote {}", path.display());
    Ok(())
}

fn revealed_inputs(st: &DisputeState) -> Feeds {
    st.io
        .as_ref()
        .map(|io| {
            io.inputs
                .iter()
                .filter_map(|(r, b)| match r {
                    Ref::Input(n) => Some((n.clone(), b.0.clone())),
                    _ => None,
                })
                .collect()
        })
        .unwrap_or_default()
}

pub fn challenge(c: &RunConfig) -> Result<()> {
    let (_, contract) = contract(c, ModelKind::Mlp)?;
    let path = c.ledger_path();
    let ledger = Ledger::load(&path).map_err(|e| VerifyFailure(e.to_string()))?;
    let mut d = Dispute::resume(&contract, ledger).map_err(|e| VerifyFailure(e.to_string()))?;
    let x = revealed_inputs(d.state());
    let ch = Challenger::new(&contract, &x, profile(&c.parties.challenger_profile)?, c.parties.challenger)?;
    match ch.challenge(d.state())? {
        None => {
            println!("result is within the committed thresholds; no challenge");
            Ok(())
        }
        Some(m) => {
            d.advance(1);
            match d.post(Party::Challenger, m) {
                Err(ProtocolError::Late { deadline, tick }) => {
                    bail!(TimeoutLoss(format!("challenge window closed at tick {deadline} (now {tick})")))
                }
                r => r?,
            };
            write(&path, d.ledger().to_jsonl())?;
            println!("challenge posted; wrote {}", path.display());
            bail!(VerifyFailure("result exceeds the committed thresholds".into()))
        }
    }
}

fn report(st: &DisputeState, g: &Graph) -> Result<()> {
    let v = st.outcome.as_ref().ok_or(ProtocolError::Unsettled)?;
    println!("winner {} via {:?}: {}", v.winner, v.path, v.note);
    if let Some(l) = st.leaf {
        println!("leaf node {l} ({})", g.node(l).name);
    }
    if let Some(p) = st.payouts {
        println!("payouts: proposer {}, challenger {}", p.proposer, p.challenger);
    }
    Ok(())
}

/// Exit status for a settled dispute, from the proposer's point of view.
fn verdict_status(st: &DisputeState) -> Result<()> {
    let v = st.outcome.as_ref().ok_or(ProtocolError::Unsettled)?;
    match (v.winner, v.path) {
        (_, VerdictPath::Timeout) => bail!(TimeoutLoss(v.note.clone())),
        (Party::Proposer, _) => Ok(()),
        _ => bail!(VerifyFailure(format!("proposer result rejected via {:?}", v.path))),
    }
}

pub fn run(c: &RunConfig) -> Result<()> {
    let params = c.protocol_params()?;
    let (m, contract) = contract(c, ModelKind::Mlp)?;
    let x = request_input(c, &m)?;
    let sc = Scenario {
        inputs: x,
        params,
        proposer_profile: profile(&c.parties.proposer_profile)?,
        challenger_profile: profile(&c.parties.challenger_profile)?,
        injections: injections(c, &m.graph, contract.thresholds())?,
        proposer: c.parties.proposer,
        challenger: c.parties.challenger,
    };
    let r = run_dispute(&contract, &sc)?;
    let ledger = c.ledger_path();
    write(&ledger, r.ledger.to_jsonl())?;
    let state = ledger.with_extension("state.json");
    write(&state, serde_json::to_vec_pretty(&r.state)?)?;
    report(&r.state, &m.graph)?;
    let cost = dcr(&m.graph, &r.state)?;
    println!(
        "rounds {}, merkle checks {}, challenger flops {} ({:.3} of a forward pass)",
        cost.rounds,
        merkle_checks(&r.ledger),
        cost.flops,
        cost.ratio
    );
    println!("state digest {}", r.state.digest());
    println!("wrote {} and {}", ledger.display(), state.display());
    verdict_status(&r.state)
}

pub fn replay(c: &RunConfig, expect: Option<&Path>) -> Result<()> {
    let (m, contract) = contract(c, ModelKind::Mlp)?;
    let path = c.ledger_path();
    let ledger = Ledger::load(&path).map_err(|e| VerifyFailure(format!("{}: {e}", path.display())))?;
    let st = replay_ledger(&contract, &ledger).map_err(|e| VerifyFailure(e.to_string()))?;
    println!("{} entries, phase {:?}, state digest {}", ledger.len(), st.phase, st.digest());
    if let Some(p) = expect {
        let want: DisputeState =
            serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
        if want != st {
            bail!(VerifyFailure(format!(
                "replayed state {} differs from {} ({})",
                st.digest(),
                p.display(),
                want.digest()
            )));
        }
        println!("matches {}", p.display());
    }
    if st.is_settled() {
        report(&st, &m.graph)?;
    }
    Ok(())
}

fn csv_rows(rows: &[CellRow]) -> String {
    let mut s = String::from("mode,alpha,bucket,pairs,successes,asr_pct,dm_fail,delta_fail,fp_rate_pct\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.2},{:e},{:e},{}",
            r.mode,
            r.alpha,
            r.bucket.map_or("all".into(), |b| b.to_string()),
            r.pairs,
            r.successes,
            r.asr,
            r.dm_fail,
            r.delta_fail,
            r.fp_rate.map_or(String::new(), |f| format!("{f:.2}"))
        );
    }
    s
}

fn emit(c: &RunConfig, default_name: &str, text: &str) -> Result<()> {
    match &c.paths.out {
        Some(p) => {
            let path = if p.is_dir() { p.join(default_name) } else { p.clone() };
            write(&path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn attack(c: &RunConfig) -> Result<()> {
    let a = &c.attack;
    let mode = AttackMode::parse(&a.mode).ok_or_else(|| ConfigError(format!("unknown attack mode `{}`", a.mode)))?;
    if a.budget == 0 || a.inputs == 0 {
        bail!(ConfigError("attack budget and input count must be positive".into()));
    }
    if !(a.alpha > 0.0) {
        bail!(ConfigError(format!("attack scale must be positive, got {}", a.alpha)));
    }
    let m = load_model(c, ModelKind::Mlp)?;
    let g = &m.graph;
    let logits = *g.outputs().first().ok_or_else(|| ConfigError("graph has no outputs".into()))?;
    if g.shape(logits).len() != 1 {
        bail!(ConfigError("attacks need a classifier with a single 1-D logits output".into()));
    }
    let profiles = c.calibration.profiles.iter().map(|p| profile(p)).collect::<Result<Vec<_>>>()?;
    let envelope = match &c.paths.thresholds {
        Some(_) => load_thresholds(c)?.rescaled(1.0)?,
        None => {
            let data = m.sample_inputs(&mut Rng::new(c.seeds.data), c.calibration.dataset_size.max(1));
            calibrate_graph(g, &data, &profiles, &PercentileGrid::default(), c.calibration.epsilon)
                .map_err(|e| ConfigError(e.to_string()))?
                .thresholds(g, 1.0)?
        }
    };
    let data = m.sample_inputs(&mut Rng::new(c.seeds.attack).fork(1), a.inputs);
    let cfg = EvalConfig {
        cells: vec![(mode, a.alpha)],
        buckets: a.buckets,
        pgd: PgdConfig {
            budget: a.budget,
            ..PgdConfig::default()
        },
        seed: c.seeds.attack,
        inject: None,
        profile: profile(&a.profile)?.id,
    };
    let pairs = attack_pairs(g, logits, &data, a.buckets, cfg.seed)?;
    let results = run_cell(g, logits, &data, &pairs, mode, a.alpha, Some(&envelope), &cfg)?;
    let (fires, runs) = false_positive_rate(g, &envelope.rescaled(a.alpha)?, &data, &profiles)?;
    let rows = summarize_cell(mode, a.alpha, &results, a.buckets, Some(100.0 * fires as f64 / runs as f64));
    emit(c, "attack.csv", &csv_rows(&rows))
}

pub fn bench(c: &RunConfig, sizes: &[usize], sites: usize) -> Result<()> {
    if sizes.iter().any(|&n| n < 2) || sites == 0 {
        bail!(ConfigError("split sizes must be at least 2 and sites positive".into()));
    }
    let base = c.protocol_params()?;
    let m = load_model(c, ModelKind::Chain)?;
    let g = &m.graph;
    let th = match &c.paths.thresholds {
        Some(_) => load_thresholds(c)?,
        None => {
            let data = m.sample_inputs(&mut Rng::new(c.seeds.data), c.calibration.dataset_size.max(1));
            calibrate_graph(g, &data, &base.profiles(), &PercentileGrid::default(), c.calibration.epsilon)
                .map_err(|e| ConfigError(e.to_string()))?
                .thresholds(g, c.calibration.alpha)?
        }
    };
    let contract = Contract::new(g.clone(), th).map_err(|e| ConfigError(e.to_string()))?;
    let x = request_input(c, &m)?;
    let mut rng = Rng::new(c.seeds.attack).fork(2);
    let nodes: Vec<usize> = (0..sites).map(|_| rng.below(g.len())).collect();
    let mut s = String::from(
        "n,nodes,disputes,localized,rounds_mean,rounds_max,merkle_checks_mean,cost_ratio_min,cost_ratio_mean,cost_ratio_max,ms_per_round\n",
    );
    for &n in sizes {
        let params = tolver_core::protocol::ProtocolParams { n, ..base.clone() };
        let mut rounds = vec![];
        let mut checks = vec![];
        let mut ratios = vec![];
        let mut localized = 0;
        let t0 = Instant::now();
        for &v in &nodes {
            let spec = format!("node={v},scale=10");
            let sc = Scenario::new(x.clone(), params.clone()).with_injections(vec![injection(&spec, g, contract.thresholds())?]);
            let r = run_dispute(&contract, &sc)?;
            localized += (r.state.leaf == Some(v)) as usize;
            rounds.push(r.state.selections.len() as f64);
            checks.push(merkle_checks(&r.ledger) as f64);
            ratios.push(dcr(g, &r.state)?.ratio);
        }
        let secs = t0.elapsed().as_secs_f64();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let total_rounds: f64 = rounds.iter().sum();
        let _ = writeln!(
            s,
            "{n},{},{},{localized},{:.2},{},{:.1},{:.3},{:.3},{:.3},{:.3}",
            g.len(),
            nodes.len(),
            mean(&rounds),
            rounds.iter().copied().fold(0.0, f64::max),
            mean(&checks),
            ratios.iter().copied().fold(f64::INFINITY, f64::min),
            mean(&ratios),
            ratios.iter().copied().fold(0.0, f64::max),
            1e3 * secs / total_rounds.max(1.0)
        );
    }
    emit(c, "bench.csv", &s)
}
