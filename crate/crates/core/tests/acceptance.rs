//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use fedrl::coordinator::{deserialize_bundle, run_round, serialize_bundle, EpochMessage};
use fedrl::expcli::{build_federation, read_metrics, run_experiment, run_onboarding, EpochMetrics, RunConfig};
use fedrl::federation::{fedavg_aggregate, fedformer_q_forward, fedmlp_q_forward, FedMlpQNet, Strategy};
use fedrl::nets::{
    attention_layer, check_graph_gradients, Graph, MlpSpec, NormMode, Tensor, TensorBundle, TransformerSpec,
};
use fedrl::sac::{critic_graph, critic_loss, policy_graph, policy_loss, soft_target_update, QNet};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn oracles() -> Outcome {
    let mut worst = 0.0f64;
    let mut rel = |a: f64, b: f64| {
        let e = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        worst = worst.max(e);
        e <= 1e-6
    };
    for seed in 0..5 {
        for (n, bn) in [(1, false), (2, false), (2, true)] {
            let net = scrambled_fedformer(n, n - 1, bn, seed);
            let (obs, act) = ([0.4, -0.3, 0.8], [0.1, -0.6]);
            let (got, want) = (fedformer_q_forward(&net, &obs, &act).unwrap(), fedformer_oracle(&net, &obs, &act));
            ensure!(rel(got, want), "fedformer n={n}: {got} vs {want}");
        }
        let mut r = rng(seed);
        let mut m = FedMlpQNet::new(1, tiny_fedmlp_spec(vec![0, 1], true), &mut r).unwrap();
        scramble(&mut m.params, &mut r, 0.8);
        for e in m.external_encoders.iter_mut() {
            scramble(&mut e.params, &mut r, 0.8);
        }
        let (got, want) = (fedmlp_q_forward(&m, &[0.2, 0.1, -0.5], &[0.3, 0.3]).unwrap(), fedmlp_oracle(&m, &[0.2, 0.1, -0.5], &[0.3, 0.3]));
        ensure!(rel(got, want), "fedmlp: {got} vs {want}");
        for (kind, bn) in [("mlp", true), ("fedformer", false)] {
            let st = tiny_state(kind, seed, bn);
            let batch = random_batch(&mut r, 3, 3, 2);
            let noise = random_mat(&mut r, 3, 2, 1.5);
            let got = critic_loss(&batch, &st, &noise).unwrap().loss;
            let want = critic_loss_oracle(&st, &batch, &noise).0;
            ensure!(rel(got, want), "critic {kind}: {got} vs {want}");
            let got = policy_loss(&batch, &st, &noise).unwrap().loss;
            let want = policy_loss_oracle(&st, &batch, &noise);
            ensure!(rel(got, want), "policy {kind}: {got} vs {want}");
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

fn vec_bundle(v: &[f32]) -> TensorBundle {
    let mut b = TensorBundle::new();
    b.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
    b
}

fn fedavg_exactness() -> Outcome {
    let (a, b) = (vec_bundle(&[1.0, 3.0]), vec_bundle(&[3.0, 1.0]));
    ensure!(fedavg_aggregate(&[(&a, 7)]).unwrap() == a, "single participant");
    ensure!(fedavg_aggregate(&[(&a, 5), (&b, 5)]).unwrap() == vec_bundle(&[2.0, 2.0]), "plain mean");
    let (c, d) = (vec_bundle(&[0.0]), vec_bundle(&[4.0]));
    ensure!(fedavg_aggregate(&[(&c, 1), (&d, 3)]).unwrap() == vec_bundle(&[3.0]), "size weights");

    let mut r = rng(2024);
    for case in 0..200 {
        let len = r.random_range(1..40);
        let n = r.random_range(1..6);
        let members: Vec<(TensorBundle, u64)> = (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..len).map(|_| r.random_range(-2.0f32..2.0)).collect();
                (vec_bundle(&v), r.random_range(1..500))
            })
            .collect();
        let copies: Vec<_> = members.iter().map(|(_, k)| (&members[0].0, *k)).collect();
        let same = fedavg_aggregate(&copies).unwrap();
        for (x, y) in same.get("w").unwrap().data().iter().zip(members[0].0.get("w").unwrap().data()) {
            ensure!((x - y).abs() as f64 <= 1e-6 * (y.abs() as f64).max(1.0), "idempotence case {case}");
        }
        let (s, c) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let mapped: Vec<TensorBundle> = members
            .iter()
            .map(|(b, _)| vec_bundle(&b.get("w").unwrap().data().iter().map(|&v| (s * v as f64 + c) as f32).collect::<Vec<_>>()))
            .collect();
        let lhs = fedavg_aggregate(&mapped.iter().zip(&members).map(|(b, (_, k))| (b, *k)).collect::<Vec<_>>()).unwrap();
        let base = fedavg_aggregate(&members.iter().map(|(b, k)| (b, *k)).collect::<Vec<_>>()).unwrap();
        for (x, y) in lhs.get("w").unwrap().data().iter().zip(base.get("w").unwrap().data()) {
            let want = s * *y as f64 + c;
            ensure!((*x as f64 - want).abs() <= 1e-6 * want.abs().max(1.0), "affine case {case}: {x} vs {want}");
        }
    }
    Ok("hand examples exact; 200 idempotence + affine cases".into())
}

fn frozen_externals(base_fedformer: &Path) -> Outcome {
    let mut worst = 0.0f64;
    for pass in 0..100u64 {
        let net = scrambled_fedformer(3, (pass % 3) as usize, pass % 2 == 0, pass);
        let mut r = rng(pass);
        let mut g = Graph::new();
        let bound = g.bind(&net.params, true);
        let ext = net.bind_externals(&mut g);
        let (o, a) = (g.constant(random_mat(&mut r, 3, 3, 1.0)), g.constant(random_mat(&mut r, 3, 2, 1.0)));
        let (q, _) = net.graph_with_externals(&mut g, &bound, &ext, o, a, NormMode::Train);
        let sq = g.mul(q, q);
        let loss = g.mean(sq);
        let grads = g.backward(loss);
        for b in &ext {
            for m in b.grads(&grads).into_iter().flatten() {
                worst = worst.max(m.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())));
            }
        }
    }
    ensure!(worst == 0.0, "external gradient magnitude {worst}");

    // Ten epochs of onboarded training against the saved encoders of a finished run.
    use fedrl::coordinator::{latest_checkpoint, load_encoders};
    use fedrl::expcli::build::{build_agent, fedformer_spec};
    let cfg = RunConfig::load(&base_fedformer.join("config.toml")).map_err(|e| e.to_string())?;
    let sdir = base_fedformer.join(format!("seed_{}", cfg.seeds[0]));
    let saved = load_encoders(&sdir, latest_checkpoint(&sdir).ok_or("no checkpoint")?).map_err(|e| e.to_string())?;
    let id = saved.len();
    let spec = fedformer_spec(&cfg, id + 1).map_err(|e| e.to_string())?;
    let mut r = rng(5);
    let q1 = QNet::FedFormer(fedrl::federation::onboard_agent(&saved, spec.clone(), &mut r).unwrap());
    let q2 = QNet::FedFormer(fedrl::federation::onboard_agent(&saved, spec, &mut r).unwrap());
    let mut envs = fedrl::expcli::sample_assignments(&cfg, 77).unwrap().remove(0);
    envs.agent_id = id;
    let mut agent = build_agent(&cfg, 0, id, q1, q2, &envs).map_err(|e| e.to_string())?;
    for _ in 0..10 {
        agent.train_epoch().map_err(|e| e.to_string())?;
    }
    for q in [&agent.state.q1, &agent.state.q2, &agent.state.target_q1, &agent.state.target_q2] {
        ensure!(q.externals().len() == saved.len(), "external count changed");
        for e in q.externals() {
            ensure!(e.params.bit_eq(&saved[&e.agent_id]), "external {} drifted", e.agent_id);
        }
    }
    Ok("100 backward passes: max |grad| = 0; 10 onboarded epochs: externals bit-identical".into())
}

fn attention_invariants() -> Outcome {
    let spec = TransformerSpec::new(1, 4, 8).unwrap();
    let mut r = rng(3);
    let mut worst_row = 0.0f64;
    for n in 1..=6 {
        let mut params = spec.init(&mut r).unwrap();
        scramble(&mut params, &mut r, 2.0);
        let (_, probs) = attention_layer(&random_mat(&mut r, n, 8, 3.0), &params, &spec).unwrap();
        for row in probs.chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst_row <= 1e-6, "row sum off by {worst_row}");
    let mut net = scrambled_fedformer(5, 2, true, 77);
    let (obs, act) = ([0.1, 0.7, -0.4], [0.2, -0.9]);
    let base = fedformer_q_forward(&net, &obs, &act).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        net.external_encoders.shuffle(&mut r);
        let q = fedformer_q_forward(&net, &obs, &act).unwrap();
        worst = worst.max((q - base).abs() / base.abs().max(1.0));
    }
    ensure!(worst <= 1e-6, "permutation changed Q by {worst}");
    Ok(format!("row-sum error {worst_row:.1e}; permutation drift {worst:.1e}"))
}

fn gradient_checks() -> Outcome {
    let tol = 1e-3;
    let readout = |g: &mut Graph, out: fedrl::nets::Var, seed: u64| {
        let v = g.value(out).clone();
        let w = g.constant(random_mat(&mut rng(seed), v.rows, v.cols, 1.0));
        let p = g.mul(out, w);
        let sq = g.mul(p, p);
        g.mean(sq)
    };
    let mut reports = Vec::new();

    let tspec = TransformerSpec::new(2, 2, 4).unwrap();
    let mut r = rng(1);
    let mut tp = tspec.init(&mut r).unwrap();
    scramble(&mut tp, &mut r, 0.6);
    let x = random_mat(&mut r, 6, 4, 1.0);
    reports.push(("transformer", check_graph_gradients(&tp, |g, b| {
        let xv = g.constant(x.clone());
        let o = tspec.graph(g, b, "", xv, 3);
        readout(g, o, 2)
    }, tol, 3)));

    let espec = MlpSpec::new(5, vec![6, 4], true);
    let mut ep = espec.init(&mut r, None).unwrap();
    scramble(&mut ep, &mut r, 0.8);
    let x = random_mat(&mut r, 3, 5, 1.0);
    reports.push(("encoder", check_graph_gradients(&ep, |g, b| {
        let xv = g.constant(x.clone());
        let (o, _) = espec.graph(g, b, "", xv, NormMode::Train);
        readout(g, o, 4)
    }, tol, 5)));

    let net = scrambled_fedformer(3, 1, false, 8);
    let dspec = net.spec.decoder.clone();
    let dp = net.params.extract_prefix("dec.");
    let x = random_mat(&mut r, 3, dspec.input_dim, 1.0);
    reports.push(("decoder", check_graph_gradients(&dp, |g, b| {
        let xv = g.constant(x.clone());
        let (o, _) = dspec.graph(g, b, "", xv, NormMode::Train);
        readout(g, o, 6)
    }, tol, 7)));

    let p = tiny_policy(14);
    let (obs, noise) = (random_mat(&mut r, 3, 3, 1.0), random_mat(&mut r, 3, 2, 1.0));
    reports.push(("policy", check_graph_gradients(&p.params, |g, b| {
        let o = g.constant(obs.clone());
        let s = p.sample_graph(g, b, o, &noise);
        let a = readout(g, s.action, 8);
        let lp = g.mean(s.log_prob);
        g.add(a, lp)
    }, tol, 9)));

    let st = tiny_state("fedformer", 20, false);
    let batch = random_batch(&mut r, 3, 3, 2);
    reports.push(("critic loss", check_graph_gradients(st.q1.params(), |g, b| {
        let q2 = g.bind(st.q2.params(), true);
        critic_graph(g, &st, &batch, &noise, b, &q2).unwrap().loss
    }, tol, 10)));
    reports.push(("policy loss", check_graph_gradients(&st.policy.params, |g, b| {
        policy_graph(g, &st, &batch, &noise, b).unwrap().0
    }, tol, 11)));

    let mut parts = Vec::new();
    for (name, rep) in &reports {
        ensure!(rep.passed && rep.coords_checked > 0, "{name}: {rep:?}");
        parts.push(format!("{name} {:.1e}", rep.max_rel_error));
    }
    Ok(parts.join(", "))
}

fn target_exclusion() -> Outcome {
    for strategy in [Strategy::FedFormer, Strategy::FedMLP, Strategy::FedAvg, Strategy::FedWeightedAvg] {
        let (mut fed, _) = build_federation(&tiny_config(strategy, 3), 2).map_err(|e| e.to_string())?;
        let stats: Vec<_> = fed.agents.iter_mut().map(|a| a.train_epoch().unwrap()).collect();
        let before: Vec<_> = fed.agents.iter().map(|a| (a.state.target_q1.clone(), a.state.target_q2.clone())).collect();
        let msgs: Vec<_> = fed
            .agents
            .iter()
            .zip(&stats)
            .map(|(a, s)| EpochMessage::from_agent(a, 0, s, strategy, &fed.options).unwrap())
            .collect();
        run_round(&mut fed.agents, &msgs, 0, strategy, &fed.options).map_err(|e| e.to_string())?;
        for (a, (t1, t2)) in fed.agents.iter().zip(&before) {
            ensure!(a.state.target_q1 == *t1 && a.state.target_q2 == *t2, "{strategy:?} touched a target");
        }
    }
    for tau in [0.005, 1.0] {
        let mut st = tiny_state("fedformer", 3, true);
        st.hyper.tau = tau;
        let (t, l) = (st.target_q1.params().clone(), st.q1.params().clone());
        soft_target_update(&mut st);
        for ((_, got), ((_, tv), (_, lv))) in st.target_q1.params().entries().iter().zip(t.entries().iter().zip(l.entries())) {
            for ((&g, &a), &b) in got.data().iter().zip(tv.data()).zip(lv.data()) {
                let want = ((1.0 - tau) * a as f64 + tau * b as f64) as f32;
                ensure!(g.to_bits() == want.to_bits(), "tau {tau}: {g} vs {want}");
            }
        }
        if tau == 1.0 {
            ensure!(st.target_q1.params().bit_eq(st.q1.params()), "tau 1 is not a copy");
        }
    }
    let mut t = vec_bundle(&[0.0]);
    fedrl::sac::polyak(&mut t, &vec_bundle(&[1.0]), 0.005);
    ensure!(t.get("w").unwrap().data()[0] == 0.005, "0 -> 1 at tau 0.005");
    Ok("targets bit-identical across rounds of all exchanging strategies; polyak exact".into())
}

fn overhead(b: &TensorBundle) -> usize {
    10 + b.entries().iter().map(|(n, t)| 2 + n.len() + 1 + 4 * t.shape().len()).sum::<usize>()
}

fn wire_format() -> Outcome {
    let mut r = rng(7);
    for case in 0..1000 {
        let mut b = TensorBundle::new();
        for i in 0..r.random_range(0..6) {
            let shape: Vec<usize> = (0..r.random_range(0..4)).map(|_| r.random_range(0..5)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.random_range(-1e6f32..1e6)).collect();
            b.insert(format!("layer{i}.w"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let back = deserialize_bundle(&serialize_bundle(&b)).map_err(|e| e.to_string())?;
        ensure!(back.bit_eq(&b), "round trip case {case}");
    }
    let mut identities = Vec::new();
    for n in [2, 3, 5] {
        let (mut fed, _) = build_federation(&tiny_config(Strategy::FedFormer, n), 1).map_err(|e| e.to_string())?;
        let l = fed.run_epoch().map_err(|e| e.to_string())?.ledger;
        ensure!(l.total_download() == (n as u64 - 1) * l.total_upload(), "n={n}: {} vs {}", l.total_download(), l.total_upload());
        for a in &fed.agents {
            let m = EpochMessage::from_agent(a, 1, &Default::default(), Strategy::FedFormer, &fed.options).unwrap();
            ensure!(m.byte_size as usize == 4 * m.payload.num_values() + overhead(&m.payload), "payload size");
        }
        identities.push(format!("N={n}: {}↓ = {}×{}↑", l.total_download(), n - 1, l.total_upload()));
    }
    Ok(format!("1000 round trips; {}", identities.join("; ")))
}

/// Settings for the directional training checks.
fn desk_config(strategy: Strategy, out: &Path) -> RunConfig {
    RunConfig {
        strategy,
        num_agents: 3,
        epochs: 40,
        gradient_steps_per_epoch: 100,
        batch_size: 64,
        path_length: 50,
        warmup_steps: 500,
        seeds: vec![0, 1, 2],
        tau: 0.05,
        initial_log_alpha: -2.3,
        policy_lr: 1e-3,
        q_lr: 1e-3,
        policy_hidden: vec![32, 32],
        q_hidden: vec![32, 32],
        encoder_hidden: vec![32, 32],
        decoder_hidden: vec![32],
        aggregator_hidden: vec![32],
        transformer_layers: 2,
        transformer_heads: 4,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Mean test return over agents, per seed, at `epoch`.
fn per_seed(rows: &[EpochMetrics], epoch: u64) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.epoch == epoch) {
        let e = acc.entry(r.seed).or_default();
        e.0 += r.avg_test_return;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
}

fn mean(m: &BTreeMap<u64, f64>) -> f64 {
    m.values().sum::<f64>() / m.len() as f64
}

fn desk_learning(out: &Path, runs: &mut BTreeMap<Strategy, PathBuf>) -> Outcome {
    let mut lines = Vec::new();
    let mut finals = BTreeMap::new();
    let mut failures = Vec::new();
    for strategy in Strategy::ALL {
        let started = Instant::now();
        let metrics = run_experiment(&desk_config(strategy, out), false).map_err(|e| e.to_string())?;
        runs.insert(strategy, metrics.parent().unwrap().to_path_buf());
        let rows = read_metrics(&metrics).map_err(|e| e.to_string())?;
        let (first, last) = (per_seed(&rows, 1), per_seed(&rows, 40));
        if mean(&last) <= mean(&first) {
            failures.push(format!("{strategy:?} did not improve"));
        }
        lines.push(format!(
            "{}: {:.1} -> {:.1} ({:.0}s)",
            strategy.name(),
            mean(&first),
            mean(&last),
            started.elapsed().as_secs_f64()
        ));
        finals.insert(strategy, last);
    }
    let wins = finals[&Strategy::FedFormer]
        .iter()
        .filter(|(s, v)| **v >= finals[&Strategy::FedAvg][s])
        .count();
    lines.push(format!("FedFormer >= FedAvg in {wins}/3 seeds"));
    if wins < 2 {
        failures.push("FedFormer behind FedAvg in more than one seed".into());
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{}; {}", failures.join(", "), lines.join("; ")))
    }
}

fn onboarding(base: &Path) -> Outcome {
    let cfg = RunConfig::load(&base.join("config.toml")).map_err(|e| e.to_string())?;
    let report = run_onboarding(base, cfg.onboard_env_seed, &cfg).map_err(|e| e.to_string())?;
    let rows = read_metrics(&report.metrics).map_err(|e| e.to_string())?;
    ensure!(rows.iter().all(|r| r.upload_bytes == 0 && r.download_bytes == 0), "onboarding communicated");
    let mut faster = 0;
    let mut parts = Vec::new();
    for o in &report.outcomes {
        let win = match (o.onboarded_epochs, o.scratch_epochs) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        faster += win as usize;
        parts.push(format!(
            "seed {}: onboarded {:?} vs scratch {:?} (threshold {:.1})",
            o.seed, o.onboarded_epochs, o.scratch_epochs, o.threshold
        ));
    }
    let msg = format!("faster in {faster}/{}; {}", report.outcomes.len(), parts.join("; "));
    ensure!(faster >= 2, "{msg}");
    Ok(msg)
}

fn scaling() -> Outcome {
    let mut sizes = BTreeMap::new();
    for n in [5usize, 10, 15] {
        let cfg = tiny_config(Strategy::FedFormer, n);
        let (fed, _) = build_federation(&cfg, 0).map_err(|e| e.to_string())?;
        let QNet::FedFormer(net) = &fed.agents[0].state.q1 else { return Err("not FedFormer".into()) };
        ensure!(net.external_encoders.len() == n - 1, "n={n}: {} externals", net.external_encoders.len());
        let ids = net.params.get("emb.ids").unwrap().len();
        sizes.insert(n, (net.spec.num_trainable_params(), ids));
    }
    let rest: Vec<usize> = sizes.values().map(|(all, ids)| all - ids).collect();
    ensure!(rest.iter().all(|&r| r == rest[0]), "non-ID parameters vary: {rest:?}");
    let d = tiny_config(Strategy::FedFormer, 5).transformer_width();
    ensure!(sizes.iter().all(|(n, (_, ids))| *ids == n * d), "ID table rows");
    let (mut fed, _) = build_federation(&tiny_config(Strategy::FedFormer, 15), 0).map_err(|e| e.to_string())?;
    fed.run_epoch().map_err(|e| e.to_string())?;
    Ok(format!("trainable params {:?}; one epoch at N=15 ok", sizes.values().map(|v| v.0).collect::<Vec<_>>()))
}

fn determinism() -> Outcome {
    for strategy in Strategy::ALL {
        let mut files = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                out_dir: dir.path().to_path_buf(),
                seeds: vec![0, 1],
                epochs: 4,
                ..tiny_config(strategy, 3)
            };
            files.push(fs::read(run_experiment(&cfg, false).map_err(|e| e.to_string())?).unwrap());
        }
        ensure!(files[0] == files[1], "{strategy:?} metrics differ between runs");
    }
    Ok("two runs per strategy gave byte-identical metrics".into())
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = BTreeMap::new();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d.clone()),
            Err(d) => ("FAIL", d.clone()),
        };
        println!("{tag} [{id:>2}] {name} ({secs:.1}s): {detail}");
        results.push((id, name, out, secs));
    };
    run(1, "equation oracles", &mut oracles);
    run(2, "fedavg exactness", &mut fedavg_exactness);
    run(4, "attention invariants", &mut attention_invariants);
    run(5, "gradient checks", &mut gradient_checks);
    run(6, "target exclusion", &mut target_exclusion);
    run(7, "wire format and ledger", &mut wire_format);
    run(8, "desk-scale learning", &mut || desk_learning(tmp.path(), &mut runs));
    let base = runs.get(&Strategy::FedFormer).cloned();
    run(3, "frozen externals", &mut || match &base {
        Some(b) => frozen_externals(b),
        None => Err("no FedFormer base run".into()),
    });
    run(9, "onboarding", &mut || match &base {
        Some(b) => onboarding(b),
        None => Err("no FedFormer base run".into()),
    });
    run(10, "scaling shape", &mut scaling);
    run(11, "determinism", &mut determinism);

    results.sort_by_key(|r| r.0);
    println!("---");
    for (id, name, out, secs) in &results {
        println!("{} [{id:>2}] {name} ({secs:.1}s)", if out.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
