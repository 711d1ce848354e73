//! Straight-line reference implementations and fixtures shared by the
//! integration tests. Nothing here goes through the autodiff tape: every
//! quantity is recomputed with plain loops over the named weights.

#![allow(dead_code)]

use fedrl::federation::{FedFormerSpec, FedMlpQNet, FedMlpSpec, FederatedQNet};
use fedrl::nets::{Mat, PolicyNet, PolicySpec, Tensor, TensorBundle, TransformerSpec};
use fedrl::sac::{Batch, MlpQNet, MlpQSpec, QNet, SacHyper, SacState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn get(b: &TensorBundle, name: &str) -> Vec<f64> {
    b.get(name)
        .unwrap_or_else(|| panic!("missing tensor {name}"))
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn has(b: &TensorBundle, name: &str) -> bool {
    b.get(name).is_some()
}

/// `x · W + b` with W stored row-major as fan_in × fan_out.
pub fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    assert_eq!(w.len(), x.len() * out);
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Feed-forward stack `prefix l0, l1, ...` with ReLU between layers and batch
/// norm from running statistics when present.
pub fn mlp_eval(b: &TensorBundle, prefix: &str, input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut k = 0;
    while has(b, &format!("{prefix}l{k}.weight")) {
        x = linear(&x, &get(b, &format!("{prefix}l{k}.weight")), &get(b, &format!("{prefix}l{k}.bias")));
        if !has(b, &format!("{prefix}l{}.weight", k + 1)) {
            break;
        }
        if has(b, &format!("{prefix}bn{k}.gamma")) {
            let g = get(b, &format!("{prefix}bn{k}.gamma"));
            let be = get(b, &format!("{prefix}bn{k}.beta"));
            let m = get(b, &format!("{prefix}bn{k}.running_mean"));
            let v = get(b, &format!("{prefix}bn{k}.running_var"));
            x = (0..x.len()).map(|j| (x[j] - m[j]) / (v[j] + EPS).sqrt() * g[j] + be[j]).collect();
        }
        x = relu(&x);
        k += 1;
    }
    x
}

/// As [`mlp_eval`] on a whole batch, normalising hidden layers with the
/// batch's own mean and biased variance.
pub fn mlp_train(b: &TensorBundle, prefix: &str, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut xs = inputs.to_vec();
    let mut k = 0;
    while has(b, &format!("{prefix}l{k}.weight")) {
        let w = get(b, &format!("{prefix}l{k}.weight"));
        let bias = get(b, &format!("{prefix}l{k}.bias"));
        xs = xs.iter().map(|x| linear(x, &w, &bias)).collect();
        if !has(b, &format!("{prefix}l{}.weight", k + 1)) {
            break;
        }
        if has(b, &format!("{prefix}bn{k}.gamma")) {
            let g = get(b, &format!("{prefix}bn{k}.gamma"));
            let be = get(b, &format!("{prefix}bn{k}.beta"));
            let n = xs.len() as f64;
            for j in 0..g.len() {
                let mean = xs.iter().map(|x| x[j]).sum::<f64>() / n;
                let var = xs.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
                for x in xs.iter_mut() {
                    x[j] = (x[j] - mean) / (var + EPS).sqrt() * g[j] + be[j];
                }
            }
        }
        xs = xs.iter().map(|x| relu(x)).collect();
        k += 1;
    }
    xs
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (0..x.len()).map(|j| (x[j] - mean) / (var + EPS).sqrt() * g[j] + b[j]).collect()
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// One encoder block on a set of tokens. Returns outputs and attention
/// probabilities indexed `[head][query][key]`.
pub fn block(tokens: &[Vec<f64>], b: &TensorBundle, prefix: &str, heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let p = |n: &str| get(b, &format!("{prefix}{n}"));
    let proj = |which: &str, xs: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (w, bb) = (p(&format!("w{which}")), p(&format!("b{which}")));
        xs.iter().map(|x| linear(x, &w, &bb)).collect()
    };
    let (q, k, v) = (proj("q", tokens), proj("k", tokens), proj("v", tokens));
    let d = tokens[0].len();
    let dh = d / heads;
    let n = tokens.len();
    let mut concat = vec![vec![0.0; d]; n];
    let mut probs = Vec::new();
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let mut ph = Vec::new();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let a = softmax(&scores);
            for j in 0..n {
                for c in r.clone() {
                    concat[i][c] += a[j] * v[j][c];
                }
            }
            ph.push(a);
        }
        probs.push(ph);
    }
    let o = proj("o", &concat);
    let h1: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let res: Vec<f64> = tokens[i].iter().zip(&o[i]).map(|(a, b)| a + b).collect();
            layer_norm(&res, &p("ln1.gamma"), &p("ln1.beta"))
        })
        .collect();
    let out = h1
        .iter()
        .map(|h| {
            let f = relu(&linear(h, &p("ff1.weight"), &p("ff1.bias")));
            let f = linear(&f, &p("ff2.weight"), &p("ff2.bias"));
            let res: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
            layer_norm(&res, &p("ln2.gamma"), &p("ln2.beta"))
        })
        .collect();
    (out, probs)
}

pub fn transformer(tokens: &[Vec<f64>], b: &TensorBundle, prefix: &str, spec: &TransformerSpec) -> Vec<Vec<f64>> {
    (0..spec.layers).fold(tokens.to_vec(), |t, l| block(&t, b, &format!("{prefix}b{l}."), spec.heads).0)
}

fn row(b: &TensorBundle, name: &str, r: usize, d: usize) -> Vec<f64> {
    get(b, name)[r * d..(r + 1) * d].to_vec()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Q(s, a) for the attention-based network, evaluation mode.
pub fn fedformer_oracle(net: &FederatedQNet, obs: &[f64], act: &[f64]) -> f64 {
    let p = &net.params;
    let d = net.spec.transformer.model_dim;
    let x: Vec<f64> = obs.iter().chain(act).copied().collect();
    let local = mlp_eval(p, "local.", &x);
    let mut tokens = vec![add(&local, &row(p, "emb.ids", net.agent_id, d))];
    for e in &net.external_encoders {
        tokens.push(add(&mlp_eval(&e.params, "", &x), &row(p, "emb.ids", e.agent_id, d)));
    }
    tokens.push(get(p, "emb.cls"));
    let out = transformer(&tokens, p, "tf.", &net.spec.transformer);
    let dec_in: Vec<f64> = out.last().unwrap().iter().chain(&local).copied().collect();
    mlp_eval(p, "dec.", &dec_in)[0]
}

pub fn fedmlp_oracle(net: &FedMlpQNet, obs: &[f64], act: &[f64]) -> f64 {
    let p = &net.params;
    let x: Vec<f64> = obs.iter().chain(act).copied().collect();
    let local = mlp_eval(p, "local.", &x);
    let mut joined = Vec::new();
    for &id in &net.spec.agent_order {
        if id == net.agent_id {
            joined.extend(&local);
        } else {
            let e = net.external_encoders.iter().find(|e| e.agent_id == id).unwrap();
            joined.extend(mlp_eval(&e.params, "", &x));
        }
    }
    let agg = mlp_eval(p, "agg.", &joined);
    let dec_in: Vec<f64> = agg.iter().chain(&local).copied().collect();
    mlp_eval(p, "dec.", &dec_in)[0]
}

/// Q-value of a whole batch. Training mode only matters for batch norm.
pub fn q_oracle(q: &QNet, obs: &[Vec<f64>], act: &[Vec<f64>], train: bool) -> Vec<f64> {
    match q {
        QNet::Mlp(m) => {
            let xs: Vec<Vec<f64>> = obs.iter().zip(act).map(|(o, a)| o.iter().chain(a).copied().collect()).collect();
            if train {
                mlp_train(&m.params, "", &xs).iter().map(|v| v[0]).collect()
            } else {
                xs.iter().map(|x| mlp_eval(&m.params, "", x)[0]).collect()
            }
        }
        QNet::FedFormer(f) => obs.iter().zip(act).map(|(o, a)| fedformer_oracle(f, o, a)).collect(),
        QNet::FedMlp(f) => obs.iter().zip(act).map(|(o, a)| fedmlp_oracle(f, o, a)).collect(),
    }
}

pub struct PolicyDraw {
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Squashed Gaussian draw for one observation and one noise vector.
pub fn policy_oracle(p: &PolicyNet, obs: &[f64], noise: &[f64]) -> PolicyDraw {
    let h = relu(&mlp_eval(&p.params, "trunk.", obs));
    let mean = linear(&h, &get(&p.params, "mean.weight"), &get(&p.params, "mean.bias"));
    let ls = linear(&h, &get(&p.params, "log_std.weight"), &get(&p.params, "log_std.bias"));
    let mut action = Vec::new();
    let mut log_prob = 0.0;
    for j in 0..mean.len() {
        let log_std = ls[j].clamp(-20.0, 2.0);
        let u = mean[j] + log_std.exp() * noise[j];
        let a = u.tanh();
        log_prob += -0.5 * noise[j] * noise[j] - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_prob -= (1.0 - a * a + 1e-6).ln();
        action.push(a);
    }
    PolicyDraw { action, log_prob }
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// Twin-critic loss: targets from evaluation-mode target networks and the
/// current policy at s', live critics in training mode.
pub fn critic_loss_oracle(state: &SacState, batch: &Batch, next_noise: &Mat) -> (f64, Vec<f64>) {
    let alpha = state.alpha();
    let next_obs = rows(&batch.next_obs);
    let draws: Vec<PolicyDraw> = next_obs
        .iter()
        .zip(rows(next_noise))
        .map(|(o, n)| policy_oracle(&state.policy, o, &n))
        .collect();
    let next_act: Vec<Vec<f64>> = draws.iter().map(|d| d.action.clone()).collect();
    let t1 = q_oracle(&state.target_q1, &next_obs, &next_act, false);
    let t2 = q_oracle(&state.target_q2, &next_obs, &next_act, false);
    let y: Vec<f64> = (0..batch.len())
        .map(|i| {
            let soft = t1[i].min(t2[i]) - alpha * draws[i].log_prob;
            batch.reward[i] + state.hyper.gamma * (1.0 - batch.done[i]) * soft
        })
        .collect();
    let obs = rows(&batch.obs);
    let act = rows(&batch.action);
    let mse = |q: Vec<f64>| q.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    let loss = mse(q_oracle(&state.q1, &obs, &act, true)) + mse(q_oracle(&state.q2, &obs, &act, true));
    (loss, y)
}

pub fn policy_loss_oracle(state: &SacState, batch: &Batch, noise: &Mat) -> f64 {
    let alpha = state.alpha();
    let obs = rows(&batch.obs);
    let draws: Vec<PolicyDraw> = obs
        .iter()
        .zip(rows(noise))
        .map(|(o, n)| policy_oracle(&state.policy, o, &n))
        .collect();
    let act: Vec<Vec<f64>> = draws.iter().map(|d| d.action.clone()).collect();
    let q1 = q_oracle(&state.q1, &obs, &act, false);
    let q2 = q_oracle(&state.q2, &obs, &act, false);
    (0..obs.len())
        .map(|i| alpha * draws[i].log_prob - q1[i].min(q2[i]))
        .sum::<f64>()
        / obs.len() as f64
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Randomise every value of `b` in [-scale, scale] (running variances stay positive).
pub fn scramble(b: &mut TensorBundle, r: &mut ChaCha8Rng, scale: f64) {
    for (name, t) in b.entries_mut() {
        let positive = name.ends_with("running_var");
        for v in t.data_mut() {
            let x = r.random_range(-scale..scale);
            *v = if positive { (0.5 + x.abs()) as f32 } else { x as f32 };
        }
    }
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect())
}

pub fn random_batch(r: &mut ChaCha8Rng, n: usize, obs: usize, act: usize) -> Batch {
    Batch {
        obs: random_mat(r, n, obs, 1.0),
        action: random_mat(r, n, act, 0.9),
        reward: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        next_obs: random_mat(r, n, obs, 1.0),
        done: (0..n).map(|i| if i % 3 == 2 { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn tiny_fedformer_spec(num_ids: usize, bn: bool) -> FedFormerSpec {
    FedFormerSpec::new(3, 2, vec![4, 4], TransformerSpec::new(1, 2, 4).unwrap(), vec![4], bn, num_ids).unwrap()
}

pub fn tiny_fedmlp_spec(order: Vec<usize>, bn: bool) -> FedMlpSpec {
    FedMlpSpec::new(3, 2, vec![4, 4], vec![4], vec![3], bn, order).unwrap()
}

/// FedFormer agent `id` among `n`, with every value scrambled.
pub fn scrambled_fedformer(n: usize, id: usize, bn: bool, seed: u64) -> FederatedQNet {
    let mut r = rng(seed);
    let peers: Vec<usize> = (0..n).filter(|&p| p != id).collect();
    let mut net = FederatedQNet::new(id, tiny_fedformer_spec(n, bn), &peers, &mut r).unwrap();
    scramble(&mut net.params, &mut r, 0.8);
    for e in net.external_encoders.iter_mut() {
        scramble(&mut e.params, &mut r, 0.8);
    }
    net
}

pub fn tiny_policy(seed: u64) -> PolicyNet {
    let mut r = rng(seed);
    let mut p = PolicyNet::init(
        PolicySpec {
            obs_dim: 3,
            act_dim: 2,
            hidden: vec![4, 4],
        },
        &mut r,
    )
    .unwrap();
    scramble(&mut p.params, &mut r, 0.6);
    p
}

pub fn tiny_mlp_q(seed: u64, bn: bool) -> QNet {
    let mut r = rng(seed);
    let mut q = MlpQNet::new(MlpQSpec::new(3, 2, vec![4, 4], bn).unwrap(), &mut r).unwrap();
    scramble(&mut q.params, &mut r, 0.8);
    QNet::Mlp(q)
}

/// A SAC state whose live and target networks all differ.
pub fn tiny_state(kind: &str, seed: u64, bn: bool) -> SacState {
    let mk = |s: u64| match kind {
        "fedformer" => QNet::FedFormer(scrambled_fedformer(2, 0, bn, s)),
        _ => tiny_mlp_q(s, bn),
    };
    let mut st = SacState::new(tiny_policy(seed), mk(seed + 1), mk(seed + 2), SacHyper::default()).unwrap();
    st.target_q1 = mk(seed + 3);
    st.target_q2 = mk(seed + 4);
    st.log_alpha.get_mut("log_alpha").unwrap().data_mut()[0] = -0.7;
    st
}

pub fn bundle_of(shapes: &[(&str, Vec<usize>)], r: &mut ChaCha8Rng) -> TensorBundle {
    let mut b = TensorBundle::new();
    for (name, shape) in shapes {
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-2.0f32..2.0)).collect();
        b.insert(*name, Tensor::new(shape.clone(), data).unwrap()).unwrap();
    }
    b
}

/// Run configuration small enough for an epoch to take milliseconds.
pub fn tiny_config(strategy: fedrl::federation::Strategy, agents: usize) -> fedrl::expcli::RunConfig {
    fedrl::expcli::RunConfig {
        strategy,
        num_agents: agents,
        envs_per_agent_train: 2,
        envs_per_agent_test: 1,
        epochs: 3,
        gradient_steps_per_epoch: 3,
        batch_size: 8,
        path_length: 10,
        warmup_steps: 10,
        seeds: vec![0],
        policy_hidden: vec![8],
        q_hidden: vec![8],
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        aggregator_hidden: vec![8],
        transformer_layers: 1,
        transformer_heads: 2,
        ..fedrl::expcli::RunConfig::default()
    }
}
