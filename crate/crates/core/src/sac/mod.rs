//! Soft actor-critic with twin Q-networks, Polyak-averaged targets and learned
//! entropy temperature. The Q-function is pluggable ([`QNet`]) so that every
//! federation strategy shares this loop.

pub mod qfunc;
pub mod replay;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nets::mlp::apply_norm_updates;
use crate::nets::{Adam, Bound, Graph, Mat, NormMode, NormUpdate, PolicyNet, Tensor, TensorBundle, Var};

pub use qfunc::{MlpQNet, MlpQSpec, QNet};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use trainer::{EpochStats, SacAgent, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacHyper {
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub alpha_lr: f64,
    pub auto_entropy: bool,
    /// Defaults to `-act_dim`.
    pub target_entropy: Option<f64>,
    pub initial_log_alpha: f64,
    /// Pins the temperature and disables tuning.
    pub fixed_alpha: Option<f64>,
}

impl Default for SacHyper {
    fn default() -> Self {
        SacHyper {
            gamma: 0.99,
            tau: 0.005,
            policy_lr: 3e-4,
            q_lr: 3e-4,
            alpha_lr: 3e-4,
            auto_entropy: true,
            target_entropy: None,
            initial_log_alpha: 0.0,
            fixed_alpha: None,
        }
    }
}

impl SacHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(FedError::InvalidArgument(format!("gamma must lie in [0,1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(FedError::InvalidArgument(format!("tau must lie in (0,1], got {}", self.tau)));
        }
        for (name, lr) in [("policy_lr", self.policy_lr), ("q_lr", self.q_lr), ("alpha_lr", self.alpha_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(FedError::InvalidArgument(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacState {
    pub hyper: SacHyper,
    pub policy: PolicyNet,
    pub q1: QNet,
    pub q2: QNet,
    pub target_q1: QNet,
    pub target_q2: QNet,
    /// Single entry `log_alpha`.
    pub log_alpha: TensorBundle,
    pub policy_opt: Adam,
    pub q1_opt: Adam,
    pub q2_opt: Adam,
    pub alpha_opt: Adam,
}

impl SacState {
    /// Targets start as exact copies of the live networks.
    pub fn new(policy: PolicyNet, q1: QNet, q2: QNet, hyper: SacHyper) -> Result<Self> {
        hyper.validate()?;
        q1.check_params()?;
        q1.check_compatible(&q2)?;
        if q1.obs_dim() != policy.spec.obs_dim || q1.act_dim() != policy.spec.act_dim {
            return Err(FedError::Dimension("policy and Q-function disagree on dimensions".into()));
        }
        let mut log_alpha = TensorBundle::new();
        log_alpha.insert("log_alpha", Tensor::scalar(hyper.initial_log_alpha as f32))?;
        Ok(SacState {
            policy_opt: Adam::new(hyper.policy_lr, &policy.params),
            q1_opt: Adam::new(hyper.q_lr, q1.params()),
            q2_opt: Adam::new(hyper.q_lr, q2.params()),
            alpha_opt: Adam::new(hyper.alpha_lr, &log_alpha),
            target_q1: q1.clone(),
            target_q2: q2.clone(),
            hyper,
            policy,
            q1,
            q2,
            log_alpha,
        })
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha.get("log_alpha").expect("created in new").data()[0] as f64
    }

    pub fn alpha(&self) -> f64 {
        self.hyper.fixed_alpha.unwrap_or_else(|| self.log_alpha().exp())
    }

    pub fn target_entropy(&self) -> f64 {
        self.hyper
            .target_entropy
            .unwrap_or(-(self.policy.spec.act_dim as f64))
    }
}

/// Nodes of the twin-critic objective.
pub struct CriticGraph {
    pub loss: Var,
    pub q1_loss: Var,
    pub q2_loss: Var,
    pub targets: Vec<f64>,
    pub target_q1: Bound,
    pub target_q2: Bound,
    pub q1_updates: Vec<NormUpdate>,
    pub q2_updates: Vec<NormUpdate>,
}

fn batch_consts(g: &mut Graph, batch: &Batch) -> Result<(Var, Var, Var)> {
    if batch.is_empty() {
        return Err(FedError::InvalidArgument("loss over an empty batch".into()));
    }
    Ok((
        g.constant(batch.obs.clone()),
        g.constant(batch.action.clone()),
        g.constant(batch.next_obs.clone()),
    ))
}

fn squared_error(g: &mut Graph, q: Var, y: Var) -> Var {
    let d = g.sub(q, y);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// Record `mean (Q1 − y)² + mean (Q2 − y)²` with `q1`/`q2` bound to the live
/// parameters. Target networks are bound as gradient-tracking leaves, but `y`
/// is detached, so nothing reaches them.
pub fn critic_graph(
    g: &mut Graph,
    state: &SacState,
    batch: &Batch,
    next_noise: &Mat,
    q1: &Bound,
    q2: &Bound,
) -> Result<CriticGraph> {
    let (obs, act, next_obs) = batch_consts(g, batch)?;
    let pb = g.bind(&state.policy.params, false);
    let next = state.policy.sample_graph(g, &pb, next_obs, next_noise);
    let t1b = g.bind(state.target_q1.params(), true);
    let t2b = g.bind(state.target_q2.params(), true);
    let (t1, _) = state.target_q1.graph(g, &t1b, next_obs, next.action, NormMode::Eval);
    let (t2, _) = state.target_q2.graph(g, &t2b, next_obs, next.action, NormMode::Eval);
    let tmin = g.min(t1, t2);
    let ent = g.scale(next.log_prob, state.alpha());
    let soft = g.sub(tmin, ent);

    let gamma = state.hyper.gamma;
    let (soft_v, n) = (g.value(soft).data.clone(), batch.len());
    let targets: Vec<f64> = (0..n)
        .map(|i| batch.reward[i] + gamma * (1.0 - batch.done[i]) * soft_v[i])
        .collect();
    // y is a fresh constant: no gradient path back through the target side.
    let y = g.constant(Mat::from_vec(n, 1, targets.clone()));

    let (q1v, q1_updates) = state.q1.graph(g, q1, obs, act, NormMode::Train);
    let (q2v, q2_updates) = state.q2.graph(g, q2, obs, act, NormMode::Train);
    let q1_loss = squared_error(g, q1v, y);
    let q2_loss = squared_error(g, q2v, y);
    let loss = g.add(q1_loss, q2_loss);
    Ok(CriticGraph {
        loss,
        q1_loss,
        q2_loss,
        targets,
        target_q1: t1b,
        target_q2: t2b,
        q1_updates,
        q2_updates,
    })
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss: f64,
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub targets: Vec<f64>,
    pub q1_grads: Vec<Option<Mat>>,
    pub q2_grads: Vec<Option<Mat>>,
    /// Gradients reaching the target networks' parameters (all absent by construction).
    pub target_grads: Vec<Option<Mat>>,
    pub q1_updates: Vec<NormUpdate>,
    pub q2_updates: Vec<NormUpdate>,
}

fn diagnostics(batch: &Batch) -> String {
    let (lo, hi) = batch
        .reward
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    format!(
        "batch of {} (reward range [{lo}, {hi}], finite obs: {}, finite actions: {})",
        batch.len(),
        batch.obs.is_finite() && batch.next_obs.is_finite(),
        batch.action.is_finite()
    )
}

pub fn critic_loss(batch: &Batch, state: &SacState, next_noise: &Mat) -> Result<CriticLoss> {
    let mut g = Graph::new();
    let q1b = g.bind(state.q1.params(), true);
    let q2b = g.bind(state.q2.params(), true);
    let cg = critic_graph(&mut g, state, batch, next_noise, &q1b, &q2b)?;
    let loss = g.value(cg.loss).data[0];
    if !loss.is_finite() {
        return Err(FedError::Numeric(format!("critic loss is {loss} on {}", diagnostics(batch))));
    }
    let grads = g.backward(cg.loss);
    let mut target_grads = cg.target_q1.grads(&grads);
    target_grads.extend(cg.target_q2.grads(&grads));
    Ok(CriticLoss {
        loss,
        q1_loss: g.value(cg.q1_loss).data[0],
        q2_loss: g.value(cg.q2_loss).data[0],
        targets: cg.targets,
        q1_grads: q1b.grads(&grads),
        q2_grads: q2b.grads(&grads),
        target_grads,
        q1_updates: cg.q1_updates,
        q2_updates: cg.q2_updates,
    })
}

/// Record `mean [α log π(a|s) − min(Q1, Q2)(s, a)]` with `a` reparameterised
/// through `policy`. Returns the loss and the B×1 log-density node.
pub fn policy_graph(g: &mut Graph, state: &SacState, batch: &Batch, noise: &Mat, policy: &Bound) -> Result<(Var, Var)> {
    let (obs, _, _) = batch_consts(g, batch)?;
    let s = state.policy.sample_graph(g, policy, obs, noise);
    let q1b = g.bind(state.q1.params(), false);
    let q2b = g.bind(state.q2.params(), false);
    let (q1, _) = state.q1.graph(g, &q1b, obs, s.action, NormMode::Eval);
    let (q2, _) = state.q2.graph(g, &q2b, obs, s.action, NormMode::Eval);
    let qmin = g.min(q1, q2);
    let ent = g.scale(s.log_prob, state.alpha());
    let per = g.sub(ent, qmin);
    Ok((g.mean(per), s.log_prob))
}

#[derive(Clone, Debug)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grads: Vec<Option<Mat>>,
    pub log_probs: Vec<f64>,
}

pub fn policy_loss(batch: &Batch, state: &SacState, noise: &Mat) -> Result<PolicyLoss> {
    let mut g = Graph::new();
    let pb = g.bind(&state.policy.params, true);
    let (loss, lp) = policy_graph(&mut g, state, batch, noise, &pb)?;
    let value = g.value(loss).data[0];
    if !value.is_finite() {
        return Err(FedError::Numeric(format!("policy loss is {value} on {}", diagnostics(batch))));
    }
    let grads = g.backward(loss);
    Ok(PolicyLoss {
        loss: value,
        grads: pb.grads(&grads),
        log_probs: g.value(lp).data.clone(),
    })
}

/// One optimiser step on `mean[−log α · (log π + H_target)]`; returns the new log α.
/// A pinned temperature or disabled tuning leaves it alone.
pub fn entropy_tuning_step(log_probs: &[f64], state: &mut SacState) -> f64 {
    if state.hyper.fixed_alpha.is_some() || !state.hyper.auto_entropy || log_probs.is_empty() {
        return state.log_alpha();
    }
    let h = state.target_entropy();
    let mean = log_probs.iter().map(|lp| lp + h).sum::<f64>() / log_probs.len() as f64;
    let grad = Mat::scalar(-mean);
    state.alpha_opt.step(&mut state.log_alpha, &[Some(grad)]);
    state.log_alpha()
}

/// `target ← (1 − τ)·target + τ·live` over every tensor, computed in f64.
pub fn polyak(target: &mut TensorBundle, live: &TensorBundle, tau: f64) {
    for ((_, t), (_, l)) in target.entries_mut().zip(live.entries()) {
        for (tv, &lv) in t.data_mut().iter_mut().zip(l.data()) {
            *tv = ((1.0 - tau) * *tv as f64 + tau * lv as f64) as f32;
        }
    }
}

fn polyak_qnet(target: &mut QNet, live: &QNet, tau: f64) {
    polyak(target.params_mut(), live.params(), tau);
    for (t, l) in target.externals_mut().iter_mut().zip(live.externals()) {
        polyak(&mut t.params, &l.params, tau);
    }
}

/// Move both targets toward their live networks (external encoders included).
pub fn soft_target_update(state: &mut SacState) {
    let tau = state.hyper.tau;
    polyak_qnet(&mut state.target_q1, &state.q1, tau);
    polyak_qnet(&mut state.target_q2, &state.q2, tau);
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

/// Critic step, policy step, temperature step, then soft target update.
pub fn sac_update(state: &mut SacState, batch: &Batch, next_noise: &Mat, noise: &Mat) -> Result<StepStats> {
    let critic = critic_loss(batch, state, next_noise)?;
    state.q1_opt.step(state.q1.params_mut(), &critic.q1_grads);
    state.q2_opt.step(state.q2.params_mut(), &critic.q2_grads);
    apply_norm_updates(state.q1.params_mut(), &critic.q1_updates);
    apply_norm_updates(state.q2.params_mut(), &critic.q2_updates);

    let pol = policy_loss(batch, state, noise)?;
    state.policy_opt.step(&mut state.policy.params, &pol.grads);
    entropy_tuning_step(&pol.log_probs, state);
    soft_target_update(state);
    Ok(StepStats {
        critic_loss: critic.loss,
        policy_loss: pol.loss,
        alpha: state.alpha(),
    })
}
