//! Per-agent training loop: batched rollouts over the agent's environments,
//! a fixed number of gradient steps, then deterministic evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sac_update, ReplayBuffer, SacState, StepStats, Transition};
use crate::envs::{Action, EnvConfig, PointMassEnv};
use crate::error::{FedError, Result};
use crate::nets::Mat;
use crate::seeding::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gradient_steps_per_epoch: usize,
    /// Exploration episodes collected on each training environment per epoch.
    pub episodes_per_env: usize,
    /// Environment steps taken with uniform random actions before the policy acts.
    pub warmup_steps: u64,
    pub replay_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            gradient_steps_per_epoch: 200,
            episodes_per_env: 1,
            warmup_steps: 1500,
            replay_capacity: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub avg_train_return: f64,
    pub avg_test_return: f64,
    /// Means over this epoch's gradient steps (0 when none ran).
    pub critic_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
    pub transitions: u64,
    pub gradient_steps: usize,
}

/// One learner with its private environments and replay memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    pub agent_id: usize,
    /// Master seed of the run; per-epoch streams are derived from it.
    pub seed: u64,
    pub state: SacState,
    pub buffer: ReplayBuffer,
    pub train_envs: Vec<EnvConfig>,
    pub test_envs: Vec<EnvConfig>,
    pub config: TrainConfig,
    pub env_steps: u64,
    pub epochs_done: u64,
}

struct Rollout {
    returns: Vec<f64>,
    transitions: Vec<Transition>,
}

/// Run one episode on each of `envs` in lock-step, choosing actions for all
/// still-running environments at once.
fn rollout_batch<F>(envs: &[EnvConfig], mut choose: F) -> Result<Rollout>
where
    F: FnMut(&Mat) -> Result<Mat>,
{
    let mut sims = envs.iter().cloned().map(PointMassEnv::new).collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<Vec<f64>> = sims.iter_mut().map(|e| e.reset().flatten()).collect();
    let mut active: Vec<bool> = vec![true; sims.len()];
    let mut returns = vec![0.0; sims.len()];
    let mut transitions = Vec::new();
    while active.iter().any(|&a| a) {
        let idx: Vec<usize> = (0..sims.len()).filter(|&i| active[i]).collect();
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| obs[i].clone()).collect();
        let actions = choose(&Mat::from_rows(&rows))?;
        for (r, &i) in idx.iter().enumerate() {
            let action = Action::from_slice(actions.row(r))?;
            let step = sims[i].step(&action)?;
            let next = step.next_obs.flatten();
            returns[i] += step.reward;
            transitions.push(Transition {
                obs: std::mem::replace(&mut obs[i], next.clone()),
                action: action.values().to_vec(),
                reward: step.reward,
                next_obs: next,
                done: step.goal_reached,
            });
            if step.done {
                active[i] = false;
            }
        }
    }
    Ok(Rollout { returns, transitions })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl SacAgent {
    pub fn new(
        agent_id: usize,
        seed: u64,
        state: SacState,
        train_envs: Vec<EnvConfig>,
        test_envs: Vec<EnvConfig>,
        config: TrainConfig,
    ) -> Result<Self> {
        if train_envs.is_empty() {
            return Err(FedError::InvalidArgument("agent needs at least one training environment".into()));
        }
        if config.batch_size == 0 {
            return Err(FedError::InvalidArgument("batch_size must be positive".into()));
        }
        let buffer = ReplayBuffer::new(config.replay_capacity, state.policy.spec.obs_dim, state.policy.spec.act_dim)?;
        Ok(SacAgent {
            agent_id,
            seed,
            state,
            buffer,
            train_envs,
            test_envs,
            config,
            env_steps: 0,
            epochs_done: 0,
        })
    }

    /// Mean undiscounted return of the deterministic policy, one episode per test env.
    pub fn evaluate(&self) -> Result<f64> {
        if self.test_envs.is_empty() {
            return Ok(0.0);
        }
        let policy = &self.state.policy;
        let r = rollout_batch(&self.test_envs, |obs| Ok(policy.deterministic_actions(obs)))?;
        Ok(mean(&r.returns))
    }

    /// Collect, learn, evaluate. Randomness comes only from streams keyed by
    /// (seed, agent, epoch counter), so an agent restored from a checkpoint
    /// continues exactly as an uninterrupted one.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epochs_done;
        let mut explore = stream_rng(self.seed, self.agent_id, Stream::Rollout, epoch);
        let mut update = stream_rng(self.seed, self.agent_id, Stream::Update, epoch);
        let context = |e: FedError| match e {
            FedError::Numeric(m) => FedError::Numeric(format!("agent {} epoch {epoch}: {m}", self.agent_id)),
            other => other,
        };

        let mut train_returns = Vec::new();
        let mut collected = 0u64;
        for _ in 0..self.config.episodes_per_env {
            let warmup = self.config.warmup_steps;
            let mut steps = self.env_steps;
            let policy = &self.state.policy;
            let r = rollout_batch(&self.train_envs, |obs| {
                let a = if steps < warmup {
                    let data = (0..obs.rows * policy.spec.act_dim)
                        .map(|_| explore.random_range(-1.0..=1.0))
                        .collect();
                    Mat::from_vec(obs.rows, policy.spec.act_dim, data)
                } else {
                    policy.sample_actions(obs, &mut explore).0
                };
                steps += obs.rows as u64;
                Ok(a)
            })?;
            for t in &r.transitions {
                self.buffer.push(t)?;
            }
            self.env_steps = steps;
            collected += r.transitions.len() as u64;
            train_returns.extend(r.returns);
        }

        let mut stats = Vec::new();
        if self.buffer.len() >= self.config.batch_size {
            let b = self.config.batch_size;
            for _ in 0..self.config.gradient_steps_per_epoch {
                let batch = self.buffer.sample(&mut update, b)?;
                let next_noise = self.state.policy.sample_noise(&mut update, b);
                let noise = self.state.policy.sample_noise(&mut update, b);
                stats.push(sac_update(&mut self.state, &batch, &next_noise, &noise).map_err(context)?);
            }
        }
        self.epochs_done += 1;

        let avg = |f: fn(&StepStats) -> f64| mean(&stats.iter().map(f).collect::<Vec<_>>());
        Ok(EpochStats {
            avg_train_return: mean(&train_returns),
            avg_test_return: self.evaluate()?,
            critic_loss: avg(|s| s.critic_loss),
            policy_loss: avg(|s| s.policy_loss),
            alpha: self.state.alpha(),
            transitions: collected,
            gradient_steps: stats.len(),
        })
    }
}
