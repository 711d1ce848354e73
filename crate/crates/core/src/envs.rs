//! Seedable point-mass control tasks with heterogeneous dynamics.
//!
//! Each [`EnvConfig`] fixes a goal, a rotation and gain applied to the agent's
//! actions, and a velocity drag. The rotation, gain and drag are not observed,
//! so agents trained on different configurations face genuinely different MDPs.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

pub const DT: f64 = 0.05;
pub const ARENA_HALF_WIDTH: f64 = 2.0;
pub const GOAL_THRESHOLD: f64 = 0.05;
pub const GOAL_BONUS: f64 = 10.0;
/// Distance at which the agent carries the puck in [`TaskId::ParamPush`].
pub const CONTACT_RADIUS: f64 = 0.15;
pub const PUCK_START: [f64; 2] = [0.0, 0.3];
pub const ACT_DIM: usize = 2;

const GOAL_RADIUS: f64 = 0.8;
const GOAL_ANGLES: usize = 5;
const ROTATIONS: [f64; 5] = [-0.6, -0.3, 0.0, 0.3, 0.6];
/// (action_scale, drag) pairs.
const GAINS: [(f64, f64); 2] = [(4.0, 0.25), (6.0, 0.4)];
pub const GRID_SIZE: usize = GOAL_ANGLES * ROTATIONS.len() * GAINS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    ParamReach,
    ParamPush,
}

impl TaskId {
    pub fn obs_dim(self) -> usize {
        match self {
            TaskId::ParamReach => 6,
            TaskId::ParamPush => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task_id: TaskId,
    pub goal: [f64; 2],
    pub action_rotation: f64,
    pub action_scale: f64,
    pub drag: f64,
    /// Identifies the grid cell the configuration was drawn from.
    pub seed: u64,
    pub max_steps: usize,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.action_scale > 0.0 && self.action_scale.is_finite()) {
            problems.push(format!("action_scale must be positive, got {}", self.action_scale));
        }
        if !(0.0..=1.0).contains(&self.drag) {
            problems.push(format!("drag must be in [0,1], got {}", self.drag));
        }
        if self.max_steps == 0 {
            problems.push("max_steps must be at least 1".into());
        }
        if !self.goal.iter().chain([&self.action_rotation]).all(|v| v.is_finite()) {
            problems.push("goal and rotation must be finite".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FedError::Validation(problems))
        }
    }
}

/// Configuration of grid cell `cell` (`0 ≤ cell < GRID_SIZE`).
pub fn grid_cell(task_id: TaskId, cell: usize, max_steps: usize) -> EnvConfig {
    let angle_idx = cell % GOAL_ANGLES;
    let rot_idx = (cell / GOAL_ANGLES) % ROTATIONS.len();
    let gain_idx = cell / (GOAL_ANGLES * ROTATIONS.len());
    let theta = 2.0 * PI * angle_idx as f64 / GOAL_ANGLES as f64 + PI / 2.0;
    let (scale, drag) = GAINS[gain_idx];
    EnvConfig {
        task_id,
        goal: [GOAL_RADIUS * theta.cos(), GOAL_RADIUS * theta.sin()],
        action_rotation: ROTATIONS[rot_idx],
        action_scale: scale,
        drag,
        seed: cell as u64,
        max_steps,
    }
}

/// `count` distinct configurations drawn without replacement from the grid.
pub fn sample_env_set(task_id: TaskId, count: usize, rng_seed: u64, max_steps: usize) -> Result<Vec<EnvConfig>> {
    sample_env_set_excluding(task_id, count, rng_seed, max_steps, &[])
}

/// As [`sample_env_set`], but never returns a cell listed in `excluded`.
pub fn sample_env_set_excluding(
    task_id: TaskId,
    count: usize,
    rng_seed: u64,
    max_steps: usize,
    excluded: &[u64],
) -> Result<Vec<EnvConfig>> {
    if count == 0 {
        return Err(FedError::InvalidArgument("env set must be non-empty".into()));
    }
    let cells: Vec<usize> = (0..GRID_SIZE).filter(|c| !excluded.contains(&(*c as u64))).collect();
    if count > cells.len() {
        return Err(FedError::Capacity {
            requested: count,
            available: cells.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(sample(&mut rng, cells.len(), count)
        .into_iter()
        .map(|i| grid_cell(task_id, cells[i], max_steps))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub goal_pos: [f64; 2],
    /// Puck position; present only for [`TaskId::ParamPush`].
    pub object_pos: Option<[f64; 2]>,
}

impl Observation {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(8);
        v.extend_from_slice(&self.agent_pos);
        v.extend_from_slice(&self.agent_vel);
        v.extend_from_slice(&self.goal_pos);
        if let Some(o) = self.object_pos {
            v.extend_from_slice(&o);
        }
        v
    }
}

/// A two-dimensional action, clipped into `[-1, 1]` componentwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    values: [f64; 2],
}

impl Action {
    pub fn new(values: [f64; 2]) -> Self {
        Action {
            values: values.map(|v| v.clamp(-1.0, 1.0)),
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        match values {
            [a, b] => Ok(Action::new([*a, *b])),
            _ => Err(FedError::Dimension(format!("action needs 2 values, got {}", values.len()))),
        }
    }

    pub fn values(&self) -> [f64; 2] {
        self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub step_index: usize,
    /// The episode ended at the goal rather than at the horizon.
    pub goal_reached: bool,
}

#[derive(Clone, Debug)]
pub struct PointMassEnv {
    config: EnvConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    puck: [f64; 2],
    steps: usize,
    done: bool,
    started: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip_to_arena(pos: &mut [f64; 2], vel: &mut [f64; 2]) {
    for i in 0..2 {
        if pos[i].abs() > ARENA_HALF_WIDTH {
            pos[i] = pos[i].clamp(-ARENA_HALF_WIDTH, ARENA_HALF_WIDTH);
            vel[i] = 0.0;
        }
    }
}

impl PointMassEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(PointMassEnv {
            config,
            pos: [0.0; 2],
            vel: [0.0; 2],
            puck: PUCK_START,
            steps: 0,
            done: false,
            started: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.config.task_id.obs_dim()
    }

    pub fn reset(&mut self) -> Observation {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.puck = PUCK_START;
        self.steps = 0;
        self.done = false;
        self.started = true;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation {
            agent_pos: self.pos,
            agent_vel: self.vel,
            goal_pos: self.config.goal,
            object_pos: match self.config.task_id {
                TaskId::ParamReach => None,
                TaskId::ParamPush => Some(self.puck),
            },
        }
    }

    /// The point whose distance to the goal is rewarded.
    fn tracked(&self) -> [f64; 2] {
        match self.config.task_id {
            TaskId::ParamReach => self.pos,
            TaskId::ParamPush => self.puck,
        }
    }

    /// Set the internal state directly (tests and diagnostics).
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult> {
        if !self.started {
            return Err(FedError::Protocol("step before reset".into()));
        }
        if self.done {
            return Err(FedError::Protocol("step after episode end".into()));
        }
        let [ax, ay] = action.values();
        if !(ax.is_finite() && ay.is_finite()) {
            return Err(FedError::Numeric("non-finite action".into()));
        }
        let (s, c) = self.config.action_rotation.sin_cos();
        let k = self.config.action_scale;
        let force = [k * (c * ax - s * ay), k * (s * ax + c * ay)];
        let keep = 1.0 - self.config.drag;
        let before = self.pos;
        for i in 0..2 {
            self.vel[i] = keep * self.vel[i] + DT * force[i];
            self.pos[i] += DT * self.vel[i];
        }
        clip_to_arena(&mut self.pos, &mut self.vel);
        if self.config.task_id == TaskId::ParamPush && dist(before, self.puck) < CONTACT_RADIUS {
            let mut still = [0.0; 2];
            for i in 0..2 {
                self.puck[i] += self.pos[i] - before[i];
            }
            clip_to_arena(&mut self.puck, &mut still);
        }
        self.steps += 1;

        let d = dist(self.tracked(), self.config.goal);
        let reached = d < GOAL_THRESHOLD;
        let reward = -d + if reached { GOAL_BONUS } else { 0.0 };
        self.done = reached || self.steps >= self.config.max_steps;
        Ok(StepResult {
            next_obs: self.observe(),
            reward,
            done: self.done,
            step_index: self.steps,
            goal_reached: reached,
        })
    }
}

/// `Σ γ^t r_t` for `γ ∈ [0, 1)`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(FedError::InvalidArgument(format!("discount must lie in [0,1), got {gamma}")));
    }
    Ok(discounted_sum(rewards, gamma))
}

/// Plain sum of rewards: the reported episodic return.
pub fn undiscounted_return(rewards: &[f64]) -> f64 {
    discounted_sum(rewards, 1.0)
}

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    total
}
