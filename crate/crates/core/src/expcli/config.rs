use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{TaskId, GRID_SIZE};
use crate::error::{FedError, Result};
use crate::federation::Strategy;
use crate::sac::trainer::TrainConfig;
use crate::sac::SacHyper;

/// Flat run description; every key of the config file maps to one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Federation size. SoloSAC runs one agent on the union of the env sets a
    /// federation of this size would have sampled.
    pub num_agents: usize,
    pub task_id: TaskId,
    pub envs_per_agent_train: usize,
    pub envs_per_agent_test: usize,
    pub epochs: u64,
    pub gradient_steps_per_epoch: usize,
    pub batch_size: usize,
    pub path_length: usize,
    pub replay_capacity: usize,
    pub warmup_steps: u64,
    pub episodes_per_env: usize,
    pub seeds: Vec<u64>,

    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub alpha_lr: f64,
    pub auto_entropy: bool,
    pub target_entropy: Option<f64>,
    pub fixed_alpha: Option<f64>,
    pub initial_log_alpha: f64,

    pub policy_hidden: Vec<usize>,
    /// Plain Q-network hidden layers (SoloSAC, FedAvg, FedWeightedAvg).
    pub q_hidden: Vec<usize>,
    /// The last entry is also the transformer width.
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub aggregator_hidden: Vec<usize>,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub batch_norm: bool,

    pub exchange_every: u64,
    pub upload_both: bool,
    pub record_wall_time: bool,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u64,
    /// Sampling seed for the onboarded agent's unseen environments.
    pub onboard_env_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = 64;
        RunConfig {
            strategy: Strategy::FedFormer,
            num_agents: 3,
            task_id: TaskId::ParamReach,
            envs_per_agent_train: 5,
            envs_per_agent_test: 5,
            epochs: 40,
            gradient_steps_per_epoch: 200,
            batch_size: 256,
            path_length: 100,
            replay_capacity: 100_000,
            warmup_steps: 1500,
            episodes_per_env: 1,
            seeds: vec![0, 1, 2],
            gamma: 0.99,
            tau: 5e-3,
            policy_lr: 3e-4,
            q_lr: 3e-4,
            alpha_lr: 3e-4,
            auto_entropy: true,
            target_entropy: None,
            fixed_alpha: None,
            initial_log_alpha: 0.0,
            policy_hidden: vec![h; 3],
            q_hidden: vec![h; 3],
            encoder_hidden: vec![h; 3],
            decoder_hidden: vec![h; 2],
            aggregator_hidden: vec![h],
            transformer_layers: 2,
            transformer_heads: 4,
            batch_norm: true,
            exchange_every: 1,
            upload_both: false,
            record_wall_time: false,
            checkpoint_every: 0,
            onboard_env_seed: 1000,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FedError::Validation(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    /// Switch to the full-size protocol: 250 epochs of 600 gradient steps on
    /// batches of 1200, 500-step episodes and 256-wide networks.
    pub fn paper_scale(mut self) -> Self {
        let h = 256;
        self.epochs = 250;
        self.gradient_steps_per_epoch = 600;
        self.batch_size = 1200;
        self.path_length = 500;
        self.replay_capacity = 1_000_000;
        self.seeds = (0..10).collect();
        self.policy_hidden = vec![h; 3];
        self.q_hidden = vec![h; 3];
        self.encoder_hidden = vec![h; 3];
        self.decoder_hidden = vec![h; 2];
        self.aggregator_hidden = vec![h];
        self.transformer_layers = 2;
        self.transformer_heads = 4;
        self.batch_norm = true;
        self
    }

    /// Agents actually instantiated for this strategy.
    pub fn federation_size(&self) -> usize {
        if self.strategy == Strategy::SoloSAC {
            1
        } else {
            self.num_agents
        }
    }

    pub fn transformer_width(&self) -> usize {
        self.encoder_hidden.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        need(self.num_agents >= 1, "num_agents must be at least 1");
        need(self.envs_per_agent_train >= 1, "envs_per_agent_train must be at least 1");
        need(
            self.envs_per_agent_train + self.envs_per_agent_test <= GRID_SIZE,
            "envs_per_agent_train + envs_per_agent_test exceeds the environment grid",
        );
        need(self.batch_size >= 1, "batch_size must be at least 1");
        need(self.path_length >= 1, "path_length must be at least 1");
        need(self.replay_capacity >= 1, "replay_capacity must be at least 1");
        need(self.episodes_per_env >= 1, "episodes_per_env must be at least 1");
        need(!self.seeds.is_empty(), "seeds must list at least one seed");
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        need(sorted.len() == self.seeds.len(), "seeds must be distinct");
        need((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)");
        need(self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0, 1]");
        for (name, lr) in [("policy_lr", self.policy_lr), ("q_lr", self.q_lr), ("alpha_lr", self.alpha_lr)] {
            need(lr.is_finite() && lr > 0.0, &format!("{name} must be positive"));
        }
        need(self.initial_log_alpha.is_finite(), "initial_log_alpha must be finite");
        if let Some(a) = self.fixed_alpha {
            need(a.is_finite() && a >= 0.0, "fixed_alpha must be non-negative");
        }
        for (name, layers) in [
            ("policy_hidden", &self.policy_hidden),
            ("q_hidden", &self.q_hidden),
            ("encoder_hidden", &self.encoder_hidden),
            ("decoder_hidden", &self.decoder_hidden),
            ("aggregator_hidden", &self.aggregator_hidden),
        ] {
            need(!layers.is_empty() && layers.iter().all(|&w| w > 0), &format!("{name} needs positive widths"));
        }
        need(self.transformer_layers >= 1, "transformer_layers must be at least 1");
        need(
            self.transformer_heads >= 1 && self.transformer_width() % self.transformer_heads.max(1) == 0,
            "last encoder_hidden width must be a multiple of transformer_heads",
        );
        need(self.exchange_every >= 1, "exchange_every must be at least 1");
        if bad.is_empty() {
            Ok(())
        } else {
            Err(FedError::Validation(bad))
        }
    }

    /// Hex SHA-256 of the canonical serialisation with the output directory
    /// left out, so moving a run does not change its identity.
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&canon).expect("config serialises"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short form used to name the run directory and fill the `run_id` column.
    pub fn run_id(&self) -> String {
        self.config_hash()[..16].to_string()
    }

    pub fn hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            tau: self.tau,
            policy_lr: self.policy_lr,
            q_lr: self.q_lr,
            alpha_lr: self.alpha_lr,
            auto_entropy: self.auto_entropy,
            target_entropy: self.target_entropy,
            initial_log_alpha: self.initial_log_alpha,
            fixed_alpha: self.fixed_alpha,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            gradient_steps_per_epoch: self.gradient_steps_per_epoch,
            episodes_per_env: self.episodes_per_env,
            warmup_steps: self.warmup_steps,
            replay_capacity: self.replay_capacity,
        }
    }
}
