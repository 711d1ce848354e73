use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::coordinator::{Federation, FederationOptions};
use crate::envs::{sample_env_set, EnvConfig, ACT_DIM};
use crate::error::{FedError, Result};
use crate::federation::{FedFormerSpec, FedMlpQNet, FedMlpSpec, FederatedQNet, Strategy};
use crate::nets::{PolicyNet, PolicySpec, TransformerSpec};
use crate::sac::{MlpQNet, MlpQSpec, QNet, SacAgent, SacState};
use crate::seeding::{stream_rng, stream_seed, Stream};

/// Train and test sets of one agent, disjoint within the agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAssignment {
    pub agent_id: usize,
    pub train: Vec<EnvConfig>,
    pub test: Vec<EnvConfig>,
}

impl EnvAssignment {
    pub fn cells(&self) -> impl Iterator<Item = u64> + '_ {
        self.train.iter().chain(&self.test).map(|e| e.seed)
    }
}

/// Each agent draws its own train+test configurations without replacement,
/// so sets may overlap across agents but never inside one.
pub fn sample_assignments(config: &RunConfig, seed: u64) -> Result<Vec<EnvAssignment>> {
    let (ntr, nte) = (config.envs_per_agent_train, config.envs_per_agent_test);
    (0..config.num_agents)
        .map(|i| {
            let s = stream_seed(seed, i, Stream::EnvSampling, 0);
            let mut envs = sample_env_set(config.task_id, ntr + nte, s, config.path_length)?;
            let test = envs.split_off(ntr);
            Ok(EnvAssignment {
                agent_id: i,
                train: envs,
                test,
            })
        })
        .collect()
}

/// SoloSAC keeps every sampled set: training on all train sets, testing on all test sets.
pub fn union_assignment(sets: &[EnvAssignment]) -> EnvAssignment {
    EnvAssignment {
        agent_id: 0,
        train: sets.iter().flat_map(|a| a.train.clone()).collect(),
        test: sets.iter().flat_map(|a| a.test.clone()).collect(),
    }
}

pub fn policy_spec(config: &RunConfig) -> PolicySpec {
    PolicySpec {
        obs_dim: config.task_id.obs_dim(),
        act_dim: ACT_DIM,
        hidden: config.policy_hidden.clone(),
    }
}

pub fn fedformer_spec(config: &RunConfig, num_ids: usize) -> Result<FedFormerSpec> {
    FedFormerSpec::new(
        config.task_id.obs_dim(),
        ACT_DIM,
        config.encoder_hidden.clone(),
        TransformerSpec::new(config.transformer_layers, config.transformer_heads, config.transformer_width())?,
        config.decoder_hidden.clone(),
        config.batch_norm,
        num_ids,
    )
}

pub fn fedmlp_spec(config: &RunConfig, agents: usize) -> Result<FedMlpSpec> {
    FedMlpSpec::new(
        config.task_id.obs_dim(),
        ACT_DIM,
        config.encoder_hidden.clone(),
        config.aggregator_hidden.clone(),
        config.decoder_hidden.clone(),
        config.batch_norm,
        (0..agents).collect(),
    )
}

fn mlp_q(config: &RunConfig, rng: &mut impl rand::Rng) -> Result<QNet> {
    let spec = MlpQSpec::new(config.task_id.obs_dim(), ACT_DIM, config.q_hidden.clone(), config.batch_norm)?;
    Ok(QNet::Mlp(MlpQNet::new(spec, rng)?))
}

/// Both critics of agent `i` for the configured strategy.
fn critics(config: &RunConfig, seed: u64, i: usize, n: usize) -> Result<(QNet, QNet)> {
    // Averaging strategies start every agent from the same point.
    let stream = if config.strategy.averages() { Stream::SharedInit } else { Stream::Init };
    let owner = if config.strategy.averages() { 0 } else { i };
    let mut rng = stream_rng(seed, owner, stream, 1);
    let peers: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let make = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<QNet> {
        Ok(match config.strategy {
            Strategy::FedFormer => QNet::FedFormer(FederatedQNet::new(i, fedformer_spec(config, n)?, &peers, rng)?),
            Strategy::FedMLP => QNet::FedMlp(FedMlpQNet::new(i, fedmlp_spec(config, n)?, rng)?),
            _ => mlp_q(config, rng)?,
        })
    };
    Ok((make(&mut rng)?, make(&mut rng)?))
}

pub fn build_agent(
    config: &RunConfig,
    seed: u64,
    agent_id: usize,
    q1: QNet,
    q2: QNet,
    envs: &EnvAssignment,
) -> Result<SacAgent> {
    let owner = if config.strategy.averages() { 0 } else { agent_id };
    let stream = if config.strategy.averages() { Stream::SharedInit } else { Stream::Init };
    let policy = PolicyNet::init(policy_spec(config), &mut stream_rng(seed, owner, stream, 0))?;
    let state = SacState::new(policy, q1, q2, config.hyper())?;
    SacAgent::new(
        agent_id,
        seed,
        state,
        envs.train.clone(),
        envs.test.clone(),
        config.train_config(),
    )
}

pub fn federation_options(config: &RunConfig) -> FederationOptions {
    FederationOptions {
        exchange_every: config.exchange_every,
        upload_both: config.upload_both,
        ..FederationOptions::default()
    }
}

/// Agents and environment sets for one seed of `config`.
pub fn build_federation(config: &RunConfig, seed: u64) -> Result<(Federation, Vec<EnvAssignment>)> {
    config.validate()?;
    let sampled = sample_assignments(config, seed)?;
    let assignments = if config.strategy == Strategy::SoloSAC {
        vec![union_assignment(&sampled)]
    } else {
        sampled
    };
    let n = assignments.len();
    let agents = assignments
        .iter()
        .map(|a| {
            let (q1, q2) = critics(config, seed, a.agent_id, n)?;
            build_agent(config, seed, a.agent_id, q1, q2, a)
        })
        .collect::<Result<Vec<_>>>()?;
    if agents.len() != config.federation_size() {
        return Err(FedError::Protocol("agent count does not match the configuration".into()));
    }
    let fed = Federation::new(config.strategy, federation_options(config), agents)?;
    Ok((fed, assignments))
}
