//! In-process federation network: agents train in parallel workers, meet at an
//! epoch barrier, and exchange immutable parameter snapshots.

pub mod checkpoint;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::{exchange_encoders, fedavg_aggregate, weighted_fedavg_aggregate, Strategy};
use crate::nets::TensorBundle;
use crate::sac::{EpochStats, SacAgent};

pub use checkpoint::{latest_checkpoint, load_checkpoint, load_encoders, save_checkpoint, Manifest};
pub use wire::{deserialize_bundle, serialize_bundle, serialized_len};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationOptions {
    /// Rounds exchange parameters after every k-th epoch.
    pub exchange_every: u64,
    /// Upload the second critic's encoder too (each critic then sees its peers' matching critic).
    pub upload_both: bool,
    pub round_timeout: Duration,
}

impl Default for FederationOptions {
    fn default() -> Self {
        FederationOptions {
            exchange_every: 1,
            upload_both: false,
            round_timeout: Duration::from_secs(24 * 3600),
        }
    }
}

/// One agent's contribution to a round.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMessage {
    pub agent_id: usize,
    pub epoch: u64,
    pub payload: TensorBundle,
    pub byte_size: u64,
    pub avg_reward: f64,
    pub num_transitions: u64,
}

impl EpochMessage {
    pub fn new(agent_id: usize, epoch: u64, payload: TensorBundle, avg_reward: f64, num_transitions: u64) -> Self {
        EpochMessage {
            agent_id,
            epoch,
            byte_size: serialized_len(&payload) as u64,
            payload,
            avg_reward,
            num_transitions,
        }
    }

    /// What `agent` shares under `strategy` after finishing `epoch`.
    pub fn from_agent(agent: &SacAgent, epoch: u64, stats: &EpochStats, strategy: Strategy, options: &FederationOptions) -> Result<Self> {
        let st = &agent.state;
        let mut payload = TensorBundle::new();
        match strategy {
            Strategy::FedFormer | Strategy::FedMLP => {
                let enc = |q: &crate::sac::QNet| {
                    q.local_encoder()
                        .ok_or_else(|| FedError::Protocol("strategy needs an encoder-based Q-network".into()))
                };
                if options.upload_both {
                    payload.merge_prefixed("q1.", &enc(&st.q1)?)?;
                    payload.merge_prefixed("q2.", &enc(&st.q2)?)?;
                } else {
                    payload = enc(&st.q1)?;
                }
            }
            Strategy::FedAvg | Strategy::FedWeightedAvg => {
                payload.merge_prefixed("policy.", &st.policy.params)?;
                payload.merge_prefixed("q1.", st.q1.params())?;
                payload.merge_prefixed("q2.", st.q2.params())?;
            }
            Strategy::SoloSAC => {}
        }
        Ok(EpochMessage::new(agent.agent_id, epoch, payload, stats.avg_train_return, stats.transitions))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundLedger {
    pub epoch: u64,
    pub received: BTreeSet<usize>,
    pub upload_bytes: BTreeMap<usize, u64>,
    pub download_bytes: BTreeMap<usize, u64>,
    /// False when the round only synchronised (off-period or nothing to share).
    pub exchanged: bool,
}

impl RoundLedger {
    pub fn total_upload(&self) -> u64 {
        self.upload_bytes.values().sum()
    }

    pub fn total_download(&self) -> u64 {
        self.download_bytes.values().sum()
    }
}

/// Apply one round to `agents` given every agent's message for `epoch`.
///
/// Only live networks and external encoder slots are written; target
/// networks, optimiser state and replay memory are never touched.
pub fn run_round(
    agents: &mut [SacAgent],
    messages: &[EpochMessage],
    epoch: u64,
    strategy: Strategy,
    options: &FederationOptions,
) -> Result<RoundLedger> {
    let by_id: BTreeMap<usize, &EpochMessage> = messages.iter().map(|m| (m.agent_id, m)).collect();
    let absent: Vec<usize> = agents
        .iter()
        .map(|a| a.agent_id)
        .filter(|id| by_id.get(id).is_none_or(|m| m.epoch != epoch))
        .collect();
    if !absent.is_empty() {
        return Err(FedError::StalledRound { epoch, absent });
    }
    let mut ledger = RoundLedger {
        epoch,
        received: by_id.keys().copied().collect(),
        ..RoundLedger::default()
    };
    for a in agents.iter() {
        ledger.upload_bytes.insert(a.agent_id, 0);
        ledger.download_bytes.insert(a.agent_id, 0);
    }
    let k = options.exchange_every.max(1);
    if strategy == Strategy::SoloSAC || (epoch + 1) % k != 0 {
        return Ok(ledger);
    }
    ledger.exchanged = true;
    for m in messages {
        ledger.upload_bytes.insert(m.agent_id, m.byte_size);
    }

    match strategy {
        Strategy::FedFormer | Strategy::FedMLP => {
            let (first, second): (BTreeMap<_, _>, BTreeMap<_, _>) = if options.upload_both {
                (
                    by_id.iter().map(|(&id, m)| (id, m.payload.extract_prefix("q1."))).collect(),
                    by_id.iter().map(|(&id, m)| (id, m.payload.extract_prefix("q2."))).collect(),
                )
            } else {
                let p: BTreeMap<_, _> = by_id.iter().map(|(&id, m)| (id, m.payload.clone())).collect();
                (p.clone(), p)
            };
            for a in agents.iter_mut() {
                let peers: Vec<usize> = a.state.q1.externals().iter().map(|e| e.agent_id).collect();
                exchange_encoders(&mut [&mut a.state.q1], &first)?;
                exchange_encoders(&mut [&mut a.state.q2], &second)?;
                let down = peers.iter().map(|p| by_id[p].byte_size).sum();
                ledger.download_bytes.insert(a.agent_id, down);
            }
        }
        Strategy::FedAvg | Strategy::FedWeightedAvg => {
            let global = if strategy == Strategy::FedAvg {
                let states: Vec<_> = messages.iter().map(|m| (&m.payload, m.num_transitions)).collect();
                fedavg_aggregate(&states)?
            } else {
                let states: Vec<_> = messages.iter().map(|m| (&m.payload, m.avg_reward)).collect();
                weighted_fedavg_aggregate(&states)?
            };
            let size = serialized_len(&global) as u64;
            for a in agents.iter_mut() {
                a.state.policy.params.replace_prefix("", &global.extract_prefix("policy."))?;
                a.state.q1.params_mut().replace_prefix("", &global.extract_prefix("q1."))?;
                a.state.q2.params_mut().replace_prefix("", &global.extract_prefix("q2."))?;
                ledger.download_bytes.insert(a.agent_id, size);
            }
        }
        Strategy::SoloSAC => unreachable!("handled above"),
    }
    Ok(ledger)
}

type WorkerResult = (usize, Result<(EpochStats, EpochMessage)>);

/// Wait until every id in `registry` reported or `timeout` elapses.
pub fn collect_messages(
    rx: &Receiver<WorkerResult>,
    registry: &[usize],
    epoch: u64,
    timeout: Duration,
) -> Result<BTreeMap<usize, (EpochStats, EpochMessage)>> {
    let deadline = Instant::now() + timeout;
    let mut got = BTreeMap::new();
    while got.len() < registry.len() {
        let wait = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait) {
            Ok((id, result)) => {
                got.insert(id, result?);
            }
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => {
                let absent = registry.iter().copied().filter(|id| !got.contains_key(id)).collect();
                return Err(FedError::StalledRound { epoch, absent });
            }
        }
    }
    Ok(got)
}

/// A set of agents federating under one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Federation {
    pub strategy: Strategy,
    pub options: FederationOptions,
    pub agents: Vec<SacAgent>,
}

/// Everything one epoch produced.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: u64,
    pub stats: Vec<EpochStats>,
    pub ledger: RoundLedger,
}

impl Federation {
    pub fn new(strategy: Strategy, options: FederationOptions, agents: Vec<SacAgent>) -> Result<Self> {
        if agents.is_empty() {
            return Err(FedError::InvalidArgument("federation needs at least one agent".into()));
        }
        let epoch = agents[0].epochs_done;
        if agents.iter().any(|a| a.epochs_done != epoch) {
            return Err(FedError::Protocol("agents disagree on the current epoch".into()));
        }
        Ok(Federation { strategy, options, agents })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u64 {
        self.agents[0].epochs_done
    }

    /// Every agent trains one epoch on its own worker thread; the round runs
    /// once all of them have reported, so no agent starts the next epoch early.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let epoch = self.epoch();
        let registry: Vec<usize> = self.agents.iter().map(|a| a.agent_id).collect();
        let (strategy, options) = (self.strategy, self.options.clone());
        let (tx, rx) = mpsc::channel::<WorkerResult>();
        let collected = thread::scope(|s| {
            for agent in self.agents.iter_mut() {
                let tx = tx.clone();
                let options = &options;
                s.spawn(move || {
                    let result = agent
                        .train_epoch()
                        .and_then(|st| Ok((st, EpochMessage::from_agent(agent, epoch, &st, strategy, options)?)));
                    let _ = tx.send((agent.agent_id, result));
                });
            }
            drop(tx);
            collect_messages(&rx, &registry, epoch, options.round_timeout)
        })?;
        let messages: Vec<EpochMessage> = collected.values().map(|(_, m)| m.clone()).collect();
        let ledger = run_round(&mut self.agents, &messages, epoch, strategy, &options)?;
        Ok(EpochReport {
            epoch,
            stats: collected.into_values().map(|(s, _)| s).collect(),
            ledger,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stalled_round_names_absentees() {
        let (tx, rx) = mpsc::channel::<WorkerResult>();
        let msg = EpochMessage::new(0, 3, TensorBundle::new(), 0.0, 0);
        tx.send((0, Ok((EpochStats::default(), msg)))).unwrap();
        let err = collect_messages(&rx, &[0, 1, 2], 3, Duration::from_millis(20)).unwrap_err();
        match err {
            FedError::StalledRound { epoch, absent } => {
                assert_eq!(epoch, 3);
                assert_eq!(absent, vec![1, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
