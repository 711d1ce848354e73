//! Federation strategies: Q-function variants that fuse peer encoders, and the
//! epoch-boundary rules that move parameters between agents.

pub mod fedformer;
pub mod fedmlp;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::nets::mlp::check_layout;
use crate::nets::{Tensor, TensorBundle};
use crate::sac::QNet;

pub use fedformer::{fedformer_q_forward, FedFormerSpec, FederatedQNet};
pub use fedmlp::{fedmlp_q_forward, FedMlpQNet, FedMlpSpec};

/// Shift added after min-subtraction so that the worst agent keeps a nonzero weight.
pub const REWARD_WEIGHT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    FedFormer,
    FedAvg,
    FedWeightedAvg,
    FedMLP,
    SoloSAC,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedFormer,
        Strategy::FedAvg,
        Strategy::FedWeightedAvg,
        Strategy::FedMLP,
        Strategy::SoloSAC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedFormer => "FedFormer",
            Strategy::FedAvg => "FedAvg",
            Strategy::FedWeightedAvg => "FedWeightedAvg",
            Strategy::FedMLP => "FedMLP",
            Strategy::SoloSAC => "SoloSAC",
        }
    }

    /// Strategies that exchange encoders rather than averaging whole networks.
    pub fn exchanges_encoders(self) -> bool {
        matches!(self, Strategy::FedFormer | Strategy::FedMLP)
    }

    pub fn averages(self) -> bool {
        matches!(self, Strategy::FedAvg | Strategy::FedWeightedAvg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FedError::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Frozen copy of a peer's local encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEncoder {
    pub agent_id: usize,
    pub params: TensorBundle,
}

/// Elementwise `Σ w_i · b_i` accumulated in f64. Weights must sum to 1.
fn weighted_mean(bundles: &[&TensorBundle], weights: &[f64]) -> Result<TensorBundle> {
    let first = *bundles
        .first()
        .ok_or_else(|| FedError::InvalidArgument("aggregation needs at least one participant".into()))?;
    for b in &bundles[1..] {
        first.check_compatible(b)?;
    }
    let mut out = TensorBundle::new();
    for (k, (name, t)) in first.entries().iter().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for (b, &w) in bundles.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(b.entries()[k].1.data()) {
                *a += w * v as f64;
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Dataset-size weighted average of structurally identical bundles.
pub fn fedavg_aggregate(states: &[(&TensorBundle, u64)]) -> Result<TensorBundle> {
    let total: u64 = states.iter().map(|(_, n)| n).sum();
    if states.is_empty() {
        return Err(FedError::InvalidArgument("aggregation needs at least one participant".into()));
    }
    if total == 0 {
        return Err(FedError::InvalidArgument("participants report no data".into()));
    }
    let weights: Vec<f64> = states.iter().map(|(_, n)| *n as f64 / total as f64).collect();
    let bundles: Vec<&TensorBundle> = states.iter().map(|(b, _)| *b).collect();
    weighted_mean(&bundles, &weights)
}

/// Contribution weights from average rewards, normalised to sum 1.
///
/// Rewards are shifted up by `-min r` when any is negative, then `ε` is added,
/// so non-negative rewards weigh proportionally and the worst agent never
/// drops to exactly zero.
pub fn reward_weights(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(FedError::Numeric("non-finite average reward".into()));
    }
    let min = rewards.iter().copied().fold(0.0, f64::min);
    let raw: Vec<f64> = rewards.iter().map(|r| r - min + REWARD_WEIGHT_EPS).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

pub fn weighted_fedavg_aggregate(states: &[(&TensorBundle, f64)]) -> Result<TensorBundle> {
    if states.is_empty() {
        return Err(FedError::InvalidArgument("aggregation needs at least one participant".into()));
    }
    let rewards: Vec<f64> = states.iter().map(|(_, r)| *r).collect();
    let weights = reward_weights(&rewards)?;
    let bundles: Vec<&TensorBundle> = states.iter().map(|(b, _)| *b).collect();
    weighted_mean(&bundles, &weights)
}

/// Refresh every external encoder of every network from `uploads`.
///
/// Only `external_encoders` change; local encoders, heads and any target
/// networks (which callers simply do not pass) are untouched.
pub fn exchange_encoders(qnets: &mut [&mut QNet], uploads: &BTreeMap<usize, TensorBundle>) -> Result<()> {
    for q in qnets.iter() {
        for ext in q.externals() {
            if !uploads.contains_key(&ext.agent_id) {
                return Err(FedError::StalePeer(ext.agent_id));
            }
        }
    }
    for q in qnets.iter_mut() {
        let peers: Vec<usize> = q.externals().iter().map(|e| e.agent_id).collect();
        for peer in peers {
            q.set_external(peer, uploads[&peer].clone())?;
        }
    }
    Ok(())
}

/// A fresh FedFormer Q-network whose external set is every saved encoder.
///
/// The new agent's id is one past the largest pretrained id, and the identity
/// table is sized to include it. `spec.num_ids` is overwritten accordingly.
pub fn onboard_agent<R: Rng + ?Sized>(
    pretrained: &BTreeMap<usize, TensorBundle>,
    mut spec: FedFormerSpec,
    rng: &mut R,
) -> Result<FederatedQNet> {
    for (id, b) in pretrained {
        check_layout(&spec.encoder.layout(), b)
            .map_err(|e| FedError::Compatibility(format!("saved encoder {id}: {e}")))?;
    }
    let new_id = pretrained.keys().next_back().map_or(0, |m| m + 1);
    spec.num_ids = new_id + 1;
    let mut net = FederatedQNet::new(new_id, spec, &[], rng)?;
    for (id, b) in pretrained {
        net.set_external(*id, b.clone())?;
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_bundle(v: &[f32]) -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        b
    }

    #[test]
    fn fedavg_examples() {
        let a = vec_bundle(&[1.0, 3.0]);
        assert_eq!(fedavg_aggregate(&[(&a, 4)]).unwrap(), a);
        let b = vec_bundle(&[3.0, 1.0]);
        assert_eq!(fedavg_aggregate(&[(&a, 5), (&b, 5)]).unwrap(), vec_bundle(&[2.0, 2.0]));
        let (c, d) = (vec_bundle(&[0.0]), vec_bundle(&[4.0]));
        assert_eq!(fedavg_aggregate(&[(&c, 1), (&d, 3)]).unwrap(), vec_bundle(&[3.0]));
    }

    #[test]
    fn weighted_examples() {
        let (a, b) = (vec_bundle(&[1.0, 3.0]), vec_bundle(&[3.0, 1.0]));
        assert_eq!(weighted_fedavg_aggregate(&[(&a, 0.0), (&b, 0.0)]).unwrap(), vec_bundle(&[2.0, 2.0]));
        assert_eq!(weighted_fedavg_aggregate(&[(&a, -7.5), (&b, -7.5)]).unwrap(), vec_bundle(&[2.0, 2.0]));
        let (c, d) = (vec_bundle(&[0.0]), vec_bundle(&[6.0]));
        let out = weighted_fedavg_aggregate(&[(&c, 1.0), (&d, 2.0)]).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 4.0).abs() < 1e-5);
        let out = weighted_fedavg_aggregate(&[(&c, -3.0), (&d, -1.0)]).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn structure_mismatch_rejected() {
        let (a, b) = (vec_bundle(&[1.0]), vec_bundle(&[1.0, 2.0]));
        assert!(matches!(fedavg_aggregate(&[(&a, 1), (&b, 1)]), Err(FedError::Compatibility(_))));
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedsgd".parse::<Strategy>().is_err());
    }
}
