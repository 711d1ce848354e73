//! Concatenation baseline: peer encodings are joined in a fixed agent order
//! and mixed by an MLP instead of attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fedformer::Q_HEAD_INIT;
use super::ExternalEncoder;
use crate::error::{FedError, Result};
use crate::nets::mlp::check_layout;
use crate::nets::{Bound, Graph, Mat, MlpSpec, NormMode, NormUpdate, TensorBundle, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedMlpSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub encoder: MlpSpec,
    /// Input width `agent_order.len() · encoder width`.
    pub aggregator: MlpSpec,
    /// Input width aggregator output + encoder width.
    pub decoder: MlpSpec,
    /// Every participant (local included), in concatenation order.
    pub agent_order: Vec<usize>,
}

impl FedMlpSpec {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        encoder_layers: Vec<usize>,
        aggregator_layers: Vec<usize>,
        decoder_hidden: Vec<usize>,
        batch_norm: bool,
        agent_order: Vec<usize>,
    ) -> Result<Self> {
        let d = *encoder_layers
            .last()
            .ok_or_else(|| FedError::InvalidArgument("encoder needs layers".into()))?;
        let agg_out = *aggregator_layers
            .last()
            .ok_or_else(|| FedError::InvalidArgument("aggregator needs layers".into()))?;
        let mut dec = decoder_hidden;
        dec.push(1);
        let spec = FedMlpSpec {
            obs_dim,
            act_dim,
            encoder: MlpSpec::new(obs_dim + act_dim, encoder_layers, batch_norm),
            aggregator: MlpSpec::new(agent_order.len() * d, aggregator_layers, batch_norm),
            decoder: MlpSpec::new(agg_out + d, dec, batch_norm),
            agent_order,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregator.validate()?;
        self.decoder.validate()?;
        let d = self.encoder.output_dim();
        if self.agent_order.is_empty() {
            return Err(FedError::InvalidArgument("agent order is empty".into()));
        }
        let mut sorted = self.agent_order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.agent_order.len() {
            return Err(FedError::InvalidArgument("agent order repeats an id".into()));
        }
        if self.aggregator.input_dim != self.agent_order.len() * d {
            return Err(FedError::Dimension("aggregator input must be N · encoder width".into()));
        }
        if self.decoder.input_dim != self.aggregator.output_dim() + d || self.decoder.output_dim() != 1 {
            return Err(FedError::Dimension("decoder must map aggregate + local encoding to a scalar".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, spec) in [("local.", &self.encoder), ("agg.", &self.aggregator), ("dec.", &self.decoder)] {
            out.extend(spec.layout().into_iter().map(|(n, s)| (format!("{prefix}{n}"), s)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedMlpQNet {
    pub agent_id: usize,
    pub spec: FedMlpSpec,
    pub params: TensorBundle,
    pub external_encoders: Vec<ExternalEncoder>,
}

impl FedMlpQNet {
    /// Every id in `spec.agent_order` other than `agent_id` gets a random frozen encoder.
    pub fn new<R: Rng + ?Sized>(agent_id: usize, spec: FedMlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if !spec.agent_order.contains(&agent_id) {
            return Err(FedError::InvalidArgument(format!("agent {agent_id} missing from agent order")));
        }
        let mut params = TensorBundle::new();
        params.merge_prefixed("local.", &spec.encoder.init(rng, None)?)?;
        params.merge_prefixed("agg.", &spec.aggregator.init(rng, None)?)?;
        params.merge_prefixed("dec.", &spec.decoder.init(rng, Some(Q_HEAD_INIT))?)?;
        let mut external_encoders = Vec::new();
        for &peer in spec.agent_order.iter().filter(|&&p| p != agent_id) {
            external_encoders.push(ExternalEncoder {
                agent_id: peer,
                params: spec.encoder.init(rng, None)?,
            });
        }
        Ok(FedMlpQNet {
            agent_id,
            spec,
            params,
            external_encoders,
        })
    }

    pub fn local_encoder(&self) -> TensorBundle {
        self.params.extract_prefix("local.")
    }

    /// Overwrite the frozen copy of `peer`'s encoder; `peer` must be a construction-time participant.
    pub fn set_external(&mut self, peer: usize, encoder: TensorBundle) -> Result<()> {
        check_layout(&self.spec.encoder.layout(), &encoder)?;
        let slot = self
            .external_encoders
            .iter_mut()
            .find(|e| e.agent_id == peer)
            .ok_or_else(|| FedError::Compatibility(format!("agent {peer} is not part of this fixed federation")))?;
        slot.params = encoder;
        Ok(())
    }

    fn check_encoders(&self) -> Result<()> {
        let n = self.spec.agent_order.len();
        if self.external_encoders.len() + 1 != n {
            return Err(FedError::Compatibility(format!(
                "built for {n} encoders, holds {}",
                self.external_encoders.len() + 1
            )));
        }
        for &id in self.spec.agent_order.iter().filter(|&&p| p != self.agent_id) {
            let ext = self
                .external_encoders
                .iter()
                .find(|e| e.agent_id == id)
                .ok_or_else(|| FedError::Compatibility(format!("no encoder for agent {id}")))?;
            check_layout(&self.spec.encoder.layout(), &ext.params)?;
        }
        Ok(())
    }

    pub fn graph(&self, g: &mut Graph, bound: &Bound, obs: Var, act: Var, mode: NormMode) -> (Var, Vec<NormUpdate>) {
        let spec = &self.spec;
        let x = g.concat_cols(&[obs, act]);
        let (local, mut updates) = spec.encoder.graph(g, bound, "local.", x, mode);
        let mut parts = Vec::with_capacity(spec.agent_order.len());
        for &id in &spec.agent_order {
            if id == self.agent_id {
                parts.push(local);
                continue;
            }
            let ext = self
                .external_encoders
                .iter()
                .find(|e| e.agent_id == id)
                .expect("encoder set checked at construction");
            let eb = g.bind(&ext.params, false);
            parts.push(spec.encoder.graph(g, &eb, "", x, NormMode::Eval).0);
        }
        let joined = g.concat_cols(&parts);
        let (agg, u) = spec.aggregator.graph(g, bound, "agg.", joined, mode);
        updates.extend(u);
        let dec_in = g.concat_cols(&[agg, local]);
        let (q, u) = spec.decoder.graph(g, bound, "dec.", dec_in, mode);
        updates.extend(u);
        (q, updates)
    }
}

/// Q-value of one (observation, action) pair; batch norm in evaluation mode.
pub fn fedmlp_q_forward(qnet: &FedMlpQNet, obs: &[f64], action: &[f64]) -> Result<f64> {
    let spec = &qnet.spec;
    if obs.len() != spec.obs_dim || action.len() != spec.act_dim {
        return Err(FedError::Dimension("observation or action width mismatch".into()));
    }
    check_layout(&spec.layout(), &qnet.params)?;
    qnet.check_encoders()?;
    let mut g = Graph::new();
    let bound = g.bind(&qnet.params, false);
    let o = g.constant(Mat::from_vec(1, obs.len(), obs.to_vec()));
    let a = g.constant(Mat::from_vec(1, action.len(), action.to_vec()));
    let (q, _) = qnet.graph(&mut g, &bound, o, a, NormMode::Eval);
    let v = g.value(q).data[0];
    if !v.is_finite() {
        return Err(FedError::Numeric("non-finite Q-value".into()));
    }
    Ok(v)
}
