//! Attention-fused Q-function: one trainable local encoder, frozen peer
//! encoders, learned identity/CLS embeddings, a transformer and a decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ExternalEncoder;
use crate::error::{FedError, Result};
use crate::nets::mlp::check_layout;
use crate::nets::{Bound, EmbeddingTable, Graph, Mat, MlpSpec, NormMode, NormUpdate, TensorBundle, TransformerSpec, Var};

/// Q-head output layer init range.
pub(crate) const Q_HEAD_INIT: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedFormerSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Maps concat(obs, action) to `model_dim`.
    pub encoder: MlpSpec,
    pub transformer: TransformerSpec,
    /// Maps concat(CLS output, local encoding) to a scalar.
    pub decoder: MlpSpec,
    pub num_ids: usize,
}

impl FedFormerSpec {
    /// `encoder_layers` must end in the transformer width; the decoder gets a
    /// final scalar layer appended to `decoder_hidden`.
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        encoder_layers: Vec<usize>,
        transformer: TransformerSpec,
        decoder_hidden: Vec<usize>,
        batch_norm: bool,
        num_ids: usize,
    ) -> Result<Self> {
        let d = transformer.model_dim;
        let mut dec = decoder_hidden;
        dec.push(1);
        let spec = FedFormerSpec {
            obs_dim,
            act_dim,
            encoder: MlpSpec::new(obs_dim + act_dim, encoder_layers, batch_norm),
            transformer,
            decoder: MlpSpec::new(2 * d, dec, batch_norm),
            num_ids,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        self.decoder.validate()?;
        let d = self.transformer.model_dim;
        if self.encoder.input_dim != self.obs_dim + self.act_dim {
            return Err(FedError::Dimension("encoder input must be obs_dim + act_dim".into()));
        }
        if self.encoder.output_dim() != d {
            return Err(FedError::Dimension(format!(
                "encoder output {} must equal transformer width {d}",
                self.encoder.output_dim()
            )));
        }
        if self.decoder.input_dim != 2 * d || self.decoder.output_dim() != 1 {
            return Err(FedError::Dimension("decoder must map 2·model_dim to a scalar".into()));
        }
        if self.num_ids == 0 {
            return Err(FedError::InvalidArgument("identity table needs at least one row".into()));
        }
        Ok(())
    }

    pub fn embeddings(&self) -> EmbeddingTable {
        EmbeddingTable {
            num_ids: self.num_ids,
            dim: self.transformer.model_dim,
        }
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut add = |prefix: &str, layout: Vec<(String, Vec<usize>)>| {
            out.extend(layout.into_iter().map(|(n, s)| (format!("{prefix}{n}"), s)));
        };
        add("local.", self.encoder.layout());
        add("emb.", self.embeddings().layout());
        add("tf.", self.transformer.layout());
        add("dec.", self.decoder.layout());
        out
    }

    /// Trainable scalar count (batch-norm running statistics excluded).
    pub fn num_trainable_params(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(n, _)| !n.contains("running_"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedQNet {
    pub agent_id: usize,
    pub spec: FedFormerSpec,
    /// `local.*`, `emb.*`, `tf.*` and `dec.*`: everything the optimiser updates.
    pub params: TensorBundle,
    pub external_encoders: Vec<ExternalEncoder>,
}

impl FederatedQNet {
    /// Fresh network; each of `peer_ids` gets a randomly initialised frozen encoder.
    pub fn new<R: Rng + ?Sized>(agent_id: usize, spec: FedFormerSpec, peer_ids: &[usize], rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if agent_id >= spec.num_ids {
            return Err(FedError::InvalidArgument(format!(
                "agent id {agent_id} outside identity table of {} rows",
                spec.num_ids
            )));
        }
        let mut params = TensorBundle::new();
        params.merge_prefixed("local.", &spec.encoder.init(rng, None)?)?;
        params.merge_prefixed("emb.", &spec.embeddings().init(rng)?)?;
        params.merge_prefixed("tf.", &spec.transformer.init(rng)?)?;
        params.merge_prefixed("dec.", &spec.decoder.init(rng, Some(Q_HEAD_INIT))?)?;
        let mut net = FederatedQNet {
            agent_id,
            spec,
            params,
            external_encoders: Vec::new(),
        };
        for &peer in peer_ids {
            let enc = net.spec.encoder.init(rng, None)?;
            net.set_external(peer, enc)?;
        }
        Ok(net)
    }

    pub fn local_encoder(&self) -> TensorBundle {
        self.params.extract_prefix("local.")
    }

    /// Install (or overwrite) the frozen copy of `peer`'s encoder.
    pub fn set_external(&mut self, peer: usize, encoder: TensorBundle) -> Result<()> {
        if peer == self.agent_id {
            return Err(FedError::InvalidArgument("an agent cannot hold itself as an external".into()));
        }
        if peer >= self.spec.num_ids {
            return Err(FedError::Compatibility(format!(
                "peer id {peer} outside identity table of {} rows",
                self.spec.num_ids
            )));
        }
        check_layout(&self.spec.encoder.layout(), &encoder)?;
        match self.external_encoders.iter_mut().find(|e| e.agent_id == peer) {
            Some(slot) => slot.params = encoder,
            None => self.external_encoders.push(ExternalEncoder {
                agent_id: peer,
                params: encoder,
            }),
        }
        Ok(())
    }

    /// Record Q(obs, act) for a batch. Externals are bound as constants and
    /// always use their running statistics.
    pub fn graph(&self, g: &mut Graph, bound: &Bound, obs: Var, act: Var, mode: NormMode) -> (Var, Vec<NormUpdate>) {
        let externals = self.bind_externals(g);
        self.graph_with_externals(g, bound, &externals, obs, act, mode)
    }

    /// Bind every external encoder as a non-trainable leaf set, in slot order.
    pub fn bind_externals(&self, g: &mut Graph) -> Vec<Bound> {
        self.external_encoders.iter().map(|e| g.bind(&e.params, false)).collect()
    }

    /// Same as [`FederatedQNet::graph`] with the external bindings supplied by
    /// the caller, so their gradients can be inspected after `backward`.
    pub fn graph_with_externals(
        &self,
        g: &mut Graph,
        bound: &Bound,
        externals: &[Bound],
        obs: Var,
        act: Var,
        mode: NormMode,
    ) -> (Var, Vec<NormUpdate>) {
        let spec = &self.spec;
        let table = spec.embeddings();
        let x = g.concat_cols(&[obs, act]);
        let (local, mut updates) = spec.encoder.graph(g, bound, "local.", x, mode);

        let mut tokens = Vec::with_capacity(self.external_encoders.len() + 2);
        let id = table.id_graph(g, bound, "emb.", self.agent_id);
        tokens.push(g.add_bias(local, id));
        for (ext, eb) in self.external_encoders.iter().zip(externals) {
            let (e, _) = spec.encoder.graph(g, eb, "", x, NormMode::Eval);
            let id = table.id_graph(g, bound, "emb.", ext.agent_id);
            tokens.push(g.add_bias(e, id));
        }
        let rows = g.value(x).rows;
        tokens.push(table.cls_graph(g, bound, "emb.", rows));

        let t = tokens.len();
        let set = g.interleave(&tokens);
        let out = spec.transformer.graph(g, bound, "tf.", set, t);
        let cls = g.take_token(out, t, t - 1);
        let dec_in = g.concat_cols(&[cls, local]);
        let (q, dec_updates) = spec.decoder.graph(g, bound, "dec.", dec_in, mode);
        updates.extend(dec_updates);
        (q, updates)
    }
}

/// Q-value of one (observation, action) pair; batch norm in evaluation mode.
pub fn fedformer_q_forward(qnet: &FederatedQNet, obs: &[f64], action: &[f64]) -> Result<f64> {
    let spec = &qnet.spec;
    if obs.len() != spec.obs_dim || action.len() != spec.act_dim {
        return Err(FedError::Dimension(format!(
            "expected obs {} / action {}, got {} / {}",
            spec.obs_dim,
            spec.act_dim,
            obs.len(),
            action.len()
        )));
    }
    check_layout(&spec.layout(), &qnet.params)?;
    for ext in &qnet.external_encoders {
        check_layout(&spec.encoder.layout(), &ext.params)
            .map_err(|e| FedError::Compatibility(format!("external encoder {}: {e}", ext.agent_id)))?;
    }
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
