//! The pluggable Q-function used by the SAC loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::fedformer::Q_HEAD_INIT;
use crate::federation::{ExternalEncoder, FedMlpQNet, FederatedQNet};
use crate::nets::mlp::check_layout;
use crate::nets::{Bound, Graph, Mat, MlpSpec, NormMode, NormUpdate, TensorBundle, Var};

/// Plain Q(s, a) = MLP(concat(s, a)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpQSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub net: MlpSpec,
}

impl MlpQSpec {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: Vec<usize>, batch_norm: bool) -> Result<Self> {
        let mut layers = hidden;
        layers.push(1);
        let net = MlpSpec::new(obs_dim + act_dim, layers, batch_norm);
        net.validate()?;
        Ok(MlpQSpec { obs_dim, act_dim, net })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpQNet {
    pub spec: MlpQSpec,
    pub params: TensorBundle,
}

impl MlpQNet {
    pub fn new<R: Rng + ?Sized>(spec: MlpQSpec, rng: &mut R) -> Result<Self> {
        let params = spec.net.init(rng, Some(Q_HEAD_INIT))?;
        Ok(MlpQNet { spec, params })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QNet {
    Mlp(MlpQNet),
    FedFormer(FederatedQNet),
    FedMlp(FedMlpQNet),
}

impl QNet {
    /// Everything the optimiser owns (batch-norm buffers included; they never get gradients).
    pub fn params(&self) -> &TensorBundle {
        match self {
            QNet::Mlp(q) => &q.params,
            QNet::FedFormer(q) => &q.params,
            QNet::FedMlp(q) => &q.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut TensorBundle {
        match self {
            QNet::Mlp(q) => &mut q.params,
            QNet::FedFormer(q) => &mut q.params,
            QNet::FedMlp(q) => &mut q.params,
        }
    }

    pub fn externals(&self) -> &[ExternalEncoder] {
        match self {
            QNet::Mlp(_) => &[],
            QNet::FedFormer(q) => &q.external_encoders,
            QNet::FedMlp(q) => &q.external_encoders,
        }
    }

    pub fn externals_mut(&mut self) -> &mut [ExternalEncoder] {
        match self {
            QNet::Mlp(_) => &mut [],
            QNet::FedFormer(q) => &mut q.external_encoders,
            QNet::FedMlp(q) => &mut q.external_encoders,
        }
    }

    pub fn set_external(&mut self, peer: usize, encoder: TensorBundle) -> Result<()> {
        match self {
            QNet::Mlp(_) => Err(FedError::Compatibility("plain Q-network has no external encoders".into())),
            QNet::FedFormer(q) => q.set_external(peer, encoder),
            QNet::FedMlp(q) => q.set_external(peer, encoder),
        }
    }

    /// The trainable encoder peers receive, if this variant has one.
    pub fn local_encoder(&self) -> Option<TensorBundle> {
        match self {
            QNet::Mlp(_) => None,
            QNet::FedFormer(q) => Some(q.local_encoder()),
            QNet::FedMlp(q) => Some(q.local_encoder()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            QNet::Mlp(q) => q.spec.obs_dim,
            QNet::FedFormer(q) => q.spec.obs_dim,
            QNet::FedMlp(q) => q.spec.obs_dim,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self {
            QNet::Mlp(q) => q.spec.act_dim,
            QNet::FedFormer(q) => q.spec.act_dim,
            QNet::FedMlp(q) => q.spec.act_dim,
        }
    }

    /// Same names and shapes for parameters and externals.
    pub fn check_compatible(&self, other: &QNet) -> Result<()> {
        self.params().check_compatible(other.params())?;
        if self.externals().len() != other.externals().len() {
            return Err(FedError::Compatibility("external encoder counts differ".into()));
        }
        for (a, b) in self.externals().iter().zip(other.externals()) {
            if a.agent_id != b.agent_id {
                return Err(FedError::Compatibility("external encoder ids differ".into()));
            }
            a.params.check_compatible(&b.params)?;
        }
        Ok(())
    }

    pub(crate) fn check_params(&self) -> Result<()> {
        match self {
            QNet::Mlp(q) => check_layout(&q.spec.net.layout(), &q.params),
            QNet::FedFormer(q) => check_layout(&q.spec.layout(), &q.params),
            QNet::FedMlp(q) => check_layout(&q.spec.layout(), &q.params),
        }
    }

    /// Record Q(obs, act) (B×1) with `bound` standing in for [`QNet::params`].
    pub fn graph(&self, g: &mut Graph, bound: &Bound, obs: Var, act: Var, mode: NormMode) -> (Var, Vec<NormUpdate>) {
        match self {
            QNet::Mlp(q) => {
                let x = g.concat_cols(&[obs, act]);
                q.spec.net.graph(g, bound, "", x, mode)
            }
            QNet::FedFormer(q) => q.graph(g, bound, obs, act, mode),
            QNet::FedMlp(q) => q.graph(g, bound, obs, act, mode),
        }
    }

    /// Batch of Q-values, no gradients.
    pub fn evaluate(&self, obs: &Mat, act: &Mat, mode: NormMode) -> Vec<f64> {
        let mut g = Graph::new();
        let bound = g.bind(self.params(), false);
        let o = g.constant(obs.clone());
        let a = g.constant(act.clone());
        let (q, _) = self.graph(&mut g, &bound, o, a, mode);
        g.value(q).data.clone()
    }
}
