//! Feed-forward stacks: affine layers, optional batch norm, ReLU between layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, Bound, Graph, Mat, Var};
use super::tensor::{Tensor, TensorBundle};
use super::uniform_values;
use crate::error::{FedError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
}

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with the batch's own statistics.
    Train,
    /// Normalise with the stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Output width of each affine layer; the last layer is linear.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
}

/// Running-statistics update produced by a training-mode pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub stats: BatchStats,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl MlpSpec {
    pub fn new(input_dim: usize, layer_sizes: Vec<usize>, batch_norm: bool) -> Self {
        MlpSpec {
            input_dim,
            layer_sizes,
            activation: Activation::Relu,
            batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() {
            return Err(FedError::InvalidArgument("MLP needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.layer_sizes.contains(&0) {
            return Err(FedError::InvalidArgument("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    fn widths(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_dim)
            .chain(self.layer_sizes.iter().copied())
            .zip(self.layer_sizes.iter().copied())
    }

    /// Fan-in uniform initialisation. `final_bound` overrides the range of the
    /// last layer (small output layers keep initial Q-values and actions near zero).
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, final_bound: Option<f64>) -> Result<TensorBundle> {
        self.validate()?;
        let mut b = TensorBundle::new();
        let last = self.layer_sizes.len() - 1;
        for (k, (fan_in, fan_out)) in self.widths().enumerate() {
            let bound = match final_bound {
                Some(fb) if k == last => fb,
                _ => 1.0 / (fan_in as f64).sqrt(),
            };
            b.insert(
                format!("l{k}.weight"),
                Tensor::new(vec![fan_in, fan_out], uniform_values(rng, fan_in * fan_out, bound))?,
            )?;
            b.insert(
                format!("l{k}.bias"),
                Tensor::new(vec![fan_out], uniform_values(rng, fan_out, bound))?,
            )?;
            if self.batch_norm && k < last {
                b.insert(format!("bn{k}.gamma"), Tensor::filled(vec![fan_out], 1.0))?;
                b.insert(format!("bn{k}.beta"), Tensor::zeros(vec![fan_out]))?;
                b.insert(format!("bn{k}.running_mean"), Tensor::zeros(vec![fan_out]))?;
                b.insert(format!("bn{k}.running_var"), Tensor::filled(vec![fan_out], 1.0))?;
            }
        }
        Ok(b)
    }

    /// Expected `(name, shape)` layout of the parameter bundle.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let last = self.layer_sizes.len().saturating_sub(1);
        let mut out = Vec::new();
        for (k, (fan_in, fan_out)) in self.widths().enumerate() {
            out.push((format!("l{k}.weight"), vec![fan_in, fan_out]));
            out.push((format!("l{k}.bias"), vec![fan_out]));
            if self.batch_norm && k < last {
                for stat in ["gamma", "beta", "running_mean", "running_var"] {
                    out.push((format!("bn{k}.{stat}"), vec![fan_out]));
                }
            }
        }
        out
    }

    /// Check that `params` has this spec's layout.
    pub fn check_params(&self, params: &TensorBundle) -> Result<()> {
        self.validate()?;
        check_layout(&self.layout(), params)
    }

    /// Record the forward pass into `g`.
    pub fn graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix: &str,
        input: Var,
        mode: NormMode,
    ) -> (Var, Vec<NormUpdate>) {
        let last = self.layer_sizes.len() - 1;
        let mut x = input;
        let mut updates = Vec::new();
        for k in 0..self.layer_sizes.len() {
            let w = bound.get(&format!("{prefix}l{k}.weight"));
            let b = bound.get(&format!("{prefix}l{k}.bias"));
            let h = g.matmul(x, w);
            x = g.add_bias(h, b);
            if k == last {
                break;
            }
            if self.batch_norm {
                let gamma = bound.get(&format!("{prefix}bn{k}.gamma"));
                let beta = bound.get(&format!("{prefix}bn{k}.beta"));
                let mean_name = format!("{prefix}bn{k}.running_mean");
                let var_name = format!("{prefix}bn{k}.running_var");
                x = match mode {
                    NormMode::Train => {
                        let (y, stats) = g.batch_norm(x, gamma, beta);
                        updates.push(NormUpdate {
                            mean_name,
                            var_name,
                            stats,
                        });
                        y
                    }
                    NormMode::Eval => {
                        let mean = g.value(bound.get(&mean_name)).data.clone();
                        let var = g.value(bound.get(&var_name)).data.clone();
                        g.fixed_norm(x, gamma, beta, &mean, &var)
                    }
                };
            }
            x = match self.activation {
                Activation::Relu => g.relu(x),
            };
        }
        (x, updates)
    }
}

pub(crate) fn check_layout(layout: &[(String, Vec<usize>)], params: &TensorBundle) -> Result<()> {
    let entries = params.entries();
    if entries.len() != layout.len() {
        return Err(FedError::Compatibility(format!(
            "expected {} tensors, found {}",
            layout.len(),
            entries.len()
        )));
    }
    for ((name, shape), (n, t)) in layout.iter().zip(entries) {
        if name != n || shape.as_slice() != t.shape() {
            return Err(FedError::Compatibility(format!(
                "expected `{name}` {shape:?}, found `{n}` {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Fold batch statistics into the running averages stored in `params`.
pub fn apply_norm_updates(params: &mut TensorBundle, updates: &[NormUpdate]) {
    for u in updates {
        if let Some(t) = params.get_mut(&u.mean_name) {
            for (r, m) in t.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * m) as f32;
            }
        }
        if let Some(t) = params.get_mut(&u.var_name) {
            for (r, v) in t.data_mut().iter_mut().zip(&u.stats.var_unbiased) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v) as f32;
            }
        }
    }
}

/// Evaluate one input vector (batch norm uses running statistics).
pub fn mlp_forward(params: &TensorBundle, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if input.len() != spec.input_dim {
        return Err(FedError::Dimension(format!(
            "MLP expects input width {}, got {}",
            spec.input_dim,
            input.len()
        )));
    }
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let x = g.constant(Mat::from_vec(1, input.len(), input.to_vec()));
    let (y, _) = spec.graph(&mut g, &bound, "", x, NormMode::Eval);
    Ok(g.value(y).data.clone())
}
