//! Post-norm transformer encoder over unordered sets of embeddings.
//!
//! There is no positional encoding: permuting the input rows permutes the output
//! rows the same way. Each block is multi-head self-attention followed by a
//! position-wise feed-forward layer, each wrapped in residual + layer norm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::check_layout;
use super::tape::{Bound, Graph, Mat, Var};
use super::tensor::{Tensor, TensorBundle};
use super::uniform_values;
use crate::error::{FedError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
}

const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

impl TransformerSpec {
    /// Standard block with `ff_dim = 2 · model_dim`.
    pub fn new(layers: usize, heads: usize, model_dim: usize) -> Result<Self> {
        let spec = TransformerSpec {
            layers,
            heads,
            model_dim,
            ff_dim: 2 * model_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(FedError::InvalidArgument("transformer needs at least one layer".into()));
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(FedError::InvalidArgument(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ff_dim == 0 {
            return Err(FedError::InvalidArgument("ff_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.model_dim, self.ff_dim);
        let mut out = Vec::new();
        for l in 0..self.layers {
            for p in PROJECTIONS {
                out.push((format!("b{l}.w{p}"), vec![d, d]));
                out.push((format!("b{l}.b{p}"), vec![d]));
            }
            out.push((format!("b{l}.ln1.gamma"), vec![d]));
            out.push((format!("b{l}.ln1.beta"), vec![d]));
            out.push((format!("b{l}.ff1.weight"), vec![d, f]));
            out.push((format!("b{l}.ff1.bias"), vec![f]));
            out.push((format!("b{l}.ff2.weight"), vec![f, d]));
            out.push((format!("b{l}.ff2.bias"), vec![d]));
            out.push((format!("b{l}.ln2.gamma"), vec![d]));
            out.push((format!("b{l}.ln2.beta"), vec![d]));
        }
        out
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TensorBundle> {
        self.validate()?;
        let mut b = TensorBundle::new();
        for (name, shape) in self.layout() {
            let n = shape.iter().product();
            let t = if name.contains(".ln") {
                let fill = if name.ends_with("gamma") { 1.0 } else { 0.0 };
                Tensor::filled(shape, fill)
            } else {
                let fan_in = if name.contains("ff2") { self.ff_dim } else { self.model_dim };
                Tensor::new(shape, uniform_values(rng, n, 1.0 / (fan_in as f64).sqrt()))?
            };
            b.insert(name, t)?;
        }
        Ok(b)
    }

    pub fn check_params(&self, params: &TensorBundle) -> Result<()> {
        self.validate()?;
        check_layout(&self.layout(), params)
    }

    /// One encoder block; also returns the attention node for inspection.
    pub fn block_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix: &str,
        layer: usize,
        x: Var,
        tokens: usize,
    ) -> (Var, Var) {
        let p = |name: &str| format!("{prefix}b{layer}.{name}");
        let proj = |g: &mut Graph, which: &str, input: Var| {
            let w = bound.get(&p(&format!("w{which}")));
            let b = bound.get(&p(&format!("b{which}")));
            let h = g.matmul(input, w);
            g.add_bias(h, b)
        };
        let q = proj(g, "q", x);
        let k = proj(g, "k", x);
        let v = proj(g, "v", x);
        let attn = g.attention(q, k, v, tokens, self.heads);
        let o = proj(g, "o", attn);
        let res = g.add(x, o);
        let h = g.layer_norm(res, bound.get(&p("ln1.gamma")), bound.get(&p("ln1.beta")));

        let f = g.matmul(h, bound.get(&p("ff1.weight")));
        let f = g.add_bias(f, bound.get(&p("ff1.bias")));
        let f = g.relu(f);
        let f = g.matmul(f, bound.get(&p("ff2.weight")));
        let f = g.add_bias(f, bound.get(&p("ff2.bias")));
        let res = g.add(h, f);
        let out = g.layer_norm(res, bound.get(&p("ln2.gamma")), bound.get(&p("ln2.beta")));
        (out, attn)
    }

    /// All blocks; `x` is (sets·tokens)×model_dim in interleaved layout.
    pub fn graph(&self, g: &mut Graph, bound: &Bound, prefix: &str, x: Var, tokens: usize) -> Var {
        (0..self.layers).fold(x, |h, l| self.block_graph(g, bound, prefix, l, h, tokens).0)
    }

    /// Trainable parameter count.
    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

fn check_input(e: &Mat, spec: &TransformerSpec) -> Result<()> {
    if e.rows == 0 {
        return Err(FedError::InvalidArgument("attention over an empty set".into()));
    }
    if e.cols != spec.model_dim {
        return Err(FedError::Dimension(format!(
            "embedding width {} != model_dim {}",
            e.cols, spec.model_dim
        )));
    }
    if !e.is_finite() {
        return Err(FedError::Numeric("non-finite attention input".into()));
    }
    Ok(())
}

/// One block (`layer` 0 of `params`) on a single set of `n` embeddings.
/// Returns the n×d output and the attention probabilities `[head][query][key]`.
pub fn attention_layer(
    e: &Mat,
    params: &TensorBundle,
    spec: &TransformerSpec,
) -> Result<(Mat, Vec<f64>)> {
    spec.check_params(params)?;
    check_input(e, spec)?;
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let x = g.constant(e.clone());
    let (out, attn) = spec.block_graph(&mut g, &bound, "", 0, x, e.rows);
    let probs = g.attention_probs(attn).expect("attention node").to_vec();
    Ok((g.value(out).clone(), probs))
}

/// Full encoder stack on a single set of `n` embeddings.
pub fn transformer_forward(e: &Mat, spec: &TransformerSpec, params: &TensorBundle) -> Result<Mat> {
    spec.check_params(params)?;
    check_input(e, spec)?;
    let mut g = Graph::new();
    let bound = g.bind(params, false);
    let x = g.constant(e.clone());
    let out = spec.graph(&mut g, &bound, "", x, e.rows);
    Ok(g.value(out).clone())
}
