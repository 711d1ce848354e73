//! Network architectures and differentiable primitives.

pub mod embedding;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod policy;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use embedding::EmbeddingTable;
pub use gradcheck::{check_graph_gradients, finite_diff_grad_check, GradCheckReport};
pub use mlp::{mlp_forward, Activation, MlpSpec, NormMode, NormUpdate};
pub use optim::Adam;
pub use policy::{tanh_gaussian_sample, PolicyNet, PolicySpec, LOG_STD_MAX, LOG_STD_MIN, TANH_EPS};
pub use tape::{Bound, Graph, Gradients, Mat, Var};
pub use tensor::{Tensor, TensorBundle};
pub use transformer::{attention_layer, transformer_forward, TransformerSpec};

use rand::Rng;

/// Uniform `[-bound, bound]` values as f32.
pub(crate) fn uniform_values<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f32> {
    (0..n)
        .map(|_| rng.random_range(-bound..=bound) as f32)
        .collect()
}
