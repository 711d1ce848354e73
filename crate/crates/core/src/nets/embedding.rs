use rand::Rng;

use super::tape::{Bound, Graph, Var};
use super::tensor::{Tensor, TensorBundle};
use super::uniform_values;
use crate::error::{FedError, Result};

/// Learned per-agent identity rows plus the aggregate (CLS) token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub num_ids: usize,
    pub dim: usize,
}

const INIT_RANGE: f64 = 0.1;

impl EmbeddingTable {
    pub fn new(num_ids: usize, dim: usize) -> Result<Self> {
        if num_ids == 0 || dim == 0 {
            return Err(FedError::InvalidArgument("embedding table must be non-empty".into()));
        }
        Ok(EmbeddingTable { num_ids, dim })
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("ids".to_string(), vec![self.num_ids, self.dim]),
            ("cls".to_string(), vec![1, self.dim]),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TensorBundle> {
        let mut b = TensorBundle::new();
        for (name, shape) in self.layout() {
            let n = shape.iter().product();
            b.insert(name, Tensor::new(shape, uniform_values(rng, n, INIT_RANGE))?)?;
        }
        Ok(b)
    }

    /// `rows` copies of identity row `id`.
    pub fn id_graph(&self, g: &mut Graph, bound: &Bound, prefix: &str, id: usize) -> Var {
        assert!(id < self.num_ids, "agent id {id} outside embedding table");
        g.select_row(bound.get(&format!("{prefix}ids")), id)
    }

    pub fn cls_graph(&self, g: &mut Graph, bound: &Bound, prefix: &str, rows: usize) -> Var {
        g.broadcast_rows(bound.get(&format!("{prefix}cls")), rows)
    }
}
