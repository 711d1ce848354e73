//! Named parameter storage.
//!
//! Parameters live at rest as 32-bit floats so that a bundle survives the wire
//! format bit-exactly. Arithmetic on them is done in 64-bit (see [`super::tape`]).

use crate::error::{FedError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FedError::Dimension(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a matrix: rank-2 as-is, rank-1 as a single row, rank-0 as 1×1.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            dims => {
                let last = *dims.last().unwrap();
                (self.data.len() / last.max(1), last)
            }
        }
    }
}

/// Ordered, uniquely named collection of tensors: one network's state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    entries: Vec<(String, Tensor)>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(FedError::InvalidArgument(format!("duplicate tensor name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names, order and shapes.
    pub fn same_structure(&self, other: &TensorBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }

    pub fn check_compatible(&self, other: &TensorBundle) -> Result<()> {
        if self.same_structure(other) {
            return Ok(());
        }
        let detail = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|((na, ta), (nb, tb))| na != nb || ta.shape != tb.shape)
            .map(|((na, ta), (nb, tb))| {
                format!("`{na}` {:?} vs `{nb}` {:?}", ta.shape, tb.shape)
            })
            .unwrap_or_else(|| {
                format!("{} vs {} tensors", self.entries.len(), other.entries.len())
            });
        Err(FedError::Compatibility(detail))
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn extract_prefix(&self, prefix: &str) -> TensorBundle {
        TensorBundle {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Append every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &TensorBundle) -> Result<()> {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone())?;
        }
        Ok(())
    }

    /// Overwrite the entries under `prefix` with `other` (structure must match).
    pub fn replace_prefix(&mut self, prefix: &str, other: &TensorBundle) -> Result<()> {
        self.extract_prefix(prefix).check_compatible(other)?;
        for (n, t) in &other.entries {
            let full = format!("{prefix}{n}");
            *self.get_mut(&full).expect("checked above") = t.clone();
        }
        Ok(())
    }

    /// Remove every entry under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
    }

    /// Bitwise equality of every value (distinguishes -0.0 and NaN payloads).
    pub fn bit_eq(&self, other: &TensorBundle) -> bool {
        self.same_structure(other)
            && self.entries.iter().zip(&other.entries).all(|((_, a), (_, b))| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Euclidean distance between two structurally identical bundles.
    pub fn l2_distance(&self, other: &TensorBundle) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data.iter().zip(&b.data))
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_duplicates() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(b.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn prefix_round_trip() {
        let mut inner = TensorBundle::new();
        inner.insert("a", Tensor::scalar(1.0)).unwrap();
        inner.insert("b", Tensor::zeros(vec![2, 3])).unwrap();
        let mut outer = TensorBundle::new();
        outer.insert("x", Tensor::scalar(5.0)).unwrap();
        outer.merge_prefixed("enc.", &inner).unwrap();
        assert_eq!(outer.extract_prefix("enc."), inner);

        let mut changed = inner.clone();
        changed.get_mut("a").unwrap().data_mut()[0] = 9.0;
        outer.replace_prefix("enc.", &changed).unwrap();
        assert_eq!(outer.get("enc.a").unwrap().data(), &[9.0]);
        outer.remove_prefix("enc.");
        assert_eq!(outer.len(), 1);
    }

    #[test]
    fn compatibility_reports_first_difference() {
        let mut a = TensorBundle::new();
        a.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::zeros(vec![2, 3])).unwrap();
        let err = a.check_compatible(&b).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }
}
