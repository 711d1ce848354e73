//! `.ffwt` tensor-bundle encoding.
//!
//! ```text
//! "FFWT" | version: u16 | count: u32 |
//!   count × ( name_len: u16 | name | rank: u8 | dims: u32 × rank | f32 × Π dims )
//! ```
//! Every integer and float is little-endian; data is row-major.

use crate::error::{FedError, Result};
use crate::nets::{Tensor, TensorBundle};

pub const MAGIC: &[u8; 4] = b"FFWT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;

/// Exact encoded size without encoding.
pub fn serialized_len(bundle: &TensorBundle) -> usize {
    HEADER_LEN
        + bundle
            .entries()
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 4 * t.shape().len() + 4 * t.len())
            .sum::<usize>()
}

pub fn serialize_bundle(bundle: &TensorBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_len(bundle));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (name, t) in bundle.entries() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FedError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn deserialize_bundle(bytes: &[u8]) -> Result<TensorBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header").map_err(|_| FedError::Format("missing magic".into()))? != MAGIC {
        return Err(FedError::Format("bad magic".into()));
    }
    let version = r.u16("header")?;
    if version != VERSION {
        return Err(FedError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("header")?;
    let mut bundle = TensorBundle::new();
    for k in 0..count {
        let what = format!("tensor #{k}");
        let len = r.u16(&what)? as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| FedError::Format(format!("{what}: name is not UTF-8")))?
            .to_string();
        let what = format!("tensor `{name}`");
        let rank = r.take(1, &what)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&what)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FedError::Format(format!("{what}: shape overflows")))?;
        let raw = r.take(
            n.checked_mul(4).ok_or_else(|| FedError::Format(format!("{what}: shape overflows")))?,
            &what,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric(format!("{what} holds non-finite values")));
        }
        bundle
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| FedError::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(FedError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bundle_is_header_only() {
        let bytes = serialize_bundle(&TensorBundle::new());
        assert_eq!(bytes.len(), 10);
        assert_eq!(&bytes[..4], b"FFWT");
        assert_eq!(deserialize_bundle(&bytes).unwrap(), TensorBundle::new());
    }

    #[test]
    fn one_matrix_layout() {
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let bytes = serialize_bundle(&b);
        assert_eq!(bytes.len(), 38);
        assert_eq!(serialized_len(&b), 38);
        assert_eq!(&bytes[4..10], &[1, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[10..13], &[1, 0, b'w']);
        assert_eq!(bytes[13], 2);
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert!(deserialize_bundle(&bytes).unwrap().bit_eq(&b));
    }

    #[test]
    fn corrupt_inputs() {
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let mut bytes = serialize_bundle(&b);
        let err = deserialize_bundle(&bytes[..30]).unwrap_err();
        assert!(matches!(&err, FedError::Truncated(m) if m.contains("`w`")));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(deserialize_bundle(&bytes), Err(FedError::Format(_))));

        let mut nan = TensorBundle::new();
        nan.insert("w", Tensor::new(vec![1], vec![f32::NAN]).unwrap()).unwrap();
        assert!(matches!(deserialize_bundle(&serialize_bundle(&nan)), Err(FedError::Numeric(_))));
    }
}
