use super::tape::Mat;
use super::tensor::{Tensor, TensorBundle};
use crate::error::{FedError, Result};

/// Adaptive-moment optimiser over a [`TensorBundle`].
///
/// Moments are kept at rest in f32 alongside the parameters so the full state
/// round-trips through checkpoints; each update is computed in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: TensorBundle,
    v: TensorBundle,
}

impl Adam {
    pub fn new(lr: f64, params: &TensorBundle) -> Self {
        let zeros = zeros_like(params);
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is aligned with `params`' entries; `None`
    /// entries (buffers, frozen tensors) are left untouched.
    pub fn step(&mut self, params: &mut TensorBundle, grads: &[Option<Mat>]) {
        assert_eq!(grads.len(), params.len(), "gradient list must align with parameters");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ms = self.m.entries_mut();
        let vs = self.v.entries_mut();
        for ((((_, p), (_, m)), (_, v)), grad) in params.entries_mut().zip(ms).zip(vs).zip(grads) {
            let Some(grad) = grad else { continue };
            debug_assert_eq!(grad.data.len(), p.len());
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = grad.data[i];
                let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                pd[i] = (pd[i] as f64 - update) as f32;
            }
        }
    }

    /// Moments and step counter as one bundle (`m.*`, `v.*`, `step`).
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        b.merge_prefixed("m.", &self.m).expect("unique names");
        b.merge_prefixed("v.", &self.v).expect("unique names");
        b.insert("step", Tensor::scalar(self.step as f32)).expect("unique names");
        b
    }

    pub fn load_bundle(&mut self, b: &TensorBundle) -> Result<()> {
        let m = b.extract_prefix("m.");
        let v = b.extract_prefix("v.");
        self.m.check_compatible(&m)?;
        self.v.check_compatible(&v)?;
        let step = b
            .get("step")
            .and_then(|t| t.data().first().copied())
            .ok_or_else(|| FedError::Format("optimiser state lacks `step`".into()))?;
        self.m = m;
        self.v = v;
        self.step = step as u64;
        Ok(())
    }
}

pub(crate) fn zeros_like(b: &TensorBundle) -> TensorBundle {
    let mut out = TensorBundle::new();
    for (n, t) in b.entries() {
        out.insert(n.clone(), Tensor::zeros(t.shape().to_vec()))
            .expect("names unique in source");
    }
    out
}
