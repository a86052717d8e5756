//! Adam optimizer over a `ParamSet`.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.get(i).shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.get(i).shape()))
            .collect();
        Self {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update. `grads` pairs parameter indices with gradient
    /// tensors; parameters without a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(usize, Tensor<T>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (idx, g) in grads {
            let m = self.m[*idx].data_mut();
            let v = self.v[*idx].data_mut();
            let p = params.get_mut(*idx).data_mut();
            for ((pv, (mv, vv)), &gv) in p
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.data().iter())
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Serialized state: step counter plus the moment blobs.
    pub fn state_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.iter().chain(self.v.iter()) {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes_vec());
            }
        }
        out
    }

    pub fn load_state_blob(&mut self, blob: &[u8]) -> crate::error::Result<()> {
        let w = T::byte_width();
        let n_scalars: usize = self
            .m
            .iter()
            .chain(self.v.iter())
            .map(|t| t.numel())
            .sum();
        if blob.len() != 8 + n_scalars * w {
            return Err(crate::error::Error::Checkpoint(format!(
                "optimizer blob length {} does not match expected {}",
                blob.len(),
                8 + n_scalars * w
            )));
        }
        self.step = u64::from_le_bytes(blob[..8].try_into().unwrap());
        let mut off = 8usize;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for v in t.data_mut().iter_mut() {
                *v = T::from_le_slice(&blob[off..off + w]);
                off += w;
            }
        }
        Ok(())
    }
}
