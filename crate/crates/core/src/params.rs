//! Named parameter collections shared by the models, the optimizer, the EMA
//! shadow copy and the checkpoint format.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Elementwise EMA update: self = alpha * self + (1 - alpha) * other.
    pub fn ema_from(&mut self, other: &Self, alpha: T) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let one_minus = T::one() - alpha;
        for (dst, src) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            if dst.shape() != src.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter shapes {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            let d = dst.data_mut();
            for (dv, &sv) in d.iter_mut().zip(src.data().iter()) {
                *dv = alpha * *dv + one_minus * sv;
            }
        }
        Ok(())
    }

    /// Flattens all tensors into one little-endian byte blob.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_scalars() * T::byte_width());
        for t in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes_vec());
            }
        }
        out
    }

    /// Restores tensor contents from a blob produced by `to_blob` on a
    /// parameter set with identical structure.
    pub fn load_blob(&mut self, blob: &[u8]) -> Result<()> {
        let w = T::byte_width();
        if blob.len() != self.total_scalars() * w {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match {} parameters",
                blob.len(),
                self.total_scalars()
            )));
        }
        let mut off = 0usize;
        for t in &mut self.tensors {
            let n = t.numel();
            let d = t.data_mut();
            for v in d.iter_mut() {
                *v = T::from_le_slice(&blob[off..off + w]);
                off += w;
            }
            let _ = n;
        }
        Ok(())
    }

    /// Structure manifest: (name, shape) pairs, for checkpoint validation.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(other.tensors.iter())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        p.add("b", Tensor::from_fn(&[4], |i| -(i as f32)));
        let blob = p.to_blob();
        let mut q = ParamSet::<f32>::new();
        q.add("a", Tensor::zeros(&[2, 3]));
        q.add("b", Tensor::zeros(&[4]));
        q.load_blob(&blob).unwrap();
        assert_eq!(q.max_abs_diff(&p), 0.0);
    }

    #[test]
    fn blob_length_checked() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", Tensor::zeros(&[3]));
        assert!(p.load_blob(&[0u8; 4]).is_err());
    }
}
