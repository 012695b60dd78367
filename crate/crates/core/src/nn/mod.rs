//! Minimal f64 tape autodiff for the small convolutional models in this
//! crate. Everything is deterministic: immediate-mode forward, enum-dispatch
//! backward, parameter updates in registration order. Gradients of every
//! loss are validated against central finite differences in the test suites.

mod conv;
mod tape;

pub use tape::{Graph, ValueId};

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Activation shape: channels x height x width. Vectors are (c, 1, 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn vec(c: usize) -> Self {
        Shape { c, h: 1, w: 1 }
    }

    pub fn scalar() -> Self {
        Shape { c: 1, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter tensors in registration order; the registration order is
/// the serialization order and the optimizer order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// He-style normal init scaled by fan-in.
    pub fn add_randn(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let mut data = vec![0.0; n];
        for v in data.iter_mut() {
            *v = std * rng.normal();
        }
        self.add(name, shape, data)
    }

    /// Normal init with an explicit standard deviation.
    pub fn add_randn_std(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for v in data.iter_mut() {
            *v = std * rng.normal();
        }
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn any_non_finite(&self) -> bool {
        self.tensors
            .iter()
            .any(|t| t.data.iter().any(|v| !v.is_finite()))
    }

    /// Little-endian f64 blob in registration order; exact round trip.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 8);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load_blob(&mut self, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.total_values() * 8 {
            return Err(Error::ModelMismatch(format!(
                "parameter blob has {} bytes, expected {}",
                bytes.len(),
                self.total_values() * 8
            )));
        }
        let mut off = 0;
        for t in self.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> Vec<ParamMeta> {
        self.tensors
            .iter()
            .map(|t| ParamMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Per-parameter gradient buffers, parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }
}

/// Adam with bias correction. `mask`, when given, restricts the update (and
/// the moment updates) to the listed tensors, which keeps optimizer groups
/// fully isolated.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
        mask: Option<&[bool]>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            if let Some(mask) = mask {
                if !mask[i] {
                    continue;
                }
            }
            let g = &grads.grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                tensor.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `lr_max` to `lr_min` over `total` epochs.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let t = epoch as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Sinusoidal time embedding of dimension `dim` (even).
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half.max(2) - 1) as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_bit_exact() {
        let mut rng = Rng::seed_from(5);
        let mut store = ParamStore::new();
        store.add_randn("w1", &[4, 3], 3, &mut rng);
        store.add_randn("b1", &[4], 4, &mut rng);
        let blob = store.to_blob();
        let mut other = ParamStore::new();
        other.add_zeros("w1", &[4, 3]);
        other.add_zeros("b1", &[4]);
        other.load_blob(&blob).unwrap();
        assert_eq!(store.to_blob(), other.to_blob());
        assert!(other.load_blob(&blob[..8]).is_err());
    }

    #[test]
    fn adam_mask_isolates_groups() {
        let mut store = ParamStore::new();
        let a = store.add("a", &[2], vec![1.0, 2.0]);
        let b = store.add("b", &[2], vec![3.0, 4.0]);
        let mut grads = ParamGrads::zeros_like(&store);
        grads.grads[0] = vec![1.0, 1.0];
        grads.grads[1] = vec![1.0, 1.0];
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads, 0.1, Some(&[true, false]));
        assert_ne!(store.get(a).data, vec![1.0, 2.0]);
        assert_eq!(store.get(b).data, vec![3.0, 4.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 100, 5e-4, 1e-6) - 5e-4).abs() < 1e-12);
        assert!((cosine_lr(99, 100, 5e-4, 1e-6) - 1e-6).abs() < 1e-12);
        assert!(cosine_lr(50, 100, 5e-4, 1e-6) < 5e-4);
    }
}
