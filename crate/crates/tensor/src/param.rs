//! Parameter storage, initialization and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::element::{cst, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as running statistics; saved but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// A named, ordered collection of tensors owned by one network.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    /// Process-unique identity used to route tape gradients back to this store.
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of optimizer-visible scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces the value of `name`, which must already exist with the same shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let cur = self.get(id).shape();
        if cur != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: cur,
                rhs: value.shape(),
            });
        }
        *self.get_mut(id) = value;
        Ok(())
    }
}

/// Uniform He initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| cst::<T>(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update. `grads` is indexed like the store's entries; missing
    /// gradients and buffers are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (cst::<T>(beta1), cst::<T>(beta2));
        let (one_b1, one_b2) = (cst::<T>(1.0 - beta1), cst::<T>(1.0 - beta2));
        let step_size = cst::<T>(lr / c1);
        let c2_sqrt = cst::<T>(c2.sqrt());
        let eps = cst::<T>(eps);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let Some(Some(g)) = grads.get(i) else { continue };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((p, &gi), mi), vi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *p = *p - step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}
