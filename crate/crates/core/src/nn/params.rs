//! Named parameter tensors, their gradients, AdamW and the EMA shadow.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::bail_arg;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    let data = t.data().iter().map(|v| U::lit(v.as_f64())).collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect(),
        }
    }
}

/// Gradients keyed by parameter; parameters the loss does not touch are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamId, Vec<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self { map: BTreeMap::new() }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        let slot = self.map.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
        slot.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
    }

    /// Adds `other` into `self` (batch accumulation).
    pub fn merge(&mut self, other: &Self) {
        for (&id, g) in &other.map {
            self.accumulate(id, g);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.map.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    pub fn scale(&mut self, c: T) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().flatten().all(|v| v.is_finite())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. A threshold of zero zeroes every gradient.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: T) -> T {
    let norm = grads.global_norm();
    if max_norm <= T::zero() {
        grads.scale(T::zero());
    } else if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub clip_norm: T,
}

impl<T: Scalar> Default for AdamWConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-4),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(1e-2),
            clip_norm: T::one(),
        }
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig<T>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips, then applies one decoupled-weight-decay Adam update. Returns the
    /// pre-clip gradient norm. A zero clip threshold leaves the weights alone.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &mut Gradients<T>) -> Result<T> {
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        if self.m.len() != params.len() {
            bail_arg!("optimizer tracks {} tensors, store has {}", self.m.len(), params.len());
        }
        let c = self.config;
        let norm = clip_gradients(grads, c.clip_norm);
        if c.clip_norm <= T::zero() {
            return Ok(norm);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - c.beta1.powi(t);
        let bc2 = T::one() - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let w = params.tensors[id.0].data_mut();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (T::one() - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (T::one() - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        Ok(norm)
    }
}

/// Shadow copy of a parameter store, blended toward the live weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaParams<T> {
    pub shadow: ParamStore<T>,
}

impl<T: Scalar> EmaParams<T> {
    pub fn new(live: &ParamStore<T>) -> Self {
        Self { shadow: live.clone() }
    }

    /// `shadow ← γ·shadow + (1−γ)·live`.
    pub fn update(&mut self, live: &ParamStore<T>, gamma: T) -> Result<()> {
        if !self.shadow.same_layout(live) {
            bail_arg!("EMA shadow layout does not match live parameters");
        }
        let one_minus = T::one() - gamma;
        for (s, l) in self.shadow.tensors.iter_mut().zip(&live.tensors) {
            for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = gamma * *a + one_minus * b;
            }
        }
        Ok(())
    }
}
