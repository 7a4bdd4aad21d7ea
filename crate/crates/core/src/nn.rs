//! Named parameter storage and the optimizers used across the crate.

use std::ops::Index;

use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named network weights.
///
/// Values are kept at `f32` precision so that checkpoints round-trip
/// bit-exactly; arithmetic on them still runs in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        t.round_to_f32();
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// `self ← β·self + (1 − β)·other`, for weight averaging.
    pub fn ema_update(&mut self, other: &ParamSet, beta: f64) {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            *t = t.zip_map(o, |a, b| beta * a + (1.0 - beta) * b);
            t.round_to_f32();
        }
    }

    /// Replaces the value of `name`; shapes must agree.
    pub fn set(&mut self, name: &str, mut t: Tensor) -> Result<(), String> {
        let idx = self.names.iter().position(|n| n == name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.tensors[idx].shape() != t.shape() {
            return Err(format!("parameter {name}: shape {:?}, expected {:?}", t.shape(), self.tensors[idx].shape()));
        }
        t.round_to_f32();
        self.tensors[idx] = t;
        Ok(())
    }

    /// Creates one graph leaf per parameter.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.variable(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Applies one optimizer step and re-rounds to storage precision.
    pub fn apply(&mut self, opt: &mut Adam, grads: &[Tensor]) {
        opt.step(&mut self.tensors, grads);
        for t in &mut self.tensors {
            t.round_to_f32();
        }
    }
}

/// Graph leaves for a [`ParamSet`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Lookahead wrapper: every `k` inner steps the slow weights move a
/// fraction `alpha` toward the fast weights, and the fast weights reset.
#[derive(Clone, Debug)]
pub struct Lookahead {
    pub k: usize,
    pub alpha: f64,
    slow: Vec<Tensor>,
    counter: usize,
}

impl Lookahead {
    pub fn new(k: usize, alpha: f64, params: &[Tensor]) -> Self {
        Self { k: k.max(1), alpha, slow: params.to_vec(), counter: 0 }
    }

    pub fn after_step(&mut self, params: &mut [Tensor]) {
        self.counter += 1;
        if self.counter % self.k != 0 {
            return;
        }
        for (slow, fast) in self.slow.iter_mut().zip(params.iter_mut()) {
            for (s, f) in slow.data_mut().iter_mut().zip(fast.data_mut()) {
                *s += self.alpha * (*f - *s);
                *f = *s;
            }
        }
    }
}
