//! Named parameter tensors, grouped for freezing, plus the Adam optimizer
//! and its warmup/decay schedule.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Query,
    Fusion,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Query,
        ParamGroup::Fusion,
        ParamGroup::Head,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
    /// Non-trainable parameters never receive optimizer updates.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    frozen_groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            group,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian-initialized parameter.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let value = Matrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        self.add(name, group, value)
    }

    /// Weight matrix `fan_in × fan_out` with Glorot-normal scale.
    pub fn add_linear<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_normal(name, group, fan_in, fan_out, std, rng)
    }

    pub fn add_zeros(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        self.add(name, group, Matrix::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        v: f64,
    ) -> ParamId {
        self.add(name, group, Matrix::filled(rows, cols, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Suppress (or re-enable) optimizer updates for a whole group.
    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen_groups.retain(|g| *g != group);
        if frozen {
            self.frozen_groups.push(group);
        }
    }

    pub fn is_group_frozen(&self, group: ParamGroup) -> bool {
        self.frozen_groups.contains(&group)
    }

    /// Whether the optimizer may touch this parameter right now.
    pub fn is_updatable(&self, id: ParamId) -> bool {
        let p = &self.params[id.0];
        p.trainable && !self.is_group_frozen(p.group)
    }

    /// Same parameter names, shapes, and order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Matrix>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    /// Like [`Gradients::accumulate`], but reuses `other`'s buffers.
    pub fn absorb(&mut self, other: Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(&t),
                    None => *mine = Some(t),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to the base rate, then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_ratio).ceil() as usize;
        Self {
            warmup_steps,
            total_steps,
        }
    }

    /// Multiplier applied to the base rate at 0-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        let s = step as f64 + 1.0;
        if step < self.warmup_steps {
            return s / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        ((self.total_steps as f64 - step as f64) / remaining).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    /// Per-parameter update count (bias correction is per parameter, so
    /// frozen epochs do not distort it).
    steps: Vec<u64>,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            steps: vec![0; store.len()],
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// One update with the learning rate scaled by `lr_factor`. Frozen and
    /// non-trainable parameters, and parameters without a gradient, are left
    /// bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_factor: f64) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let lr = lr * lr_factor;
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_updatable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let (rows, cols) = g.shape();
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(rows, cols));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let w = store.value_mut(id).data_mut();
            for (((w, &g), m), v) in w
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
