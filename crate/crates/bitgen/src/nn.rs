//! Parameter storage, initialization, and optimization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{global_norm, zeros, Mat};

pub type ParamId = usize;

/// Named parameter tensors. Names are stable keys used by checkpoints
/// (e.g. `backbone.block0.attn.wq`).
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id]
    }

    /// Swap in a tensor of a possibly different shape (prefix-bank growth).
    pub fn replace(&mut self, id: ParamId, value: Mat) {
        self.values[id] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.values.len()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> u64 {
        self.values.iter().map(|m| m.len() as u64).sum()
    }

    /// Iterate `(name, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Replace every value with the same-named entry of `other` (used to
    /// swap in EMA weights). Panics on shape mismatch.
    pub fn load_values(&mut self, values: &BTreeMap<String, Mat>) {
        for (name, id) in self.index.clone() {
            let v = values
                .get(&name)
                .unwrap_or_else(|| panic!("missing parameter {name}"));
            assert_eq!(v.dim(), self.values[id].dim(), "shape mismatch for {name}");
            self.values[id] = v.clone();
        }
    }
}

/// Gaussian-initialized matrix.
pub fn randn_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let mut m = zeros(rows, cols);
    for v in m.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
    m
}

/// Decoupled-weight-decay Adam with optional global gradient-norm clipping.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, grad_clip: f64, warmup_steps: u64) -> Self {
        let m = store.ids().map(|id| zeros(store.value(id).dim().0, store.value(id).dim().1)).collect();
        let v = store.ids().map(|id| zeros(store.value(id).dim().0, store.value(id).dim().1)).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            warmup_steps,
            m,
            v,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Learning rate at the optimizer's next step (linear warmup, then constant).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }

    /// Apply one update. `grads` holds `(param, gradient)` pairs; parameters
    /// absent from the list are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) -> f64 {
        let lr_now = self.lr_at(self.t);
        let mut scale = 1.0;
        if self.grad_clip > 0.0 {
            let refs: Vec<&Mat> = grads.iter().map(|(_, g)| g).collect();
            let norm = global_norm(&refs);
            if norm > self.grad_clip {
                scale = self.grad_clip / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, grad) in grads {
            let m = &mut self.m[*pid];
            let v = &mut self.v[*pid];
            let w = store.value_mut(*pid);
            let ws = w.as_slice_mut().unwrap();
            let gs = grad.as_slice().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            for i in 0..ws.len() {
                let g = gs[i] * scale;
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g * g;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ws[i] -= lr_now * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * ws[i]);
            }
        }
        lr_now
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Mat>, v: Vec<Mat>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Exponential moving average of parameters, `e <- decay*e + (1-decay)*theta`
/// applied after every optimizer step.
#[derive(Clone)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Mat>,
}

impl Ema {
    /// Initialized from the current parameter values.
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        Ema { decay, shadow: store.ids().map(|id| store.value(id).clone()).collect() }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for id in store.ids() {
            let s = self.shadow[id].as_slice_mut().unwrap();
            let w = store.value(id).as_slice().unwrap();
            for i in 0..s.len() {
                s[i] = self.decay * s[i] + (1.0 - self.decay) * w[i];
            }
        }
    }

    pub fn shadow(&self, id: ParamId) -> &Mat {
        &self.shadow[id]
    }

    pub fn snapshot(&self, store: &ParamStore) -> BTreeMap<String, Mat> {
        store
            .ids()
            .map(|id| (store.name(id).to_string(), self.shadow[id].clone()))
            .collect()
    }

    pub fn restore(&mut self, shadow: Vec<Mat>) {
        self.shadow = shadow;
    }

    pub fn shadow_all(&self) -> &[Mat] {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adamw_reduces_quadratic_loss() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[4.0, -3.0]]);
        let mut opt = AdamW::new(&store, 0.1, 0.0, 0.0, 0);
        for _ in 0..200 {
            let g = store.value(p).clone() * 2.0;
            opt.step(&mut store, &[(p, g)]);
        }
        assert!(store.value(p).iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn grad_clip_rescales_to_unit_norm() {
        let mut store = ParamStore::new();
        let p = store.add("p", array![[0.0, 0.0]]);
        let mut opt = AdamW::new(&store, 1.0, 0.0, 1.0, 0);
        // Gradient of norm 10 gets scaled by 0.1; with Adam normalization the
        // first step magnitude equals lr regardless, so check the moments.
        let g = array![[6.0, 8.0]];
        opt.step(&mut store, &[(p, g)]);
        let (m, _) = opt.moments();
        let clipped = &m[0];
        // m = 0.1 * clipped_grad = 0.1 * [0.6, 0.8]
        assert!((clipped[(0, 0)] - 0.06).abs() < 1e-12);
        assert!((clipped[(0, 1)] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let store = {
            let mut s = ParamStore::new();
            s.add("p", array![[0.0]]);
            s
        };
        let opt = AdamW::new(&store, 1e-3, 0.0, 0.0, 10);
        assert!((opt.lr_at(0) - 1e-4).abs() < 1e-15);
        assert!((opt.lr_at(4) - 5e-4).abs() < 1e-15);
        assert!((opt.lr_at(10) - 1e-3).abs() < 1e-15);
        assert!((opt.lr_at(500) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn ema_update_rule_is_exact() {
        // TrainerState invariant: e <- 0.9999 e + 0.0001 theta per step.
        let mut store = ParamStore::new();
        let p = store.add("p", array![[1.0]]);
        let mut ema = Ema::new(&store, 0.9999);
        *store.value_mut(p) = array![[2.0]];
        ema.update(&store);
        let expect = 0.9999 * 1.0 + 0.0001 * 2.0;
        assert!((ema.shadow(p)[(0, 0)] - expect).abs() < 1e-15);
        *store.value_mut(p) = array![[-1.0]];
        ema.update(&store);
        let expect = 0.9999 * expect + 0.0001 * (-1.0);
        assert!((ema.shadow(p)[(0, 0)] - expect).abs() < 1e-15);
    }
}
