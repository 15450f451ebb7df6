//! Rectified-flow binary diffusion head.
//!
//! Binary tokens are treated as vertices of a hypercube in continuous space.
//! The head is an x-prediction network `f(x_t, t, z)` (a small DiT: adaLN-zero
//! modulated blocks with token-mixing attention over the jointly predicted
//! positions), trained with a velocity-matching loss on the linear
//! interpolation path `x_t = t*x + (1-t)*eps`, `v_t = x - eps`. Sampling
//! integrates the learned velocity with an Euler solver from Gaussian noise
//! and snaps the result onto the hypercube with a final sign.
//!
//! All entry points operate on "groups": `G` independent prediction problems
//! of `n` tokens each, stacked row-wise as `[G*n, d]`. Attention mixes only
//! within a group, so batched and single-group evaluations are bit-identical.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::binq::sign_unit;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{randn_mat, ParamId, ParamStore};
use crate::rng::role_seed;
use crate::tensor::Mat;

/// Head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadConfig {
    /// Token bits.
    pub d: usize,
    /// Tokens predicted jointly (p^2).
    pub n: usize,
    /// Width of the conditioning vectors z.
    pub cond_width: usize,
    /// Number of DiT blocks.
    pub depth: usize,
    /// Internal width.
    pub head_width: usize,
    /// Attention heads over the n positions.
    pub heads: usize,
    /// Euler steps N.
    pub num_steps: usize,
    /// Guidance strength s; 0 disables guidance.
    pub cfg_scale: f64,
    /// Minimum (1 - t) in the velocity parameterization.
    pub delta_clamp: f64,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("head: n must be >= 1".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("head: num_steps must be >= 1".into()));
        }
        if !(self.delta_clamp > 0.0) {
            return Err(Error::Config("head: delta_clamp must be positive".into()));
        }
        if self.head_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "head: width {} not divisible by heads {}",
                self.head_width, self.heads
            )));
        }
        Ok(())
    }

    /// The head's parameters are independent of `n`; reconfiguring for a new
    /// patch size only changes this descriptor.
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

const T_FEATURES: usize = 32;

/// Sinusoidal features of the scalar timestep.
fn t_features(t: f64) -> Vec<f64> {
    let half = T_FEATURES / 2;
    let mut out = Vec::with_capacity(T_FEATURES);
    for j in 0..half {
        let freq = 1000f64.powf(j as f64 / (half - 1) as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out
}

struct HeadBlock {
    mods: [(ParamId, ParamId); 6],
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles for the head (checkpoint prefix `flowhead.`).
pub struct Head {
    pub cfg: HeadConfig,
    in_w: ParamId,
    in_b: ParamId,
    z_w: ParamId,
    z_b: ParamId,
    t_w1: ParamId,
    t_b1: ParamId,
    t_w2: ParamId,
    t_b2: ParamId,
    blocks: Vec<HeadBlock>,
    fin_shift_w: ParamId,
    fin_shift_b: ParamId,
    fin_scale_w: ParamId,
    fin_scale_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

const MOD_NAMES: [&str; 6] = ["shift1", "scale1", "gate1", "shift2", "scale2", "gate2"];
const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;

impl Head {
    pub fn init(store: &mut ParamStore, cfg: HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(role_seed(seed, "flowhead-init"), 0);
        let w = cfg.head_width;
        let std = 0.02;
        let in_w = store.add("flowhead.in.w", randn_mat(&mut rng, cfg.d, w, std));
        let in_b = store.add("flowhead.in.b", Mat::zeros((1, w)));
        let z_w = store.add("flowhead.z.w", randn_mat(&mut rng, cfg.cond_width, w, std));
        let z_b = store.add("flowhead.z.b", Mat::zeros((1, w)));
        let t_w1 = store.add("flowhead.t.w1", randn_mat(&mut rng, T_FEATURES, w, std));
        let t_b1 = store.add("flowhead.t.b1", Mat::zeros((1, w)));
        let t_w2 = store.add("flowhead.t.w2", randn_mat(&mut rng, w, w, std));
        let t_b2 = store.add("flowhead.t.b2", Mat::zeros((1, w)));
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            let p = format!("flowhead.block{i}");
            // adaLN-zero: modulation projections start at zero so each block
            // is the identity at initialization.
            let mods = MOD_NAMES.map(|m| {
                (
                    store.add(&format!("{p}.mod.{m}.w"), Mat::zeros((w, w))),
                    store.add(&format!("{p}.mod.{m}.b"), Mat::zeros((1, w))),
                )
            });
            blocks.push(HeadBlock {
                mods,
                wq: store.add(&format!("{p}.attn.wq"), randn_mat(&mut rng, w, w, std)),
                wk: store.add(&format!("{p}.attn.wk"), randn_mat(&mut rng, w, w, std)),
                wv: store.add(&format!("{p}.attn.wv"), randn_mat(&mut rng, w, w, std)),
                wo: store.add(&format!("{p}.attn.wo"), randn_mat(&mut rng, w, w, std)),
                w1: store.add(&format!("{p}.mlp.w1"), randn_mat(&mut rng, w, w * MLP_RATIO, std)),
                b1: store.add(&format!("{p}.mlp.b1"), Mat::zeros((1, w * MLP_RATIO))),
                w2: store.add(&format!("{p}.mlp.w2"), randn_mat(&mut rng, w * MLP_RATIO, w, std)),
                b2: store.add(&format!("{p}.mlp.b2"), Mat::zeros((1, w))),
            });
        }
        let fin_shift_w = store.add("flowhead.final.shift.w", Mat::zeros((w, w)));
        let fin_shift_b = store.add("flowhead.final.shift.b", Mat::zeros((1, w)));
        let fin_scale_w = store.add("flowhead.final.scale.w", Mat::zeros((w, w)));
        let fin_scale_b = store.add("flowhead.final.scale.b", Mat::zeros((1, w)));
        // Zero-initialized output projection: f == 0 before training.
        let out_w = store.add("flowhead.out.w", Mat::zeros((w, cfg.d)));
        let out_b = store.add("flowhead.out.b", Mat::zeros((1, cfg.d)));
        Ok(Head {
            cfg,
            in_w,
            in_b,
            z_w,
            z_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            blocks,
            fin_shift_w,
            fin_shift_b,
            fin_scale_w,
            fin_scale_b,
            out_w,
            out_b,
        })
    }

    pub fn from_store(store: &ParamStore, cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| {
            store.id(name).ok_or_else(|| Error::Compat(format!("checkpoint missing parameter {name}")))
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("flowhead.block{i}");
                let mut mods = [(0, 0); 6];
                for (j, m) in MOD_NAMES.iter().enumerate() {
                    mods[j] = (get(&format!("{p}.mod.{m}.w"))?, get(&format!("{p}.mod.{m}.b"))?);
                }
                Ok(HeadBlock {
                    mods,
                    wq: get(&format!("{p}.attn.wq"))?,
                    wk: get(&format!("{p}.attn.wk"))?,
                    wv: get(&format!("{p}.attn.wv"))?,
                    wo: get(&format!("{p}.attn.wo"))?,
                    w1: get(&format!("{p}.mlp.w1"))?,
                    b1: get(&format!("{p}.mlp.b1"))?,
                    w2: get(&format!("{p}.mlp.w2"))?,
                    b2: get(&format!("{p}.mlp.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Head {
            cfg,
            in_w: get("flowhead.in.w")?,
            in_b: get("flowhead.in.b")?,
            z_w: get("flowhead.z.w")?,
            z_b: get("flowhead.z.b")?,
            t_w1: get("flowhead.t.w1")?,
            t_b1: get("flowhead.t.b1")?,
            t_w2: get("flowhead.t.w2")?,
            t_b2: get("flowhead.t.b2")?,
            blocks,
            fin_shift_w: get("flowhead.final.shift.w")?,
            fin_shift_b: get("flowhead.final.shift.b")?,
            fin_scale_w: get("flowhead.final.scale.w")?,
            fin_scale_b: get("flowhead.final.scale.b")?,
            out_w: get("flowhead.out.w")?,
            out_b: get("flowhead.out.b")?,
        })
    }

    fn group_intervals(&self, groups: usize) -> (std::rc::Rc<Vec<usize>>, std::rc::Rc<Vec<usize>>) {
        let n = self.cfg.n;
        let mut lo = Vec::with_capacity(groups * n);
        let mut hi = Vec::with_capacity(groups * n);
        for gidx in 0..groups {
            for _ in 0..n {
                lo.push(gidx * n);
                hi.push((gidx + 1) * n);
            }
        }
        (std::rc::Rc::new(lo), std::rc::Rc::new(hi))
    }

    /// The x-prediction network on the tape.
    ///
    /// `x_t` is a `[G*n, d]` node, `t` has one entry per group, `z` is a
    /// `[G*n, cond_width]` node. Returns `f` as `[G*n, d]`.
    pub fn x_predict_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: NodeId,
        t: &[f64],
        z: NodeId,
        frozen: bool,
    ) -> NodeId {
        let rows = g.value(x_t).dim().0;
        let n = self.cfg.n;
        assert_eq!(rows % n, 0, "x_predict: rows not a multiple of n");
        let groups = rows / n;
        assert_eq!(groups, t.len(), "x_predict: one t per group required");
        assert_eq!(g.value(z).dim(), (rows, self.cfg.cond_width), "x_predict: z shape");
        let p = |g: &mut Graph, id: ParamId| {
            if frozen {
                g.frozen_param(store, id)
            } else {
                g.param(store, id)
            }
        };

        // Conditioning: c = t_mlp(t_features) + z_proj(z), per position.
        let mut tf = Mat::zeros((rows, T_FEATURES));
        for gidx in 0..groups {
            let feats = t_features(t[gidx]);
            for i in 0..n {
                for (j, &f) in feats.iter().enumerate() {
                    tf[(gidx * n + i, j)] = f;
                }
            }
        }
        let tf = g.constant(tf);
        let (tw1, tb1, tw2, tb2) = (p(g, self.t_w1), p(g, self.t_b1), p(g, self.t_w2), p(g, self.t_b2));
        let te = g.linear(tf, tw1, tb1);
        let te = g.silu(te);
        let te = g.linear(te, tw2, tb2);
        let (zw, zb) = (p(g, self.z_w), p(g, self.z_b));
        let zp = g.linear(z, zw, zb);
        let cond = g.add(te, zp);
        let cond_act = g.silu(cond);

        let (iw, ib) = (p(g, self.in_w), p(g, self.in_b));
        let mut h = g.linear(x_t, iw, ib);
        let (lo, hi) = self.group_intervals(groups);
        let ones = g.constant(Mat::from_elem((rows, self.cfg.head_width), 1.0));

        let modulate = |g: &mut Graph, x: NodeId, shift: NodeId, scale: NodeId, ones: NodeId| {
            let one_plus = g.add(ones, scale);
            let scaled = g.mul(x, one_plus);
            g.add(scaled, shift)
        };

        for blk in &self.blocks {
            let m: Vec<NodeId> = blk
                .mods
                .iter()
                .map(|&(w, b)| {
                    let (wn, bn) = (p(g, w), p(g, b));
                    g.linear(cond_act, wn, bn)
                })
                .collect();
            let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);

            let normed = g.layer_norm(h, LN_EPS);
            let modded = modulate(g, normed, shift1, scale1, ones);
            let (wq, wk, wv, wo) = (p(g, blk.wq), p(g, blk.wk), p(g, blk.wv), p(g, blk.wo));
            let q = g.matmul(modded, wq);
            let k = g.matmul(modded, wk);
            let v = g.matmul(modded, wv);
            let att = g.attention(q, k, v, self.cfg.heads, lo.clone(), hi.clone());
            let att = g.matmul(att, wo);
            let gated = g.mul(gate1, att);
            h = g.add(h, gated);

            let normed2 = g.layer_norm(h, LN_EPS);
            let modded2 = modulate(g, normed2, shift2, scale2, ones);
            let (w1, b1, w2, b2) = (p(g, blk.w1), p(g, blk.b1), p(g, blk.w2), p(g, blk.b2));
            let a = g.linear(modded2, w1, b1);
            let a = g.silu(a);
            let a = g.linear(a, w2, b2);
            let gated = g.mul(gate2, a);
            h = g.add(h, gated);
        }

        let normed = g.layer_norm(h, LN_EPS);
        let (fsw, fsb) = (p(g, self.fin_shift_w), p(g, self.fin_shift_b));
        let (fcw, fcb) = (p(g, self.fin_scale_w), p(g, self.fin_scale_b));
        let shift = g.linear(cond_act, fsw, fsb);
        let scale = g.linear(cond_act, fcw, fcb);
        let modded = modulate(g, normed, shift, scale, ones);
        let (ow, ob) = (p(g, self.out_w), p(g, self.out_b));
        g.linear(modded, ow, ob)
    }

    /// Value-only x-prediction.
    pub fn x_predict(&self, store: &ParamStore, x_t: &Mat, t: &[f64], z: &Mat) -> Mat {
        let mut g = Graph::new();
        let xt = g.constant(x_t.clone());
        let zn = g.constant(z.clone());
        let f = self.x_predict_node(&mut g, store, xt, t, zn, true);
        g.value(f).clone()
    }

    /// Velocity `v = (f - x_t) / max(1 - t, delta_clamp)`, values only.
    pub fn velocity(&self, store: &ParamStore, x_t: &Mat, t: &[f64], z: &Mat) -> Mat {
        let f = self.x_predict(store, x_t, t, z);
        velocity_from_x_pred(&f, x_t, t, self.cfg.n, self.cfg.delta_clamp)
    }

    /// Total scalar parameters under the `flowhead.` prefix.
    pub fn num_params(store: &ParamStore) -> u64 {
        store
            .iter()
            .filter(|(name, _)| name.starts_with("flowhead."))
            .map(|(_, v)| v.len() as u64)
            .sum()
    }
}

/// `(f - x_t) * 1/max(1-t, delta)` with per-group t.
pub fn velocity_from_x_pred(f: &Mat, x_t: &Mat, t: &[f64], n: usize, delta: f64) -> Mat {
    let mut v = f - x_t;
    for (gidx, &tg) in t.iter().enumerate() {
        let inv = 1.0 / (1.0 - tg).max(delta);
        for i in 0..n {
            for val in v.row_mut(gidx * n + i) {
                *val *= inv;
            }
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Flow samples and the training loss
// ---------------------------------------------------------------------------

/// One realization of the flow-matching objective for `G` groups of `n`
/// tokens: `x_t = t*x + (1-t)*eps` and `v_t = x - eps` hold exactly.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x: Mat,
    pub eps: Mat,
    /// One t per group, each in `[0, 1 - delta_clamp)`.
    pub t: Vec<f64>,
    pub x_t: Mat,
    pub v_t: Mat,
    pub n: usize,
}

impl FlowSample {
    /// Draw `t ~ U[0, 1-delta)` per group and `eps ~ N(0, I)`, then form the
    /// interpolation. `x` entries must be in {-1, +1}.
    pub fn draw<R: Rng>(x: &Mat, n: usize, delta_clamp: f64, rng: &mut R) -> Result<FlowSample> {
        if x.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidInput("flow targets must be binary (+/-1)".into()));
        }
        Self::draw_continuous(x, n, delta_clamp, rng)
    }

    /// As [`FlowSample::draw`] but without the binary-target requirement;
    /// used by the continuous-latent ablation.
    pub fn draw_continuous<R: Rng>(
        x: &Mat,
        n: usize,
        delta_clamp: f64,
        rng: &mut R,
    ) -> Result<FlowSample> {
        let (rows, _) = x.dim();
        if n == 0 || rows % n != 0 {
            return Err(Error::InvalidInput(format!("flow targets: rows {rows} not a multiple of n {n}")));
        }
        let groups = rows / n;
        let t: Vec<f64> = (0..groups).map(|_| rng.gen_range(0.0..1.0 - delta_clamp)).collect();
        let mut eps = Mat::zeros(x.dim());
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        Ok(FlowSample::from_parts(x.clone(), eps, t, n))
    }

    /// Build with explicit noise and times (used by closed-form tests).
    pub fn from_parts(x: Mat, eps: Mat, t: Vec<f64>, n: usize) -> FlowSample {
        let mut x_t = Mat::zeros(x.dim());
        for (gidx, &tg) in t.iter().enumerate() {
            for i in 0..n {
                let r = gidx * n + i;
                for c in 0..x.dim().1 {
                    x_t[(r, c)] = tg * x[(r, c)] + (1.0 - tg) * eps[(r, c)];
                }
            }
        }
        let v_t = &x - &eps;
        FlowSample { x, eps, t, x_t, v_t, n }
    }
}

/// Velocity-matching loss on the tape:
/// `mean || (f(x_t,t,z) - x_t)/max(1-t,delta) - (x - eps) ||^2`.
///
/// `z` is a graph node so gradients flow into both the head parameters and
/// the conditioning.
pub fn flow_loss_node(
    g: &mut Graph,
    store: &ParamStore,
    head: &Head,
    sample: &FlowSample,
    z: NodeId,
    frozen_head: bool,
) -> NodeId {
    let x_t = g.constant(sample.x_t.clone());
    let f = head.x_predict_node(g, store, x_t, &sample.t, z, frozen_head);
    let diff = g.sub(f, x_t);
    // Per-row 1/(1-t) weights as a constant factor.
    let rows = sample.x_t.dim().0;
    let cols = sample.x_t.dim().1;
    let mut w = Mat::zeros((rows, cols));
    for (gidx, &tg) in sample.t.iter().enumerate() {
        let inv = 1.0 / (1.0 - tg).max(head.cfg.delta_clamp);
        for i in 0..sample.n {
            for c in 0..cols {
                w[(gidx * sample.n + i, c)] = inv;
            }
        }
    }
    let w = g.constant(w);
    let v = g.mul(diff, w);
    let target = g.constant(sample.v_t.clone());
    let err = g.sub(v, target);
    let sq = g.mul(err, err);
    g.mean_all(sq)
}

/// Convenience value-only flow loss with caller-controlled randomness.
pub fn flow_loss<R: Rng>(
    store: &ParamStore,
    head: &Head,
    x: &Mat,
    z: &Mat,
    rng: &mut R,
) -> Result<f64> {
    let sample = FlowSample::draw(x, head.cfg.n, head.cfg.delta_clamp, rng)?;
    let mut g = Graph::new();
    let zn = g.constant(z.clone());
    let loss = flow_loss_node(&mut g, store, head, &sample, zn, true);
    Ok(g.scalar(loss))
}

// ---------------------------------------------------------------------------
// Euler sampling
// ---------------------------------------------------------------------------

/// Integrate `x' = v(x, t)` from t=0 to 1 with N uniform Euler steps.
pub fn euler_integrate<F: FnMut(&Mat, f64) -> Mat>(x0: Mat, num_steps: usize, mut velocity: F) -> Mat {
    assert!(num_steps >= 1);
    let dt = 1.0 / num_steps as f64;
    let mut x = x0;
    for k in 0..num_steps {
        let t = k as f64 / num_steps as f64;
        let v = velocity(&x, t);
        x = &x + &(&v * dt);
    }
    x
}

impl Head {
    /// Sample `G` groups of `n` tokens jointly.
    ///
    /// `z` is `[G*n, cond_width]`; with `cfg_scale > 0` a same-shape `z_null`
    /// provides the unconditional branch and guidance is applied in velocity
    /// space: `v = v_cond + s*(v_cond - v_uncond)`. The only randomness is the
    /// initial `x0 ~ N(0, I)` drawn from `rng`. Every output entry is exactly
    /// +/-1 (hard binarization after the final step).
    pub fn sample_groups<R: Rng>(
        &self,
        store: &ParamStore,
        z: &Mat,
        z_null: Option<&Mat>,
        cfg_scale: f64,
        num_steps: usize,
        rng: &mut R,
    ) -> Mat {
        self.sample_groups_raw(store, z, z_null, cfg_scale, num_steps, rng).mapv(sign_unit)
    }

    /// The pre-binarization endpoint of the Euler integration (continuous
    /// ablation path).
    pub fn sample_groups_raw<R: Rng>(
        &self,
        store: &ParamStore,
        z: &Mat,
        z_null: Option<&Mat>,
        cfg_scale: f64,
        num_steps: usize,
        rng: &mut R,
    ) -> Mat {
        let rows = z.dim().0;
        let mut x0 = Mat::zeros((rows, self.cfg.d));
        for v in x0.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let groups = rows / self.cfg.n;
        let use_cfg = cfg_scale > 0.0 && z_null.is_some();
        let zz = if use_cfg {
            ndarray::concatenate(ndarray::Axis(0), &[z.view(), z_null.unwrap().view()]).unwrap()
        } else {
            z.clone()
        };
        euler_integrate(x0, num_steps, |x, t| {
            if use_cfg {
                let xx = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
                let tt = vec![t; 2 * groups];
                let f = self.x_predict(store, &xx, &tt, &zz);
                let v = velocity_from_x_pred(&f, &xx, &tt, self.cfg.n, self.cfg.delta_clamp);
                let vc = v.slice(ndarray::s![..rows, ..]);
                let vu = v.slice(ndarray::s![rows.., ..]);
                let mut out = Mat::zeros((rows, self.cfg.d));
                for r in 0..rows {
                    for c in 0..self.cfg.d {
                        let c_ = vc[(r, c)];
                        out[(r, c)] = c_ + cfg_scale * (c_ - vu[(r, c)]);
                    }
                }
                out
            } else {
                let tt = vec![t; groups];
                let f = self.x_predict(store, x, &tt, &zz);
                velocity_from_x_pred(&f, x, &tt, self.cfg.n, self.cfg.delta_clamp)
            }
        })
    }

    /// Single-request form: one group of `n` tokens.
    pub fn sample<R: Rng>(
        &self,
        store: &ParamStore,
        z: &Mat,
        z_null: Option<&Mat>,
        cfg_scale: f64,
        num_steps: usize,
        rng: &mut R,
    ) -> Mat {
        assert_eq!(z.dim().0, self.cfg.n, "sample: z must have n rows");
        self.sample_groups(store, z, z_null, cfg_scale, num_steps, rng)
    }
}

// ---------------------------------------------------------------------------
// Output-distribution histograms
// ---------------------------------------------------------------------------

/// Histogram of x-prediction output components at one timestep.
#[derive(Debug, Clone)]
pub struct OutputHistogram {
    pub t: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl OutputHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of components with |f| above the threshold.
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        let mut above = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            let left = self.bin_edges[i];
            let right = self.bin_edges[i + 1];
            // Count a bin as above-threshold when it lies entirely outside
            // [-threshold, threshold].
            if right <= -threshold || left >= threshold {
                above += c;
            }
        }
        above as f64 / self.total() as f64
    }
}

pub const HIST_RANGE: f64 = 1.5;
pub const HIST_BINS: usize = 60;

pub fn histogram_edges() -> Vec<f64> {
    (0..=HIST_BINS).map(|i| -HIST_RANGE + 2.0 * HIST_RANGE * i as f64 / HIST_BINS as f64).collect()
}

/// Accumulate values into the fixed bins (outliers clamp to the end bins).
/// Pure counting: the result is invariant to the order of `values`.
pub fn histogram_counts(values: impl Iterator<Item = f64>) -> Vec<u64> {
    let mut counts = vec![0u64; HIST_BINS];
    for v in values {
        let clamped = v.clamp(-HIST_RANGE, HIST_RANGE);
        let mut bin = ((clamped + HIST_RANGE) / (2.0 * HIST_RANGE) * HIST_BINS as f64) as usize;
        if bin >= HIST_BINS {
            bin = HIST_BINS - 1;
        }
        counts[bin] += 1;
    }
    counts
}

/// For each requested t: draw `x_t` from the provided `(z, x)` conditioning
/// pairs, run the x-prediction network, and histogram all output components
/// over fixed bins spanning `[-1.5, 1.5]`.
pub fn output_histogram<R: Rng>(
    store: &ParamStore,
    head: &Head,
    pairs: &[(Mat, Mat)],
    t_values: &[f64],
    rng: &mut R,
) -> Vec<OutputHistogram> {
    let edges = histogram_edges();
    let mut out = Vec::new();
    for &t in t_values {
        let mut components = Vec::new();
        for (z, x) in pairs {
            let mut eps = Mat::zeros(x.dim());
            for v in eps.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let groups = x.dim().0 / head.cfg.n;
            let sample = FlowSample::from_parts(x.clone(), eps, vec![t; groups], head.cfg.n);
            let f = head.x_predict(store, &sample.x_t, &sample.t, z);
            components.extend(f.iter().cloned());
        }
        let counts = histogram_counts(components.into_iter());
        out.push(OutputHistogram { t, bin_edges: edges.clone(), counts });
    }
    out
}
