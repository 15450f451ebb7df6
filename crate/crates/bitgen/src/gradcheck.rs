//! Central finite-difference verification of tape gradients.
//!
//! `check_param_grads` rebuilds the loss function under coordinate
//! perturbations of selected parameters and compares `(f(x+h) - f(x-h)) / 2h`
//! against the reverse-mode gradient. Coordinates are subsampled
//! deterministically so checks on large tensors stay fast.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Max coordinates probed per parameter tensor.
    pub max_coords_per_param: usize,
    /// Denominator floor for the relative error, guarding the 0/0 case.
    pub floor: f64,
    /// Seed for coordinate subsampling.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { h: 1e-5, max_coords_per_param: 24, floor: 1e-6, seed: 1234 }
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(param name, row, col, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, usize, f64, f64)>,
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` must construct the full forward computation from the store each
/// time it is called and return the scalar loss node.
pub fn check_param_grads<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    mut build: F,
    cfg: GradCheck,
) -> GradReport
where
    F: FnMut(&mut Graph, &ParamStore) -> NodeId,
{
    // Analytic gradients at the base point.
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let grad_of = |pid: ParamId| -> &crate::tensor::Mat {
        &grads.iter().find(|(p, _)| *p == pid).expect("param not in grads").1
    };

    let mut rng = crate::rng::stream(cfg.seed, 0);
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut coords_checked = 0;

    for &pid in params {
        let (rows, cols) = store.value(pid).dim();
        let total = rows * cols;
        let picks: Vec<usize> = if total <= cfg.max_coords_per_param {
            (0..total).collect()
        } else {
            (0..cfg.max_coords_per_param).map(|_| rng.gen_range(0..total)).collect()
        };
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.value(pid)[(r, c)];

            store.value_mut(pid)[(r, c)] = orig + cfg.h;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.scalar(lp);

            store.value_mut(pid)[(r, c)] = orig - cfg.h;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.scalar(lm);

            store.value_mut(pid)[(r, c)] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.h);
            let analytic = grad_of(pid)[(r, c)];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            coords_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((store.name(pid).to_string(), r, c, analytic, numeric));
            }
        }
    }

    GradReport { max_rel_err, coords_checked, worst }
}
