//! Deterministic f64 matrix kernels.
//!
//! Every numeric path in the crate (training graphs, cached incremental
//! decoding, samplers) funnels through the functions here. The kernels are
//! plain loops with a fixed accumulation order and are marked
//! `#[inline(never)]` so the compiler emits exactly one body per kernel:
//! two call sites computing the same quantity produce bit-identical results.
//! That property is what makes the cache-equivalence and same-seed
//! determinism contracts exact rather than approximate.

use ndarray::Array2;

/// Row-major f64 matrix; the single value type used throughout the crate.
pub type Mat = Array2<f64>;

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

/// Matrix product `a @ b`, accumulated in i-k-j order.
///
/// The j-inner loop streams rows of `b`, which vectorizes well and keeps the
/// per-element accumulation order independent of how many rows `a` has: row i
/// of the result depends only on row i of `a`. Batched and per-row calls are
/// therefore bit-identical.
#[inline(never)]
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
    let a = a.as_slice().expect("matmul: a not contiguous");
    let b = b.as_slice().expect("matmul: b not contiguous");
    let mut out = vec![0.0f64; m * n];
    let k4 = k / 4 * 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        // 4-way k unroll amortizes the read-modify-write of the output row;
        // the summation order is fixed and independent of m.
        let mut kk = 0;
        while kk < k4 {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for j in 0..n {
                orow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            kk += 4;
        }
        while kk < k {
            let aik = arow[kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
            kk += 1;
        }
    }
    Mat::from_shape_vec((m, n), out).unwrap()
}

/// `a @ b^T`; materializes the transpose and defers to [`matmul`].
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    let bt = b.t().as_standard_layout().to_owned();
    matmul(a, &bt)
}

/// `a^T @ b`; used by backward passes only.
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    let at = a.t().as_standard_layout().to_owned();
    matmul(&at, b)
}

/// Per-row layer normalization without affine terms.
///
/// Returns the normalized matrix together with the per-row inverse standard
/// deviation (needed by the backward pass and reused by the value-only path).
#[inline(never)]
pub fn layer_norm_rows(x: &Mat, eps: f64) -> (Mat, Vec<f64>, Vec<f64>) {
    let (m, n) = x.dim();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0f64; m * n];
    let mut means = vec![0.0f64; m];
    let mut rstds = vec![0.0f64; m];
    let nf = n as f64;
    for i in 0..m {
        let row = &xs[i * n..(i + 1) * n];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= nf;
        let mut var = 0.0;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= nf;
        let rstd = 1.0 / (var + eps).sqrt();
        means[i] = mean;
        rstds[i] = rstd;
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * rstd;
        }
    }
    (Mat::from_shape_vec((m, n), out).unwrap(), means, rstds)
}

/// SiLU activation `x * sigmoid(x)` applied elementwise.
#[inline(never)]
pub fn silu_mat(x: &Mat) -> Mat {
    x.mapv(|v| v * sigmoid(v))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Multi-head attention over per-row visibility intervals.
///
/// Row i of the query attends to key/value rows `j in lo[i]..hi[i]`.
/// `q`, `k`, `v` are `[rows, heads*head_dim]` with heads laid out as
/// contiguous column blocks. Returns the attended output and, when
/// `keep_probs` is set, the dense `[heads, q_rows, k_rows]` probability
/// tensor used by the backward pass (zeros outside the interval).
///
/// The kernel iterates keys in increasing j order inside a single compiled
/// body, so a query row's result depends only on its own interval contents —
/// incremental decoding with a cache and a full-sequence pass agree exactly.
#[inline(never)]
pub fn interval_attention(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    lo: &[usize],
    hi: &[usize],
    keep_probs: bool,
) -> (Mat, Option<Vec<Mat>>) {
    let (qm, width) = q.dim();
    let (km, width2) = k.dim();
    assert_eq!(width, width2, "attention: q/k width mismatch");
    assert_eq!(km, v.dim().0, "attention: k/v rows mismatch");
    assert!(width % heads == 0, "attention: width not divisible by heads");
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let qs = q.as_slice().unwrap();
    let ks = k.as_slice().unwrap();
    let vs = v.as_slice().unwrap();
    let mut out = vec![0.0f64; qm * width];
    let mut probs: Option<Vec<Mat>> =
        keep_probs.then(|| (0..heads).map(|_| zeros(qm, km)).collect());

    let mut logits = vec![0.0f64; km];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..qm {
            let (jlo, jhi) = (lo[i], hi[i]);
            assert!(jlo < jhi && jhi <= km, "attention: bad interval for row {i}");
            let qrow = &qs[i * width + off..i * width + off + hd];
            let mut maxv = f64::NEG_INFINITY;
            for j in jlo..jhi {
                let krow = &ks[j * width + off..j * width + off + hd];
                let mut acc = 0.0;
                for c in 0..hd {
                    acc += qrow[c] * krow[c];
                }
                let l = acc * scale;
                logits[j] = l;
                if l > maxv {
                    maxv = l;
                }
            }
            let mut denom = 0.0;
            for j in jlo..jhi {
                let e = (logits[j] - maxv).exp();
                logits[j] = e;
                denom += e;
            }
            let orow = &mut out[i * width + off..i * width + off + hd];
            for j in jlo..jhi {
                let p = logits[j] / denom;
                if let Some(ps) = probs.as_mut() {
                    ps[h][(i, j)] = p;
                }
                let vrow = &vs[j * width + off..j * width + off + hd];
                for c in 0..hd {
                    orow[c] += p * vrow[c];
                }
            }
        }
    }
    (Mat::from_shape_vec((qm, width), out).unwrap(), probs)
}

/// Frobenius dot product; backward-pass helper.
pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    let a = a.as_slice().unwrap();
    let b = b.as_slice().unwrap();
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Global L2 norm over a set of matrices.
pub fn global_norm(mats: &[&Mat]) -> f64 {
    let mut acc = 0.0;
    for m in mats {
        for &v in m.as_slice().unwrap() {
            acc += v * v;
        }
    }
    acc.sqrt()
}
