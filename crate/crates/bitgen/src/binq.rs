//! Binary lookup-free quantization.
//!
//! Latent vectors are quantized channel-wise to the hypercube `{-1,+1}^d` by
//! sign — the codebook is implicit and never stored. The module also provides
//! the group-wise entropy regularizer that keeps code usage healthy, a
//! bit-packed storage format for token grids, and the codebook/compression
//! accounting used in evaluation.

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Sign with the total-function convention `sign(0) = +1`.
///
/// The quantizer must be defined everywhere; zero is measure-zero in practice
/// and mapping it to +1 keeps idempotence (`sign(sign(x)) == sign(x)`).
#[inline]
pub fn sign_unit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// A d-bit binary token; every entry is exactly -1.0 or +1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryToken {
    pub bits: Vec<f64>,
}

impl BinaryToken {
    pub fn new(bits: Vec<f64>) -> Result<Self> {
        if bits.iter().any(|&b| b != 1.0 && b != -1.0) {
            return Err(Error::InvalidInput("token entries must be exactly -1 or +1".into()));
        }
        Ok(BinaryToken { bits })
    }

    pub fn d(&self) -> usize {
        self.bits.len()
    }
}

/// Quantize a latent vector to the nearest hypercube vertex (per-channel sign).
pub fn quantize(x: &[f64]) -> Result<BinaryToken> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("quantize: non-finite latent entry".into()));
    }
    Ok(BinaryToken { bits: x.iter().map(|&v| sign_unit(v)).collect() })
}

/// Rectangular grid of binary tokens in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub d: usize,
    /// `height * width * d` values in {-1, +1}, token-major.
    pub bits: Vec<f64>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, d: usize, bits: Vec<f64>) -> Result<Self> {
        if bits.len() != height * width * d {
            return Err(Error::InvalidInput(format!(
                "grid bits length {} != {}x{}x{}",
                bits.len(),
                height,
                width,
                d
            )));
        }
        if bits.iter().any(|&b| b != 1.0 && b != -1.0) {
            return Err(Error::InvalidInput("grid entries must be exactly -1 or +1".into()));
        }
        Ok(TokenGrid { height, width, d, bits })
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * self.d;
        &self.bits[at..at + self.d]
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    /// View as a `[tokens, d]` matrix in raster order.
    pub fn to_mat(&self) -> Mat {
        Array2::from_shape_vec((self.num_tokens(), self.d), self.bits.clone()).unwrap()
    }

    pub fn from_mat(height: usize, width: usize, m: &Mat) -> Result<Self> {
        let (rows, d) = m.dim();
        if rows != height * width {
            return Err(Error::InvalidInput(format!(
                "matrix rows {rows} != {height}x{width}"
            )));
        }
        TokenGrid::new(height, width, d, m.iter().cloned().collect())
    }
}

// ---------------------------------------------------------------------------
// Group-wise entropy regularization
// ---------------------------------------------------------------------------

/// Configuration of the group-wise entropy loss over soft code assignments.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EntropyConfig {
    /// Latent channels per token.
    pub d: usize,
    /// Number of channel groups; must divide `d`.
    pub g: usize,
    /// Softmax temperature for the code-assignment distribution.
    pub temperature: f64,
    /// Loss coefficient applied by the tokenizer objective.
    pub weight: f64,
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || self.d == 0 {
            return Err(Error::Config("entropy: d and g must be positive".into()));
        }
        if self.d % self.g != 0 {
            return Err(Error::Config(format!(
                "entropy: group count g={} does not divide channel count d={}",
                self.g, self.d
            )));
        }
        if self.group_size() > 16 {
            return Err(Error::Config(format!(
                "entropy: group size {} exceeds 16 (code enumeration would need 2^{} entries)",
                self.group_size(),
                self.group_size()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("entropy: temperature must be positive".into()));
        }
        if self.weight < 0.0 {
            return Err(Error::Config("entropy: weight must be non-negative".into()));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.d / self.g
    }

    pub fn codes_per_group(&self) -> usize {
        1usize << self.group_size()
    }
}

/// The `2^group_size x group_size` matrix of hypercube corners for one group.
/// Code index enumerates bits MSB-first: bit j of code c is `+1` iff bit
/// `(group_size-1-j)` of `c` is set... concretely `corner(c)[j] = +1` iff the
/// j-th most significant bit of `c` is 1.
pub fn group_code_matrix(group_size: usize) -> Mat {
    let k = 1usize << group_size;
    let mut m = Array2::zeros((k, group_size));
    for c in 0..k {
        for j in 0..group_size {
            let bit = (c >> (group_size - 1 - j)) & 1;
            m[(c, j)] = if bit == 1 { 1.0 } else { -1.0 };
        }
    }
    m
}

/// Soft code-assignment distributions, one per group.
///
/// For group k the distribution is `softmax_c(<x_k, corner_c> / temperature)`
/// over all `2^group_size` corners.
pub fn group_code_distribution(x: &[f64], cfg: &EntropyConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if x.len() != cfg.d {
        return Err(Error::InvalidInput(format!(
            "latent length {} != configured d {}",
            x.len(),
            cfg.d
        )));
    }
    let gs = cfg.group_size();
    let codes = group_code_matrix(gs);
    let mut out = Vec::with_capacity(cfg.g);
    for k in 0..cfg.g {
        let xg = &x[k * gs..(k + 1) * gs];
        let mut logits: Vec<f64> = (0..cfg.codes_per_group())
            .map(|c| {
                let mut dot = 0.0;
                for j in 0..gs {
                    dot += xg[j] * codes[(c, j)];
                }
                dot / cfg.temperature
            })
            .collect();
        let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - maxv).exp();
            denom += *l;
        }
        for l in logits.iter_mut() {
            *l /= denom;
        }
        out.push(logits);
    }
    Ok(out)
}

/// Group-wise entropy loss over a batch of latent vectors:
/// `sum_groups( E_batch[H(q_g(x))] - H(E_batch[q_g(x)]) )`, natural log.
///
/// Minimized (per group, at `-ln K`) when every sample is confidently
/// assigned to one code and the batch uses all codes uniformly.
pub fn entropy_loss(batch: &Mat, cfg: &EntropyConfig) -> Result<f64> {
    cfg.validate()?;
    let (b, d) = batch.dim();
    if b == 0 {
        return Err(Error::InvalidInput("entropy_loss: empty batch".into()));
    }
    if d != cfg.d {
        return Err(Error::InvalidInput(format!("entropy_loss: batch width {d} != d {}", cfg.d)));
    }
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = batch.row(i).to_vec();
        let dists = group_code_distribution(&row, cfg)?;
        for dist in &dists {
            total += entropy_nats(dist) / b as f64;
        }
    }
    // H of the batch-mean distribution, per group.
    let gs = cfg.group_size();
    let k = cfg.codes_per_group();
    for grp in 0..cfg.g {
        let mut mean_dist = vec![0.0f64; k];
        for i in 0..b {
            let row: Vec<f64> = batch.row(i).to_vec();
            let dists = group_code_distribution(&row, cfg)?;
            for c in 0..k {
                mean_dist[c] += dists[grp][c] / b as f64;
            }
        }
        total -= entropy_nats(&mean_dist);
        let _ = gs;
    }
    Ok(total)
}

fn entropy_nats(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

/// Differentiable entropy loss on the tape: same quantity as [`entropy_loss`]
/// but built from graph ops so gradients flow into the latents.
pub fn entropy_loss_node(
    g: &mut crate::graph::Graph,
    latents: crate::graph::NodeId,
    cfg: &EntropyConfig,
) -> crate::graph::NodeId {
    let gs = cfg.group_size();
    let (b, _) = g.value(latents).dim();
    let codes_t = {
        let c = group_code_matrix(gs);
        // [group_size, K], scaled by 1/temperature
        let mut t = Array2::zeros((gs, c.dim().0));
        for code in 0..c.dim().0 {
            for j in 0..gs {
                t[(j, code)] = c[(code, j)] / cfg.temperature;
            }
        }
        t
    };
    let codes = g.constant(codes_t);
    let mut terms = Vec::new();
    for grp in 0..cfg.g {
        // q: [batch, K]
        let xg = slice_cols(g, latents, grp * gs, gs);
        let logits = g.matmul(xg, codes);
        let q = g.row_softmax(logits);
        // E[H(q)] = -(1/B) * sum(q * ln q)
        let lnq = g.ln(q);
        let q_lnq = g.mul(q, lnq);
        let sum_q_lnq = g.sum_all(q_lnq);
        let e_h = g.scale(sum_q_lnq, -1.0 / b as f64);
        // H(E[q]) = -sum(m * ln m), m = column mean of q
        let m = g.mean_rows(q);
        let lnm = g.ln(m);
        let m_lnm = g.mul(m, lnm);
        let sum_m_lnm = g.sum_all(m_lnm);
        let term = g.add(e_h, sum_m_lnm); // E[H] + sum m ln m = E[H] - H[E]
        terms.push(term);
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t);
    }
    acc
}

// Column slice built from gather of the transpose is wasteful; emulate with a
// constant selection matrix instead (cheap at these widths).
fn slice_cols(
    g: &mut crate::graph::Graph,
    x: crate::graph::NodeId,
    start: usize,
    len: usize,
) -> crate::graph::NodeId {
    let (_, n) = g.value(x).dim();
    let mut sel = Array2::zeros((n, len));
    for j in 0..len {
        sel[(start + j, j)] = 1.0;
    }
    let sel = g.constant(sel);
    g.matmul(x, sel)
}

// ---------------------------------------------------------------------------
// Bit-packed latent files
// ---------------------------------------------------------------------------

pub const PACKED_MAGIC: &[u8; 4] = b"BLT1";

/// Serialized token grid: magic `BLT1`, little-endian u32 height, width, d,
/// then `ceil(H*W*d/8)` payload bytes. Bits are packed MSB-first within each
/// byte in token-major then channel order; +1 encodes as 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedLatentFile {
    pub height: u32,
    pub width: u32,
    pub d: u32,
    pub payload: Vec<u8>,
}

impl PackedLatentFile {
    pub fn payload_len(height: u32, width: u32, d: u32) -> Result<usize> {
        let bits = (height as u64)
            .checked_mul(width as u64)
            .and_then(|v| v.checked_mul(d as u64))
            .ok_or_else(|| Error::Format("packed latents: dimension overflow".into()))?;
        let bytes = bits.div_ceil(8);
        usize::try_from(bytes).map_err(|_| Error::Format("packed latents: dimension overflow".into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload.len());
        out.extend_from_slice(PACKED_MAGIC);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("packed latents: truncated header".into()));
        }
        if &bytes[0..4] != PACKED_MAGIC {
            return Err(Error::Format(format!(
                "packed latents: bad magic {:02x?} (expected {:02x?})",
                &bytes[0..4],
                PACKED_MAGIC
            )));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let expect = Self::payload_len(height, width, d)?;
        let payload = &bytes[16..];
        if payload.len() != expect {
            return Err(Error::Format(format!(
                "packed latents: payload length {} != expected {expect}",
                payload.len()
            )));
        }
        Ok(PackedLatentFile { height, width, d, payload: payload.to_vec() })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Pack a token grid into the bit-exact file format.
pub fn pack_bits(grid: &TokenGrid) -> Result<PackedLatentFile> {
    let height = u32::try_from(grid.height)
        .map_err(|_| Error::Format("packed latents: height overflow".into()))?;
    let width =
        u32::try_from(grid.width).map_err(|_| Error::Format("packed latents: width overflow".into()))?;
    let d = u32::try_from(grid.d).map_err(|_| Error::Format("packed latents: d overflow".into()))?;
    let len = PackedLatentFile::payload_len(height, width, d)?;
    let mut payload = vec![0u8; len];
    for (i, &bit) in grid.bits.iter().enumerate() {
        if bit > 0.0 {
            payload[i / 8] |= 0x80 >> (i % 8);
        }
    }
    Ok(PackedLatentFile { height, width, d, payload })
}

/// Inverse of [`pack_bits`].
pub fn unpack_bits(file: &PackedLatentFile) -> Result<TokenGrid> {
    let (h, w, d) = (file.height as usize, file.width as usize, file.d as usize);
    let n = h * w * d;
    let expect = PackedLatentFile::payload_len(file.height, file.width, file.d)?;
    if file.payload.len() != expect {
        return Err(Error::Format(format!(
            "packed latents: payload length {} != expected {expect}",
            file.payload.len()
        )));
    }
    let mut bits = Vec::with_capacity(n);
    for i in 0..n {
        let set = file.payload[i / 8] & (0x80 >> (i % 8)) != 0;
        bits.push(if set { 1.0 } else { -1.0 });
    }
    TokenGrid::new(h, w, d, bits)
}

// ---------------------------------------------------------------------------
// Accounting and diagnostics
// ---------------------------------------------------------------------------

/// Pixels-to-latent compression ratio:
/// `(H*W*3*8) / ((H/f)*(W/f)*d)` for 8-bit RGB input.
pub fn compression_ratio(image_h: u64, image_w: u64, downsample: u64, d: u64) -> Result<f64> {
    if downsample == 0 || image_h % downsample != 0 || image_w % downsample != 0 {
        return Err(Error::InvalidInput(format!(
            "compression_ratio: downsample {downsample} must divide {image_h}x{image_w}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidInput("compression_ratio: d must be positive".into()));
    }
    let pixel_bits = (image_h * image_w * 3 * 8) as f64;
    let latent_bits = ((image_h / downsample) * (image_w / downsample) * d) as f64;
    Ok(pixel_bits / latent_bits)
}

/// Usage statistics over a token collection.
#[derive(Debug, Clone)]
pub struct UsageStats {
    /// Mean of each bit over the collection, in [-1, 1].
    pub per_bit_mean: Vec<f64>,
    /// Fraction of adjacent-sample flips per bit.
    pub per_bit_flip_rate: Vec<f64>,
    /// Per-group empirical code histograms; each sums to the sample count.
    pub group_histograms: Vec<Vec<u64>>,
}

/// Per-bit means and flip rates plus per-group code histograms.
pub fn codebook_usage_stats(tokens: &[BinaryToken], cfg: &EntropyConfig) -> Result<UsageStats> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("codebook_usage_stats: empty collection".into()));
    }
    let d = cfg.d;
    for t in tokens {
        if t.d() != d {
            return Err(Error::InvalidInput(format!("token width {} != d {}", t.d(), d)));
        }
    }
    let n = tokens.len() as f64;
    let mut mean = vec![0.0f64; d];
    let mut flips = vec![0.0f64; d];
    for (i, t) in tokens.iter().enumerate() {
        for j in 0..d {
            mean[j] += t.bits[j] / n;
            if i > 0 && t.bits[j] != tokens[i - 1].bits[j] {
                flips[j] += 1.0;
            }
        }
    }
    if tokens.len() > 1 {
        for f in flips.iter_mut() {
            *f /= (tokens.len() - 1) as f64;
        }
    }
    let gs = cfg.group_size();
    let mut hists = vec![vec![0u64; cfg.codes_per_group()]; cfg.g];
    for t in tokens {
        for grp in 0..cfg.g {
            let mut code = 0usize;
            for j in 0..gs {
                code = (code << 1) | usize::from(t.bits[grp * gs + j] > 0.0);
            }
            hists[grp][code] += 1;
        }
    }
    Ok(UsageStats { per_bit_mean: mean, per_bit_flip_rate: flips, group_histograms: hists })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn cfg(d: usize, g: usize) -> EntropyConfig {
        EntropyConfig { d, g, temperature: 1.0, weight: 0.1 }
    }

    #[test]
    fn quantize_sign_definition() {
        let t = quantize(&[0.3, -0.7, 2.0]).unwrap();
        assert_eq!(t.bits, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn quantize_zero_convention() {
        let t = quantize(&[0.0, -0.0]).unwrap();
        assert_eq!(t.bits, vec![1.0, 1.0]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(matches!(quantize(&[f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(quantize(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn quantize_is_nearest_corner() {
        // Brute force over all 256 corners of {-1,1}^8.
        let mut rng = crate::rng::stream(21, 0);
        for _ in 0..200 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize(&x).unwrap();
            let mut best = f64::INFINITY;
            let mut best_corner = vec![0.0; 8];
            for c in 0..256usize {
                let corner: Vec<f64> =
                    (0..8).map(|j| if (c >> j) & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let dist: f64 = x.iter().zip(&corner).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best {
                    best = dist;
                    best_corner = corner;
                }
            }
            assert_eq!(q.bits, best_corner);
        }
    }

    #[test]
    fn quantize_idempotent() {
        let mut rng = crate::rng::stream(22, 0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let q = quantize(&x).unwrap();
            let qq = quantize(&q.bits).unwrap();
            assert_eq!(q, qq);
        }
    }

    #[test]
    fn code_distribution_uniform_at_zero() {
        let dists = group_code_distribution(&[0.0, 0.0], &cfg(2, 1)).unwrap();
        assert_eq!(dists.len(), 1);
        for &p in &dists[0] {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn code_distribution_concentrates_on_matching_corner() {
        let dists = group_code_distribution(&[10.0, 10.0], &cfg(2, 1)).unwrap();
        // Code 0b11 = (+1,+1) is index 3 in MSB-first enumeration.
        assert!(dists[0][3] >= 0.999, "mass on (+1,+1): {}", dists[0][3]);
        let sum: f64 = dists[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn code_distribution_permutation_symmetry() {
        let c = cfg(2, 1);
        let d1 = group_code_distribution(&[0.9, -0.4], &c).unwrap();
        let d2 = group_code_distribution(&[-0.4, 0.9], &c).unwrap();
        // Swapping bits within the group permutes code indices: bit order
        // (b0,b1) -> (b1,b0) maps MSB-first code (b0 b1) to (b1 b0).
        let perm = [0usize, 2, 1, 3];
        for c in 0..4 {
            assert!((d1[0][c] - d2[0][perm[c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn code_distribution_rejects_bad_group_count() {
        let bad = EntropyConfig { d: 6, g: 4, temperature: 1.0, weight: 0.0 };
        assert!(matches!(group_code_distribution(&[0.0; 6], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_loss_zero_for_identical_confident_batch() {
        // Strongly one-hot assignments, all the same: E[H] ~ 0, H[E] ~ 0.
        let batch = array![[30.0, 30.0], [30.0, 30.0], [30.0, 30.0]];
        let loss = entropy_loss(&batch, &cfg(2, 1)).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn entropy_loss_attains_minimum_when_spread() {
        // One-hot and uniformly spread over all 4 codes: loss = -ln 4.
        let batch = array![
            [30.0, 30.0],
            [30.0, -30.0],
            [-30.0, 30.0],
            [-30.0, -30.0]
        ];
        let loss = entropy_loss(&batch, &cfg(2, 1)).unwrap();
        assert!((loss + 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn entropy_loss_matches_enumeration_oracle() {
        // Independent from-scratch enumeration for d=2, g=1, temperature 1.
        let batch = array![[0.5, -0.3], [1.2, 0.8], [-0.7, 0.1], [0.0, -2.0]];
        let c = cfg(2, 1);
        let corners = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let q = |x: &[f64]| -> Vec<f64> {
            let logits: Vec<f64> =
                corners.iter().map(|cn| x[0] * cn[0] + x[1] * cn[1]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let h = |p: &[f64]| -> f64 { -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>() };
        let rows: Vec<Vec<f64>> = (0..4).map(|i| batch.row(i).to_vec()).collect();
        let dists: Vec<Vec<f64>> = rows.iter().map(|r| q(r)).collect();
        let e_h: f64 = dists.iter().map(|d| h(d)).sum::<f64>() / 4.0;
        let mean: Vec<f64> = (0..4)
            .map(|cidx| dists.iter().map(|d| d[cidx]).sum::<f64>() / 4.0)
            .collect();
        let expected = e_h - h(&mean);

        let loss = entropy_loss(&batch, &c).unwrap();
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs oracle {expected}");

        // The tape version computes the same value.
        let mut g = crate::graph::Graph::new();
        let b = g.constant(batch.clone());
        let node = entropy_loss_node(&mut g, b, &c);
        assert!((g.scalar(node) - expected).abs() < 1e-9);
    }

    #[test]
    fn entropy_loss_bounds_hold() {
        let c = cfg(4, 2);
        let k = c.codes_per_group() as f64;
        let bound = (c.g as f64) * k.ln();
        let mut rng = crate::rng::stream(23, 0);
        for _ in 0..50 {
            let batch = crate::nn::randn_mat(&mut rng, 6, 4, 2.0);
            let loss = entropy_loss(&batch, &c).unwrap();
            assert!(loss <= bound + 1e-9 && loss >= -bound - 1e-9, "loss {loss} out of bounds");
        }
    }

    #[test]
    fn entropy_loss_gradient_matches_fd() {
        let mut store = crate::nn::ParamStore::new();
        let batch =
            store.add("latents", crate::nn::randn_mat(&mut crate::rng::stream(24, 0), 5, 4, 1.0));
        let c = cfg(4, 2);
        let report = crate::gradcheck::check_param_grads(
            &mut store,
            &[batch],
            |g, s| {
                let b = g.param(s, batch);
                entropy_loss_node(g, b, &c)
            },
            crate::gradcheck::GradCheck::default(),
        );
        assert!(report.max_rel_err <= 1e-4, "rel err {:?}", report.worst);
    }

    #[test]
    fn entropy_loss_rejects_empty_batch() {
        let batch = Mat::zeros((0, 2));
        assert!(matches!(entropy_loss(&batch, &cfg(2, 1)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pack_bit_layout_msb_first() {
        let grid = TokenGrid::new(
            1,
            1,
            8,
            vec![1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0],
        )
        .unwrap();
        let f = pack_bits(&grid).unwrap();
        assert_eq!(f.payload, vec![0x80]);
    }

    #[test]
    fn pack_roundtrip_random_grid() {
        let mut rng = crate::rng::stream(25, 0);
        let bits: Vec<f64> =
            (0..4 * 4 * 16).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let grid = TokenGrid::new(4, 4, 16, bits).unwrap();
        let back = unpack_bits(&pack_bits(&grid).unwrap()).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn payload_length_formula() {
        assert_eq!(PackedLatentFile::payload_len(16, 16, 32).unwrap(), 1024);
        assert_eq!(PackedLatentFile::payload_len(3, 3, 5).unwrap(), 6); // ceil(45/8)
    }

    #[test]
    fn packed_file_rejects_corruption() {
        let grid = TokenGrid::new(2, 2, 4, vec![1.0; 16]).unwrap();
        let bytes = pack_bits(&grid).unwrap().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(PackedLatentFile::from_bytes(&bad_magic), Err(Error::Format(_))));
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(PackedLatentFile::from_bytes(truncated), Err(Error::Format(_))));
    }

    #[test]
    fn compression_ratio_known_rows() {
        assert_eq!(compression_ratio(256, 256, 16, 32).unwrap(), 192.0);
        assert_eq!(compression_ratio(256, 256, 32, 256).unwrap(), 96.0);
        assert_eq!(compression_ratio(256, 256, 32, 128).unwrap(), 192.0);
    }

    #[test]
    fn compression_ratio_rejects_indivisible() {
        assert!(compression_ratio(250, 256, 16, 32).is_err());
    }

    #[test]
    fn usage_stats_identical_tokens() {
        let t = BinaryToken::new(vec![1.0, -1.0]).unwrap();
        let stats = codebook_usage_stats(&[t.clone(), t.clone(), t], &cfg(2, 1)).unwrap();
        assert!(stats.per_bit_flip_rate.iter().all(|&f| f == 0.0));
        let hist = &stats.group_histograms[0];
        assert_eq!(hist.iter().sum::<u64>(), 3);
        assert_eq!(hist.iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn usage_stats_all_corners_uniform() {
        let tokens: Vec<BinaryToken> = (0..4)
            .map(|c| {
                BinaryToken::new(vec![
                    if c & 2 != 0 { 1.0 } else { -1.0 },
                    if c & 1 != 0 { 1.0 } else { -1.0 },
                ])
                .unwrap()
            })
            .collect();
        let stats = codebook_usage_stats(&tokens, &cfg(2, 1)).unwrap();
        assert!(stats.per_bit_mean.iter().all(|&m| m.abs() < 1e-12));
        assert!(stats.group_histograms[0].iter().all(|&c| c == 1));
    }

    #[test]
    fn usage_stats_normal_noise_is_balanced() {
        let mut rng = crate::rng::stream(26, 0);
        let tokens: Vec<BinaryToken> = (0..10_000)
            .map(|_| {
                let x: Vec<f64> =
                    (0..4).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                quantize(&x).unwrap()
            })
            .collect();
        let stats = codebook_usage_stats(&tokens, &cfg(4, 1)).unwrap();
        for &m in &stats.per_bit_mean {
            assert!(m.abs() < 0.05, "per-bit mean {m} not near 0");
        }
    }
}
