//! Toy visual tokenizer: a patch-MLP encoder/decoder around the sign
//! quantizer, trained on a synthetic dataset of colored rectangles.
//!
//! The encoder patchifies the image (f x f non-overlapping patches, linear
//! embed), mixes with two residual MLP blocks, and projects to d latent
//! channels per token; the decoder mirrors it. Reconstruction is plain L2 in
//! pixel space plus the group-wise entropy regularizer on pre-quantization
//! latents, with gradients crossing the quantizer via the straight-through
//! estimator.

use rand::Rng;

use crate::binq::{self, EntropyConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::image::{hsv_to_rgb, ImageTensor};
use crate::nn::{randn_mat, AdamW, ParamId, ParamStore};
use crate::rng::role_seed;
use crate::tensor::Mat;

/// Tokenizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    /// Spatial downsample factor f; each f x f pixel patch becomes one token.
    pub downsample: usize,
    /// Latent channels (bits) per token.
    pub d: usize,
    /// Width of the encoder/decoder MLPs.
    pub hidden_width: usize,
    pub entropy: EntropyConfig,
    /// Weight of the commitment term `||x - stopgrad(sign(x))||^2` that keeps
    /// pre-quantization magnitudes near the hypercube. Without it Adam keeps
    /// inflating |x| along the entropy term's vanishing confidence gradient
    /// until the code-assignment softmax underflows.
    pub commit_weight: f64,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.downsample) {
            return Err(Error::Config(format!(
                "tokenizer: downsample {} not in {{2,4,8}}",
                self.downsample
            )));
        }
        if self.d != self.entropy.d {
            return Err(Error::Config(format!(
                "tokenizer: d {} != entropy.d {}",
                self.d, self.entropy.d
            )));
        }
        self.entropy.validate()
    }

    fn patch_dim(&self) -> usize {
        self.downsample * self.downsample * 3
    }
}

/// Named parameter handles for the tokenizer.
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    enc_in: (ParamId, ParamId),
    enc_blocks: Vec<(ParamId, ParamId, ParamId, ParamId)>,
    enc_out: (ParamId, ParamId),
    dec_in: (ParamId, ParamId),
    dec_blocks: Vec<(ParamId, ParamId, ParamId, ParamId)>,
    dec_out: (ParamId, ParamId),
}

const NUM_BLOCKS: usize = 2;
const BLOCK_EXPANSION: usize = 2;

impl Tokenizer {
    /// Create parameters in `store` under the `tokenizer.` prefix.
    pub fn init(store: &mut ParamStore, cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(role_seed(seed, "tokenizer-init"), 0);
        let h = cfg.hidden_width;
        let pd = cfg.patch_dim();
        let lin = |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, i: usize, o: usize| {
            let std = 1.0 / (i as f64).sqrt();
            let w = store.add(&format!("{name}.w"), randn_mat(rng, i, o, std));
            let b = store.add(&format!("{name}.b"), Mat::zeros((1, o)));
            (w, b)
        };
        let blocks = |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, side: &str| {
            (0..NUM_BLOCKS)
                .map(|i| {
                    let (w1, b1) =
                        lin(store, rng, &format!("tokenizer.{side}.blk{i}.fc1"), h, h * BLOCK_EXPANSION);
                    let (w2, b2) =
                        lin(store, rng, &format!("tokenizer.{side}.blk{i}.fc2"), h * BLOCK_EXPANSION, h);
                    (w1, b1, w2, b2)
                })
                .collect::<Vec<_>>()
        };
        let enc_in = lin(store, &mut rng, "tokenizer.enc.in", pd, h);
        let enc_blocks = blocks(store, &mut rng, "enc");
        let enc_out = lin(store, &mut rng, "tokenizer.enc.out", h, cfg.d);
        let dec_in = lin(store, &mut rng, "tokenizer.dec.in", cfg.d, h);
        let dec_blocks = blocks(store, &mut rng, "dec");
        let dec_out = lin(store, &mut rng, "tokenizer.dec.out", h, pd);
        Ok(Tokenizer { cfg, enc_in, enc_blocks, enc_out, dec_in, dec_blocks, dec_out })
    }

    /// Recover handles from a store already holding `tokenizer.*` entries.
    pub fn from_store(store: &ParamStore, cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Compat(format!("checkpoint missing parameter {name}")))
        };
        let pair = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((get(&format!("{name}.w"))?, get(&format!("{name}.b"))?))
        };
        let blocks = |side: &str| -> Result<Vec<(ParamId, ParamId, ParamId, ParamId)>> {
            (0..NUM_BLOCKS)
                .map(|i| {
                    let (w1, b1) = pair(&format!("tokenizer.{side}.blk{i}.fc1"))?;
                    let (w2, b2) = pair(&format!("tokenizer.{side}.blk{i}.fc2"))?;
                    Ok((w1, b1, w2, b2))
                })
                .collect()
        };
        Ok(Tokenizer {
            cfg,
            enc_in: pair("tokenizer.enc.in")?,
            enc_blocks: blocks("enc")?,
            enc_out: pair("tokenizer.enc.out")?,
            dec_in: pair("tokenizer.dec.in")?,
            dec_blocks: blocks("dec")?,
            dec_out: pair("tokenizer.dec.out")?,
        })
    }

    pub fn param_names(&self) -> &'static str {
        "tokenizer."
    }

    /// Token-grid dimensions for an image of the given size.
    pub fn grid_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.cfg.downsample;
        if height % f != 0 || width % f != 0 {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} not divisible by downsample {f}"
            )));
        }
        Ok((height / f, width / f))
    }

    /// Flatten an image into the `[tokens, f*f*3]` patch matrix.
    pub fn patchify(&self, img: &ImageTensor) -> Result<Mat> {
        let f = self.cfg.downsample;
        let (ht, wt) = self.grid_shape(img.height, img.width)?;
        let mut m = Mat::zeros((ht * wt, self.cfg.patch_dim()));
        for tr in 0..ht {
            for tc in 0..wt {
                let row = tr * wt + tc;
                for pr in 0..f {
                    for pc in 0..f {
                        let rgb = img.get(tr * f + pr, tc * f + pc);
                        let at = (pr * f + pc) * 3;
                        m[(row, at)] = rgb[0];
                        m[(row, at + 1)] = rgb[1];
                        m[(row, at + 2)] = rgb[2];
                    }
                }
            }
        }
        Ok(m)
    }

    /// Inverse of [`Tokenizer::patchify`].
    pub fn unpatchify(&self, patches: &Mat, ht: usize, wt: usize) -> ImageTensor {
        let f = self.cfg.downsample;
        let mut img = ImageTensor::zeros(ht * f, wt * f);
        for tr in 0..ht {
            for tc in 0..wt {
                let row = tr * wt + tc;
                for pr in 0..f {
                    for pc in 0..f {
                        let at = (pr * f + pc) * 3;
                        img.set(
                            tr * f + pr,
                            tc * f + pc,
                            [patches[(row, at)], patches[(row, at + 1)], patches[(row, at + 2)]],
                        );
                    }
                }
            }
        }
        img
    }

    fn mlp_blocks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut h: NodeId,
        blocks: &[(ParamId, ParamId, ParamId, ParamId)],
        frozen: bool,
    ) -> NodeId {
        let p = |g: &mut Graph, id: ParamId| {
            if frozen {
                g.frozen_param(store, id)
            } else {
                g.param(store, id)
            }
        };
        for &(w1, b1, w2, b2) in blocks {
            let normed = g.layer_norm(h, 1e-6);
            let (w1n, b1n, w2n, b2n) = (p(g, w1), p(g, b1), p(g, w2), p(g, b2));
            let a = g.linear(normed, w1n, b1n);
            let a = g.silu(a);
            let a = g.linear(a, w2n, b2n);
            h = g.add(h, a);
        }
        h
    }

    /// Encoder: patch matrix -> pre-quantization latents `[tokens, d]`.
    pub fn encode_node(&self, g: &mut Graph, store: &ParamStore, patches: &Mat, frozen: bool) -> NodeId {
        let p = |g: &mut Graph, id: ParamId| {
            if frozen {
                g.frozen_param(store, id)
            } else {
                g.param(store, id)
            }
        };
        let x = g.constant(patches.clone());
        let (wi, bi) = (p(g, self.enc_in.0), p(g, self.enc_in.1));
        let h = g.linear(x, wi, bi);
        let h = self.mlp_blocks(g, store, h, &self.enc_blocks, frozen);
        let (wo, bo) = (p(g, self.enc_out.0), p(g, self.enc_out.1));
        g.linear(h, wo, bo)
    }

    /// Decoder: `[tokens, d]` bits (or latents) -> patch matrix node.
    pub fn decode_node(&self, g: &mut Graph, store: &ParamStore, tokens: NodeId, frozen: bool) -> NodeId {
        let p = |g: &mut Graph, id: ParamId| {
            if frozen {
                g.frozen_param(store, id)
            } else {
                g.param(store, id)
            }
        };
        let (wi, bi) = (p(g, self.dec_in.0), p(g, self.dec_in.1));
        let h = g.linear(tokens, wi, bi);
        let h = self.mlp_blocks(g, store, h, &self.dec_blocks, frozen);
        let (wo, bo) = (p(g, self.dec_out.0), p(g, self.dec_out.1));
        g.linear(h, wo, bo)
    }

    /// Encode an image to its pre-quantization latent grid.
    pub fn encode(&self, store: &ParamStore, img: &ImageTensor) -> Result<Mat> {
        let patches = self.patchify(img)?;
        let mut g = Graph::new();
        let latents = self.encode_node(&mut g, store, &patches, true);
        Ok(g.value(latents).clone())
    }

    /// Encode and quantize to a binary token grid.
    pub fn encode_quantized(&self, store: &ParamStore, img: &ImageTensor) -> Result<TokenGrid> {
        let (ht, wt) = self.grid_shape(img.height, img.width)?;
        let latents = self.encode(store, img)?;
        let bits = latents.mapv(binq::sign_unit);
        TokenGrid::from_mat(ht, wt, &bits)
    }

    /// Decode a binary token grid to an image (clamped to [0,1]).
    pub fn decode(&self, store: &ParamStore, grid: &TokenGrid) -> Result<ImageTensor> {
        if grid.d != self.cfg.d {
            return Err(Error::InvalidInput(format!(
                "decode: grid channel count {} != configured d {}",
                grid.d, self.cfg.d
            )));
        }
        self.decode_mat(store, &grid.to_mat(), grid.height, grid.width)
    }

    /// Decode a `[tokens, d]` matrix (binary or continuous latents).
    pub fn decode_mat(&self, store: &ParamStore, tokens: &Mat, ht: usize, wt: usize) -> Result<ImageTensor> {
        let (rows, d) = tokens.dim();
        if d != self.cfg.d || rows != ht * wt {
            return Err(Error::InvalidInput(format!(
                "decode: matrix {rows}x{d} does not match {ht}x{wt} grid of d = {}",
                self.cfg.d
            )));
        }
        let mut g = Graph::new();
        let tokens = g.constant(tokens.clone());
        let patches = self.decode_node(&mut g, store, tokens, true);
        let mut img = self.unpatchify(g.value(patches), ht, wt);
        img.clamp01();
        Ok(img)
    }
}

/// Loss report for one tokenizer training step.
#[derive(Debug, Clone, Copy)]
pub struct TokLossReport {
    pub recon: f64,
    pub entropy: f64,
    pub commit: f64,
    pub total: f64,
}

/// One optimizer step on a batch of images. Returns the loss decomposition;
/// errors with [`Error::TrainingDiverged`] on non-finite values.
pub fn tokenizer_train_step(
    tok: &Tokenizer,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[ImageTensor],
    step: u64,
) -> Result<TokLossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("tokenizer_train_step: empty batch".into()));
    }
    let mut patch_rows = Vec::with_capacity(batch.len());
    for img in batch {
        patch_rows.push(tok.patchify(img)?);
    }
    let all = ndarray::concatenate(
        ndarray::Axis(0),
        &patch_rows.iter().map(|m| m.view()).collect::<Vec<_>>(),
    )
    .unwrap();

    let mut g = Graph::new();
    let latents = tok.encode_node(&mut g, store, &all, false);
    let q = g.sign_ste(latents);
    let recon = tok.decode_node(&mut g, store, q, false);
    let target = g.constant(all.clone());
    let diff = g.sub(recon, target);
    let sq = g.mul(diff, diff);
    let recon_loss = g.mean_all(sq);
    let ent = binq::entropy_loss_node(&mut g, latents, &tok.cfg.entropy);
    let weighted = g.scale(ent, tok.cfg.entropy.weight);
    // Commitment toward the (stop-gradded) quantized values.
    let q_const = g.value(q).clone();
    let q_sg = g.constant(q_const);
    let cdiff = g.sub(latents, q_sg);
    let csq = g.mul(cdiff, cdiff);
    let commit = g.mean_all(csq);
    let commit_weighted = g.scale(commit, tok.cfg.commit_weight);
    let partial = g.add(recon_loss, weighted);
    let total = g.add(partial, commit_weighted);

    let report = TokLossReport {
        recon: g.scalar(recon_loss),
        entropy: g.scalar(ent),
        commit: g.scalar(commit),
        total: g.scalar(total),
    };
    if !report.total.is_finite() {
        return Err(Error::TrainingDiverged {
            step,
            detail: format!(
                "recon={} entropy={} commit={}",
                report.recon, report.entropy, report.commit
            ),
        });
    }
    let grads = g.backward(total);
    opt.step(store, &grads);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Class-conditional synthetic images: one solid-color rectangle per image,
/// hue drawn from the class band (centers at 360/num_classes spacing, +/- 25
/// degrees), on a dark achromatic background. Class is decidable from the
/// dominant hue with probability 1 by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticDatasetSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

pub const HUE_JITTER: f64 = 25.0;

impl SyntheticDatasetSpec {
    /// Deterministic sample `idx`: the same `(spec, idx)` always produces the
    /// same image and label.
    pub fn sample(&self, idx: u64) -> (ImageTensor, usize) {
        let mut rng = crate::rng::stream(role_seed(self.seed, "synth-data"), idx);
        let label = rng.gen_range(0..self.num_classes);
        let img = self.render(label, &mut rng);
        (img, label)
    }

    /// Sample with a fixed label (used for class-conditional evaluation sets).
    pub fn sample_with_label(&self, label: usize, idx: u64) -> ImageTensor {
        let mut rng = crate::rng::stream(role_seed(self.seed, "synth-data-fixed"), idx);
        let _burn = rng.gen_range(0..self.num_classes);
        self.render(label, &mut rng)
    }

    fn render(&self, label: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ImageTensor {
        let s = self.image_size;
        let mut img = ImageTensor::zeros(s, s);
        // Dark, faintly tinted background, solid within an image but varied
        // across the dataset so background patches spread over many codes.
        // The tint chroma stays an order of magnitude below the oracle's
        // threshold.
        let bg_val = rng.gen_range(0.06..0.22);
        let bg_hue = rng.gen_range(0.0..360.0);
        let bg_sat = rng.gen_range(0.0..0.15);
        let bg_rgb = hsv_to_rgb(bg_hue, bg_sat, bg_val);
        for r in 0..s {
            for c in 0..s {
                img.set(r, c, bg_rgb);
            }
        }
        let min_side = (s * 5 / 8).max(4);
        let max_side = (s * 7 / 8).max(min_side + 1);
        let h = rng.gen_range(min_side..max_side);
        let w = rng.gen_range(min_side..max_side);
        let r0 = rng.gen_range(0..=(s - h));
        let c0 = rng.gen_range(0..=(s - w));
        let hue_center = 360.0 * label as f64 / self.num_classes as f64;
        let hue = hue_center + rng.gen_range(-HUE_JITTER..HUE_JITTER);
        let sat = rng.gen_range(0.85..1.0);
        let val = rng.gen_range(0.85..1.0);
        let rgb = hsv_to_rgb(hue, sat, val);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                img.set(r, c, rgb);
            }
        }
        img
    }
}
