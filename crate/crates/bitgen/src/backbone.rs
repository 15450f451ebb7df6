//! Block-causal autoregressive transformer.
//!
//! Sequences are laid out as one conditioning token (class or null), `p^2-1`
//! learnable prefix placeholders, then the image tokens in patch-raster order.
//! Attention permission is block-wise causal: the first block is the
//! conditioning + prefix positions (exactly `p^2` of them), then one block per
//! patch; position i may attend to position j iff `block(j) <= block(i)`, so
//! tokens within a patch see each other while patches remain strictly ordered.
//! The hidden states of block `m-1` condition the prediction of patch `m`.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{randn_mat, ParamId, ParamStore};
use crate::rng::role_seed;
use crate::tensor::{interval_attention, layer_norm_rows, matmul, silu_mat, Mat};

// ---------------------------------------------------------------------------
// Sequence layout and mask
// ---------------------------------------------------------------------------

/// Positions and block boundaries of one generation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SequenceLayout {
    /// Conditioning tokens ahead of the prefix (one: class or null).
    pub cond_len: usize,
    /// Patch side length.
    pub patch_size: usize,
    /// Token-grid height and width.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SequenceLayout {
    pub fn new(cond_len: usize, patch_size: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if patch_size == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::InvalidInput("layout: zero dimension".into()));
        }
        if grid_h % patch_size != 0 || grid_w % patch_size != 0 {
            return Err(Error::InvalidInput(format!(
                "layout: patch size {patch_size} does not divide grid {grid_h}x{grid_w}"
            )));
        }
        let l = SequenceLayout { cond_len, patch_size, grid_h, grid_w };
        if cond_len + l.prefix_len() == 0 {
            return Err(Error::InvalidInput("layout: empty first block".into()));
        }
        Ok(l)
    }

    /// Tokens predicted jointly per step.
    pub fn tokens_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Learnable placeholders before the vision tokens: `p^2 - 1`.
    pub fn prefix_len(&self) -> usize {
        self.tokens_per_patch() - 1
    }

    /// Number of patches M.
    pub fn num_patches(&self) -> usize {
        (self.grid_h / self.patch_size) * (self.grid_w / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Total sequence length `cond + prefix + M * p^2`.
    pub fn len(&self) -> usize {
        self.cond_len + self.prefix_len() + self.num_patches() * self.tokens_per_patch()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Block index of a position: block 0 is conditioning + prefix, block m
    /// (1-based) is patch m.
    pub fn block_of(&self, pos: usize) -> usize {
        let first = self.cond_len + self.prefix_len();
        if pos < first {
            0
        } else {
            1 + (pos - first) / self.tokens_per_patch()
        }
    }

    /// Block sizes: `[cond+prefix, p^2, p^2, ...]`.
    pub fn block_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.cond_len + self.prefix_len()];
        v.extend(std::iter::repeat(self.tokens_per_patch()).take(self.num_patches()));
        v
    }

    /// Positions whose hidden states condition patch `m` (1-based): all of
    /// block `m-1`.
    pub fn cond_positions_for_patch(&self, m: usize) -> std::ops::Range<usize> {
        assert!(m >= 1 && m <= self.num_patches());
        let first = self.cond_len + self.prefix_len();
        if m == 1 {
            0..first
        } else {
            let start = first + (m - 2) * self.tokens_per_patch();
            start..start + self.tokens_per_patch()
        }
    }

    /// Sequence positions holding the tokens of patch `m` (1-based).
    pub fn token_positions_for_patch(&self, m: usize) -> std::ops::Range<usize> {
        assert!(m >= 1 && m <= self.num_patches());
        let first = self.cond_len + self.prefix_len();
        let start = first + (m - 1) * self.tokens_per_patch();
        start..start + self.tokens_per_patch()
    }
}

/// Boolean attention-permission matrix plus the block index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCausalMask {
    pub len: usize,
    pub block_of: Vec<usize>,
    /// Row-major `len x len`; `allow[i*len + j]` iff `block(j) <= block(i)`.
    pub allow: Vec<bool>,
}

impl BlockCausalMask {
    /// Build from explicit block sizes.
    pub fn from_block_sizes(sizes: &[usize]) -> Self {
        let len: usize = sizes.iter().sum();
        let mut block_of = Vec::with_capacity(len);
        for (b, &s) in sizes.iter().enumerate() {
            block_of.extend(std::iter::repeat(b).take(s));
        }
        let mut allow = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                allow[i * len + j] = block_of[j] <= block_of[i];
            }
        }
        BlockCausalMask { len, block_of, allow }
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }

    /// Verify the defining rule at every pair.
    pub fn verify(&self) -> bool {
        for i in 0..self.len {
            for j in 0..self.len {
                if self.allowed(i, j) != (self.block_of[j] <= self.block_of[i]) {
                    return false;
                }
            }
        }
        true
    }

    /// Per-row visibility as `[0, hi)` prefixes. Block-causal visibility is
    /// always a contiguous prefix; asserted here.
    pub fn row_prefixes(&self) -> Vec<usize> {
        let mut his = Vec::with_capacity(self.len);
        for i in 0..self.len {
            let mut hi = 0;
            for j in 0..self.len {
                if self.allowed(i, j) {
                    assert_eq!(j, hi, "mask row {i} is not a contiguous prefix");
                    hi += 1;
                }
            }
            his.push(hi);
        }
        his
    }
}

/// The mask for a standard layout.
pub fn build_block_causal_mask(layout: &SequenceLayout) -> BlockCausalMask {
    BlockCausalMask::from_block_sizes(&layout.block_sizes())
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// 2D sinusoidal positional encoding for a token grid: half the channels
/// encode the row with interleaved sin/cos at geometric frequencies, half the
/// column.
pub fn positional_encoding_2d(grid_h: usize, grid_w: usize, width: usize) -> Mat {
    assert!(width % 4 == 0, "positional width must be divisible by 4");
    let quarter = width / 4;
    let mut pe = Mat::zeros((grid_h * grid_w, width));
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = r * grid_w + c;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                pe[(row, 2 * i)] = (r as f64 * freq).sin();
                pe[(row, 2 * i + 1)] = (r as f64 * freq).cos();
                pe[(row, 2 * quarter + 2 * i)] = (c as f64 * freq).sin();
                pe[(row, 2 * quarter + 2 * i + 1)] = (c as f64 * freq).cos();
            }
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    /// Input token bits.
    pub d: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width % 4 != 0 {
            return Err(Error::Config("backbone: width must be divisible by 4".into()));
        }
        Ok(())
    }
}

struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles for the backbone. Prefix-token rows live in their own
/// bank so patch-size escalation can extend it.
pub struct Backbone {
    pub cfg: BackboneConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    /// `[num_classes + 1, width]`; the last row is the learned null
    /// conditioning used for classifier-free guidance.
    class_emb: ParamId,
    /// `[prefix_capacity, width]` learned placeholders.
    prefix_emb: ParamId,
    blocks: Vec<BlockParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

const LN_EPS: f64 = 1e-6;

impl Backbone {
    pub fn init(
        store: &mut ParamStore,
        cfg: BackboneConfig,
        prefix_capacity: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(role_seed(seed, "backbone-init"), 0);
        let w = cfg.width;
        let std = 0.02;
        let embed_w = store.add("backbone.embed.w", randn_mat(&mut rng, cfg.d, w, std));
        let embed_b = store.add("backbone.embed.b", Mat::zeros((1, w)));
        let class_emb =
            store.add("backbone.class_emb", randn_mat(&mut rng, cfg.num_classes + 1, w, std));
        let prefix_emb =
            store.add("backbone.prefix_emb", randn_mat(&mut rng, prefix_capacity.max(1), w, std));
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            let p = format!("backbone.block{i}");
            blocks.push(BlockParams {
                ln1_g: store.add(&format!("{p}.ln1.g"), Mat::from_elem((1, w), 1.0)),
                ln1_b: store.add(&format!("{p}.ln1.b"), Mat::zeros((1, w))),
                wq: store.add(&format!("{p}.attn.wq"), randn_mat(&mut rng, w, w, std)),
                wk: store.add(&format!("{p}.attn.wk"), randn_mat(&mut rng, w, w, std)),
                wv: store.add(&format!("{p}.attn.wv"), randn_mat(&mut rng, w, w, std)),
                wo: store.add(&format!("{p}.attn.wo"), randn_mat(&mut rng, w, w, std)),
                ln2_g: store.add(&format!("{p}.ln2.g"), Mat::from_elem((1, w), 1.0)),
                ln2_b: store.add(&format!("{p}.ln2.b"), Mat::zeros((1, w))),
                w1: store.add(&format!("{p}.mlp.w1"), randn_mat(&mut rng, w, w * cfg.mlp_ratio, std)),
                b1: store.add(&format!("{p}.mlp.b1"), Mat::zeros((1, w * cfg.mlp_ratio))),
                w2: store.add(&format!("{p}.mlp.w2"), randn_mat(&mut rng, w * cfg.mlp_ratio, w, std)),
                b2: store.add(&format!("{p}.mlp.b2"), Mat::zeros((1, w))),
            });
        }
        let lnf_g = store.add("backbone.lnf.g", Mat::from_elem((1, w), 1.0));
        let lnf_b = store.add("backbone.lnf.b", Mat::zeros((1, w)));
        Ok(Backbone { cfg, embed_w, embed_b, class_emb, prefix_emb, blocks, lnf_g, lnf_b })
    }

    pub fn from_store(store: &ParamStore, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| {
            store.id(name).ok_or_else(|| Error::Compat(format!("checkpoint missing parameter {name}")))
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("backbone.block{i}");
                Ok(BlockParams {
                    ln1_g: get(&format!("{p}.ln1.g"))?,
                    ln1_b: get(&format!("{p}.ln1.b"))?,
                    wq: get(&format!("{p}.attn.wq"))?,
                    wk: get(&format!("{p}.attn.wk"))?,
                    wv: get(&format!("{p}.attn.wv"))?,
                    wo: get(&format!("{p}.attn.wo"))?,
                    ln2_g: get(&format!("{p}.ln2.g"))?,
                    ln2_b: get(&format!("{p}.ln2.b"))?,
                    w1: get(&format!("{p}.mlp.w1"))?,
                    b1: get(&format!("{p}.mlp.b1"))?,
                    w2: get(&format!("{p}.mlp.w2"))?,
                    b2: get(&format!("{p}.mlp.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            cfg,
            embed_w: get("backbone.embed.w")?,
            embed_b: get("backbone.embed.b")?,
            class_emb: get("backbone.class_emb")?,
            prefix_emb: get("backbone.prefix_emb")?,
            blocks,
            lnf_g: get("backbone.lnf.g")?,
            lnf_b: get("backbone.lnf.b")?,
        })
    }

    pub fn prefix_capacity(&self, store: &ParamStore) -> usize {
        store.value(self.prefix_emb).dim().0
    }

    pub fn prefix_param(&self) -> ParamId {
        self.prefix_emb
    }

    pub fn null_class_row(&self) -> usize {
        self.cfg.num_classes
    }

    /// Embed conditioning + prefix + a (possibly partial, block-aligned)
    /// token sequence.
    ///
    /// `tokens` is `[count, d]` in patch-raster order with `count <= M*p^2`;
    /// `grid_rows`/`grid_cols` give each token's own grid coordinates for the
    /// 2D positional term. `cond` is the class id, or `None` for the learned
    /// null embedding.
    pub fn embed_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layout: &SequenceLayout,
        cond: Option<usize>,
        tokens: &Mat,
        token_coords: &[(usize, usize)],
    ) -> Result<NodeId> {
        let (count, d) = tokens.dim();
        if d != self.cfg.d {
            return Err(Error::InvalidInput(format!("embed: token bits {d} != d {}", self.cfg.d)));
        }
        if count != token_coords.len() {
            return Err(Error::InvalidInput("embed: coords/token count mismatch".into()));
        }
        let max = layout.num_patches() * layout.tokens_per_patch();
        if count > max || count % layout.tokens_per_patch() != 0 {
            return Err(Error::InvalidInput(format!(
                "embed: token count {count} not a whole number of patches (p^2 = {}, max {max})",
                layout.tokens_per_patch()
            )));
        }
        if let Some(c) = cond {
            if c >= self.cfg.num_classes {
                return Err(Error::InvalidInput(format!(
                    "embed: class {c} out of range 0..{}",
                    self.cfg.num_classes
                )));
            }
        }
        let mut parts = vec![self.embed_cond_prefix_node(g, store, layout, cond)];
        if count > 0 {
            parts.push(self.embed_tokens_node(g, store, layout, tokens, token_coords));
        }
        Ok(g.concat_rows(&parts))
    }

    /// Conditioning token plus the `p^2-1` prefix placeholders (block 0).
    pub fn embed_cond_prefix_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layout: &SequenceLayout,
        cond: Option<usize>,
    ) -> NodeId {
        let class_row = cond.unwrap_or(self.cfg.num_classes);
        let class_emb = g.param(store, self.class_emb);
        let cond_node = g.gather_rows(class_emb, Rc::new(vec![class_row]));
        let prefix_len = layout.prefix_len();
        if prefix_len > 0 {
            let bank = g.param(store, self.prefix_emb);
            let pfx = g.slice_rows(bank, 0, prefix_len);
            g.concat_rows(&[cond_node, pfx])
        } else {
            cond_node
        }
    }

    /// Linear projection of binary tokens plus each token's 2D positional
    /// encoding at its own grid coordinates.
    pub fn embed_tokens_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layout: &SequenceLayout,
        tokens: &Mat,
        token_coords: &[(usize, usize)],
    ) -> NodeId {
        let count = tokens.dim().0;
        let (ew, eb) = (g.param(store, self.embed_w), g.param(store, self.embed_b));
        let tok = g.constant(tokens.clone());
        let proj = g.linear(tok, ew, eb);
        let full_pe = positional_encoding_2d(layout.grid_h, layout.grid_w, self.cfg.width);
        let mut pe = Mat::zeros((count, self.cfg.width));
        for (i, &(r, c)) in token_coords.iter().enumerate() {
            pe.row_mut(i).assign(&full_pe.row(r * layout.grid_w + c));
        }
        let pe = g.constant(pe);
        g.add(proj, pe)
    }

    /// Value-only block-0 embedding for the decoding path.
    pub fn embed_cond_prefix_vals(
        &self,
        store: &ParamStore,
        layout: &SequenceLayout,
        cond: Option<usize>,
    ) -> Mat {
        let mut g = Graph::new();
        let n = self.embed_cond_prefix_node(&mut g, store, layout, cond);
        g.value(n).clone()
    }

    /// Value-only token embedding for the decoding path.
    pub fn embed_tokens_vals(
        &self,
        store: &ParamStore,
        layout: &SequenceLayout,
        tokens: &Mat,
        token_coords: &[(usize, usize)],
    ) -> Mat {
        let mut g = Graph::new();
        let n = self.embed_tokens_node(&mut g, store, layout, tokens, token_coords);
        g.value(n).clone()
    }

    fn affine_ln(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
    ) -> NodeId {
        let rows = g.value(x).dim().0;
        let n = g.layer_norm(x, LN_EPS);
        let gm = g.param(store, gamma);
        let bt = g.param(store, beta);
        // Broadcast the [1,w] affine over rows via gather.
        let idx = Rc::new(vec![0usize; rows]);
        let gm_full = g.gather_rows(gm, idx.clone());
        let bt_full = g.gather_rows(bt, idx);
        let scaled = g.mul(n, gm_full);
        g.add(scaled, bt_full)
    }

    /// Full forward pass under per-row visibility prefixes.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: NodeId,
        row_prefixes: &[usize],
    ) -> NodeId {
        let rows = g.value(inputs).dim().0;
        assert_eq!(rows, row_prefixes.len(), "forward: prefix length mismatch");
        let lo = Rc::new(vec![0usize; rows]);
        let hi = Rc::new(row_prefixes.to_vec());
        let mut h = inputs;
        for blk in &self.blocks {
            let normed = self.affine_ln(g, store, h, blk.ln1_g, blk.ln1_b);
            let (wq, wk, wv, wo) = (
                g.param(store, blk.wq),
                g.param(store, blk.wk),
                g.param(store, blk.wv),
                g.param(store, blk.wo),
            );
            let q = g.matmul(normed, wq);
            let k = g.matmul(normed, wk);
            let v = g.matmul(normed, wv);
            let att = g.attention(q, k, v, self.cfg.heads, lo.clone(), hi.clone());
            let att = g.matmul(att, wo);
            h = g.add(h, att);
            let normed2 = self.affine_ln(g, store, h, blk.ln2_g, blk.ln2_b);
            let (w1, b1, w2, b2) = (
                g.param(store, blk.w1),
                g.param(store, blk.b1),
                g.param(store, blk.w2),
                g.param(store, blk.b2),
            );
            let a = g.linear(normed2, w1, b1);
            let a = g.silu(a);
            let a = g.linear(a, w2, b2);
            h = g.add(h, a);
        }
        self.affine_ln(g, store, h, self.lnf_g, self.lnf_b)
    }
}

// ---------------------------------------------------------------------------
// Cached incremental decoding
// ---------------------------------------------------------------------------

/// Per-layer key/value cache for patch-by-patch decoding. Values only; the
/// arithmetic goes through the same kernels as the graph forward, so the
/// incremental outputs are bit-identical to a full forward over the prefix.
pub struct DecodeCache {
    k: Vec<Mat>,
    v: Vec<Mat>,
    len: usize,
}

impl DecodeCache {
    pub fn new(depth: usize, width: usize) -> Self {
        DecodeCache {
            k: (0..depth).map(|_| Mat::zeros((0, width))).collect(),
            v: (0..depth).map(|_| Mat::zeros((0, width))).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn append(&mut self, layer: usize, k_new: &Mat, v_new: &Mat) {
        let cat = |old: &Mat, new: &Mat| {
            ndarray::concatenate(ndarray::Axis(0), &[old.view(), new.view()]).unwrap()
        };
        self.k[layer] = cat(&self.k[layer], k_new);
        self.v[layer] = cat(&self.v[layer], v_new);
    }
}

impl Backbone {
    /// Value-only affine layer norm used by the incremental path.
    fn affine_ln_vals(&self, store: &ParamStore, x: &Mat, gamma: ParamId, beta: ParamId) -> Mat {
        let (normed, _, _) = layer_norm_rows(x, LN_EPS);
        let gm = store.value(gamma);
        let bt = store.value(beta);
        let mut out = normed;
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j] * gm[(0, j)] + bt[(0, j)];
            }
        }
        out
    }

    /// Process one appended block of embedded inputs against the cache.
    ///
    /// The new rows attend to everything already cached plus all rows of
    /// their own block (intra-patch visibility). Returns the hidden states
    /// for the new rows and advances the cache by `inputs.rows`.
    pub fn incremental_forward(
        &self,
        store: &ParamStore,
        cache: &mut DecodeCache,
        inputs: &Mat,
    ) -> Mat {
        let rows = inputs.dim().0;
        let total = cache.len + rows;
        let lo = vec![0usize; rows];
        let hi = vec![total; rows];
        let mut h = inputs.clone();
        for (layer, blk) in self.blocks.iter().enumerate() {
            let normed = self.affine_ln_vals(store, &h, blk.ln1_g, blk.ln1_b);
            let q = matmul(&normed, store.value(blk.wq));
            let k_new = matmul(&normed, store.value(blk.wk));
            let v_new = matmul(&normed, store.value(blk.wv));
            cache.append(layer, &k_new, &v_new);
            let (att, _) = interval_attention(
                &q,
                &cache.k[layer],
                &cache.v[layer],
                self.cfg.heads,
                &lo,
                &hi,
                false,
            );
            let att = matmul(&att, store.value(blk.wo));
            h = &h + &att;
            let normed2 = self.affine_ln_vals(store, &h, blk.ln2_g, blk.ln2_b);
            let mut a = matmul(&normed2, store.value(blk.w1));
            a = &a + store.value(blk.b1);
            a = silu_mat(&a);
            let mut a = matmul(&a, store.value(blk.w2));
            a = &a + store.value(blk.b2);
            h = &h + &a;
        }
        cache.len = total;
        self.affine_ln_vals(store, &h, self.lnf_g, self.lnf_b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layout_p2() -> SequenceLayout {
        SequenceLayout::new(1, 2, 4, 4).unwrap()
    }

    fn small_backbone(seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig { width: 16, depth: 2, heads: 2, d: 4, num_classes: 4, mlp_ratio: 2 };
        let bb = Backbone::init(&mut store, cfg, 15, seed).unwrap();
        (store, bb)
    }

    fn random_tokens(rng: &mut rand_chacha::ChaCha8Rng, count: usize, d: usize) -> Mat {
        let mut m = Mat::zeros((count, d));
        for v in m.iter_mut() {
            *v = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        m
    }

    fn raster_coords(layout: &SequenceLayout, count: usize) -> Vec<(usize, usize)> {
        crate::pipeline::patch_raster_coords(layout.grid_h, layout.grid_w, layout.patch_size)
            [..count]
            .to_vec()
    }

    #[test]
    fn layout_arithmetic() {
        let l = layout_p2();
        assert_eq!(l.prefix_len(), 3);
        assert_eq!(l.num_patches(), 4);
        assert_eq!(l.len(), 1 + 3 + 16);
        assert_eq!(l.block_of(0), 0);
        assert_eq!(l.block_of(3), 0);
        assert_eq!(l.block_of(4), 1);
        assert_eq!(l.block_of(19), 4);
        assert_eq!(l.cond_positions_for_patch(1), 0..4);
        assert_eq!(l.cond_positions_for_patch(2), 4..8);
        assert_eq!(l.token_positions_for_patch(4), 16..20);
    }

    #[test]
    fn layout_rejects_indivisible_patch() {
        assert!(SequenceLayout::new(1, 3, 4, 4).is_err());
    }

    #[test]
    fn mask_matches_worked_example() {
        // Two blocks of two positions: rows 0,1 see {0,1}; rows 2,3 see all.
        let m = BlockCausalMask::from_block_sizes(&[2, 2]);
        let expect = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, true],
            [true, true, true, true],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), expect[i][j], "({i},{j})");
            }
        }
        assert!(m.verify());
    }

    #[test]
    fn mask_p1_is_plain_causal() {
        let l = SequenceLayout::new(1, 1, 2, 2).unwrap();
        assert_eq!(l.prefix_len(), 0);
        let m = build_block_causal_mask(&l);
        for i in 0..m.len {
            for j in 0..m.len {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn mask_single_block_is_bidirectional() {
        let m = BlockCausalMask::from_block_sizes(&[5]);
        assert!(m.allow.iter().all(|&a| a));
    }

    #[test]
    fn mask_rule_exhaustive_small_layouts() {
        // Every standard layout with L <= 64.
        for p in 1..=4usize {
            for gh in (p..=8).step_by(p) {
                for gw in (p..=8).step_by(p) {
                    let Ok(l) = SequenceLayout::new(1, p, gh, gw) else { continue };
                    if l.len() > 64 {
                        continue;
                    }
                    let m = build_block_causal_mask(&l);
                    assert!(m.verify(), "layout p={p} {gh}x{gw}");
                    for i in 0..m.len {
                        for j in 0..m.len {
                            assert_eq!(m.allowed(i, j), l.block_of(j) <= l.block_of(i));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn row_prefixes_are_contiguous() {
        let m = build_block_causal_mask(&layout_p2());
        let his = m.row_prefixes();
        assert_eq!(his[0], 4);
        assert_eq!(his[4], 8);
        assert_eq!(his[19], 20);
    }

    #[test]
    fn embed_position_distinguishes_locations() {
        let (store, bb) = small_backbone(3);
        let layout = layout_p2();
        let mut rng = crate::rng::stream(31, 0);
        let one = random_tokens(&mut rng, 4, 4);
        let mut tokens = Mat::zeros((8, 4));
        tokens.slice_mut(ndarray::s![0..4, ..]).assign(&one);
        tokens.slice_mut(ndarray::s![4..8, ..]).assign(&one);
        let coords = raster_coords(&layout, 8);
        let mut g = Graph::new();
        let emb = bb
            .embed_sequence(&mut g, &store, &layout, Some(0), &tokens, &coords)
            .unwrap();
        let v = g.value(emb);
        // Same token content at different grid positions embeds differently.
        let first = v.row(4).to_owned();
        let second = v.row(8).to_owned();
        assert!(first != second);
    }

    #[test]
    fn embed_class_drop_uses_null_row() {
        let (store, bb) = small_backbone(3);
        let layout = layout_p2();
        let tokens = Mat::zeros((0, 4));
        let mut g = Graph::new();
        let with_class = bb.embed_sequence(&mut g, &store, &layout, Some(2), &tokens, &[]).unwrap();
        let with_null = bb.embed_sequence(&mut g, &store, &layout, None, &tokens, &[]).unwrap();
        let null_row = store.value(store.id("backbone.class_emb").unwrap()).row(4).to_owned();
        assert_eq!(g.value(with_null).row(0).to_owned(), null_row);
        assert!(g.value(with_class).row(0).to_owned() != null_row);
    }

    #[test]
    fn embed_zero_projection_leaves_positional_only() {
        let (mut store, bb) = small_backbone(3);
        let layout = layout_p2();
        let w = store.id("backbone.embed.w").unwrap();
        let b = store.id("backbone.embed.b").unwrap();
        store.value_mut(w).fill(0.0);
        store.value_mut(b).fill(0.0);
        let mut rng = crate::rng::stream(32, 0);
        let tokens = random_tokens(&mut rng, 4, 4);
        let coords = raster_coords(&layout, 4);
        let mut g = Graph::new();
        let emb = bb.embed_sequence(&mut g, &store, &layout, Some(0), &tokens, &coords).unwrap();
        let v = g.value(emb);
        let pe = positional_encoding_2d(4, 4, 16);
        for (i, &(r, c)) in coords.iter().enumerate() {
            let row = v.row(4 + i);
            let want = pe.row(r * 4 + c);
            for j in 0..16 {
                assert!((row[j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_rejects_partial_patch_and_bad_class() {
        let (store, bb) = small_backbone(3);
        let layout = layout_p2();
        let mut rng = crate::rng::stream(33, 0);
        let tokens = random_tokens(&mut rng, 3, 4);
        let coords = raster_coords(&layout, 3);
        let mut g = Graph::new();
        assert!(bb.embed_sequence(&mut g, &store, &layout, Some(0), &tokens, &coords).is_err());
        let tokens = random_tokens(&mut rng, 4, 4);
        let coords = raster_coords(&layout, 4);
        assert!(bb.embed_sequence(&mut g, &store, &layout, Some(9), &tokens, &coords).is_err());
    }

    #[test]
    fn forward_respects_mask_by_perturbation() {
        let (store, bb) = small_backbone(4);
        let layout = layout_p2();
        let mask = build_block_causal_mask(&layout);
        let prefixes = mask.row_prefixes();
        let mut rng = crate::rng::stream(34, 0);
        let tokens = random_tokens(&mut rng, 16, 4);
        let coords = raster_coords(&layout, 16);

        let run = |toks: &Mat| {
            let mut g = Graph::new();
            let emb = bb.embed_sequence(&mut g, &store, &layout, Some(1), toks, &coords).unwrap();
            let h = bb.forward(&mut g, &store, emb, &prefixes);
            g.value(h).clone()
        };
        let base = run(&tokens);
        // Perturb a token in the last patch: earlier blocks must be
        // bit-identical, block-mates must change.
        let mut pert = tokens.clone();
        pert[(12, 0)] = -pert[(12, 0)];
        let out = run(&pert);
        for pos in 0..16 {
            // positions 0..16 are blocks 0..3 (cond+prefix+3 patches)
            for j in 0..16 {
                assert_eq!(base[(pos, j)].to_bits(), out[(pos, j)].to_bits(), "pos {pos}");
            }
        }
        let mates: Vec<usize> = (16..20).collect();
        let mut changed = false;
        for &pos in &mates {
            for j in 0..16 {
                if base[(pos, j)] != out[(pos, j)] {
                    changed = true;
                }
            }
        }
        assert!(changed, "intra-patch perturbation had no effect on block mates");
    }

    #[test]
    fn forward_length_one_sequence() {
        let (store, bb) = small_backbone(5);
        let layout = SequenceLayout::new(1, 1, 1, 1).unwrap();
        let tokens = Mat::zeros((0, 4));
        let mut g = Graph::new();
        let emb = bb.embed_sequence(&mut g, &store, &layout, Some(0), &tokens, &[]).unwrap();
        let h = bb.forward(&mut g, &store, emb, &[1]);
        assert_eq!(g.value(h).dim(), (1, 16));
    }

    #[test]
    fn no_gradient_leaks_from_future_blocks() {
        // Gradient of an early-block output w.r.t. a later-block input is
        // exactly zero, for several random parameter draws.
        for seed in 0..5u64 {
            let (store, bb) = small_backbone(100 + seed);
            let layout = layout_p2();
            let mask = build_block_causal_mask(&layout);
            let prefixes = mask.row_prefixes();
            let mut rng = crate::rng::stream(40 + seed, 0);
            let tokens = random_tokens(&mut rng, 16, 4);
            let coords = raster_coords(&layout, 16);

            let mut store_probe = store;
            // Make the token inputs a parameter so we can read d(out)/d(tokens).
            let tok_param = store_probe.add("probe.tokens", tokens.clone());
            let mut g = Graph::new();
            let tok_node = g.param(&store_probe, tok_param);
            let (ew, eb) = (
                g.param(&store_probe, store_probe.id("backbone.embed.w").unwrap()),
                g.param(&store_probe, store_probe.id("backbone.embed.b").unwrap()),
            );
            let proj = g.linear(tok_node, ew, eb);
            let full_pe = positional_encoding_2d(4, 4, 16);
            let mut pe = Mat::zeros((16, 16));
            for (i, &(r, c)) in coords.iter().enumerate() {
                pe.row_mut(i).assign(&full_pe.row(r * 4 + c));
            }
            let pe = g.constant(pe);
            let tok_emb = g.add(proj, pe);
            let class_emb = g.param(&store_probe, store_probe.id("backbone.class_emb").unwrap());
            let cond = g.gather_rows(class_emb, std::rc::Rc::new(vec![0usize]));
            let bank = g.param(&store_probe, store_probe.id("backbone.prefix_emb").unwrap());
            let pfx = g.slice_rows(bank, 0, 3);
            let emb = g.concat_rows(&[cond, pfx, tok_emb]);
            let h = bb.forward(&mut g, &store_probe, emb, &prefixes);
            // Sum outputs of block 1 (positions 4..8, conditioning patch 2).
            let blk1 = g.slice_rows(h, 4, 4);
            let loss = g.sum_all(blk1);
            let grads = g.backward(loss);
            let dg = &grads.iter().find(|(p, _)| *p == tok_param).unwrap().1;
            // Token rows 4.. (patches 2..4) are in blocks later than block 1.
            for r in 4..16 {
                for c in 0..4 {
                    assert_eq!(dg[(r, c)], 0.0, "leak at token {r} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward_bitwise() {
        let (store, bb) = small_backbone(6);
        let layout = layout_p2();
        let mask = build_block_causal_mask(&layout);
        let prefixes = mask.row_prefixes();
        let mut rng = crate::rng::stream(35, 0);
        let tokens = random_tokens(&mut rng, 16, 4);
        let coords = raster_coords(&layout, 16);

        let mut g = Graph::new();
        let emb = bb.embed_sequence(&mut g, &store, &layout, Some(2), &tokens, &coords).unwrap();
        let full = bb.forward(&mut g, &store, emb, &prefixes);
        let full = g.value(full).clone();
        let emb_vals = {
            let mut g2 = Graph::new();
            let e = bb.embed_sequence(&mut g2, &store, &layout, Some(2), &tokens, &coords).unwrap();
            g2.value(e).clone()
        };

        let mut cache = DecodeCache::new(2, 16);
        let mut at = 0;
        for size in layout.block_sizes() {
            let block = emb_vals.slice(ndarray::s![at..at + size, ..]).to_owned();
            let out = bb.incremental_forward(&store, &mut cache, &block);
            for i in 0..size {
                for j in 0..16 {
                    assert_eq!(
                        out[(i, j)].to_bits(),
                        full[(at + i, j)].to_bits(),
                        "row {} col {j}",
                        at + i
                    );
                }
            }
            at += size;
        }
        assert_eq!(cache.len(), layout.len());
    }

    #[test]
    fn cache_grows_by_block_size_per_step() {
        let (store, bb) = small_backbone(7);
        let mut cache = DecodeCache::new(2, 16);
        let block = Mat::zeros((4, 16));
        bb.incremental_forward(&store, &mut cache, &block);
        assert_eq!(cache.len(), 4);
        bb.incremental_forward(&store, &mut cache, &block);
        assert_eq!(cache.len(), 8);
    }

    #[test]
    fn backbone_forward_gradients_match_fd() {
        let (mut store, bb) = small_backbone(8);
        let layout = layout_p2();
        let mask = build_block_causal_mask(&layout);
        let prefixes = mask.row_prefixes();
        let mut rng = crate::rng::stream(36, 0);
        let tokens = random_tokens(&mut rng, 16, 4);
        let coords = raster_coords(&layout, 16);
        // Random probe direction keeps the scalar sensitive to all outputs.
        let probe = crate::nn::randn_mat(&mut rng, 20, 16, 1.0);
        let params: Vec<_> = ["backbone.block0.attn.wq", "backbone.block1.mlp.w1", "backbone.embed.w", "backbone.class_emb", "backbone.prefix_emb", "backbone.block0.ln1.g", "backbone.lnf.b"]
            .iter()
            .map(|n| store.id(n).unwrap())
            .collect();
        let report = crate::gradcheck::check_param_grads(
            &mut store,
            &params,
            |g, s| {
                let emb = bb.embed_sequence(g, s, &layout, Some(1), &tokens, &coords).unwrap();
                let h = bb.forward(g, s, emb, &prefixes);
                let p = g.constant(probe.clone());
                let prod = g.mul(h, p);
                g.sum_all(prod)
            },
            crate::gradcheck::GradCheck { max_coords_per_param: 10, ..Default::default() },
        );
        assert!(report.max_rel_err <= 1e-4, "rel err {:?}", report.worst);
    }
}
