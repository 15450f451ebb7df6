//! End-to-end orchestration: patch-raster ordering, teacher-forced AR
//! training over all patches, patch-by-patch generation with classifier-free
//! guidance, EMA bookkeeping, and patch-size escalation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_block_causal_mask, Backbone, BackboneConfig, DecodeCache, SequenceLayout};
use crate::binq::TokenGrid;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowhead::{flow_loss_node, FlowSample, Head, HeadConfig};
use crate::graph::Graph;
use crate::nn::{AdamW, Ema, ParamStore};
use crate::rng::role_seed;
use crate::tensor::Mat;
use crate::toktrain::{tokenizer_train_step, SyntheticDatasetSpec, Tokenizer};

// ---------------------------------------------------------------------------
// Patch-raster ordering
// ---------------------------------------------------------------------------

/// Grid layout of one image's tokens for next-patch prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchLayout {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchLayout {
    pub fn new(patch_size: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if patch_size == 0 || grid_h % patch_size != 0 || grid_w % patch_size != 0 {
            return Err(Error::InvalidInput(format!(
                "patch size {patch_size} does not divide grid {grid_h}x{grid_w}"
            )));
        }
        Ok(PatchLayout { patch_size, grid_h, grid_w })
    }

    pub fn num_patches(&self) -> usize {
        (self.grid_h / self.patch_size) * (self.grid_w / self.patch_size)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn tokens_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn sequence(&self, cond_len: usize) -> SequenceLayout {
        SequenceLayout::new(cond_len, self.patch_size, self.grid_h, self.grid_w)
            .expect("validated by PatchLayout::new")
    }
}

/// Grid coordinates in patch-wise raster order: patches left-to-right,
/// top-to-bottom; rows then columns within each patch.
pub fn patch_raster_coords(grid_h: usize, grid_w: usize, p: usize) -> Vec<(usize, usize)> {
    let mut coords = Vec::with_capacity(grid_h * grid_w);
    for pr in 0..grid_h / p {
        for pc in 0..grid_w / p {
            for r in 0..p {
                for c in 0..p {
                    coords.push((pr * p + r, pc * p + c));
                }
            }
        }
    }
    coords
}

/// Reorder a token grid into the `[num_tokens, d]` patch-raster matrix.
pub fn flatten_patch_raster(grid: &TokenGrid, p: usize) -> Result<Mat> {
    let layout = PatchLayout::new(p, grid.height, grid.width)?;
    let coords = patch_raster_coords(layout.grid_h, layout.grid_w, p);
    let mut m = Mat::zeros((grid.num_tokens(), grid.d));
    for (i, &(r, c)) in coords.iter().enumerate() {
        let tok = grid.token(r, c);
        for (j, &b) in tok.iter().enumerate() {
            m[(i, j)] = b;
        }
    }
    Ok(m)
}

/// Inverse of [`flatten_patch_raster`].
pub fn unflatten_patch_raster(seq: &Mat, grid_h: usize, grid_w: usize, p: usize) -> Result<TokenGrid> {
    let layout = PatchLayout::new(p, grid_h, grid_w)?;
    let (rows, d) = seq.dim();
    if rows != layout.num_tokens() {
        return Err(Error::InvalidInput(format!(
            "sequence rows {rows} != token count {}",
            layout.num_tokens()
        )));
    }
    let coords = patch_raster_coords(grid_h, grid_w, p);
    let mut bits = vec![0.0; rows * d];
    for (i, &(r, c)) in coords.iter().enumerate() {
        for j in 0..d {
            bits[(r * grid_w + c) * d + j] = seq[(i, j)];
        }
    }
    TokenGrid::new(grid_h, grid_w, d, bits)
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// The autoregressive generator: backbone + flow head over a patch layout.
pub struct ArModel {
    pub backbone: Backbone,
    pub head: Head,
    pub patch: PatchLayout,
}

impl ArModel {
    pub fn layout(&self) -> SequenceLayout {
        self.patch.sequence(1)
    }

    /// Initialize all parameters for the given run configuration.
    pub fn init(store: &mut ParamStore, cfg: &RunConfig) -> Result<ArModel> {
        let patch = PatchLayout::new(cfg.patch_size, cfg.grid_len(), cfg.grid_len())?;
        let bb_cfg = BackboneConfig {
            width: cfg.backbone_width,
            depth: cfg.backbone_depth,
            heads: cfg.backbone_heads,
            d: cfg.d,
            num_classes: cfg.num_classes,
            mlp_ratio: cfg.backbone_mlp_ratio,
        };
        // Prefix capacity covers the initial patch size; escalation extends it.
        let backbone = Backbone::init(store, bb_cfg, patch.tokens_per_patch() - 1, cfg.seed)?;
        let head_cfg = HeadConfig {
            d: cfg.d,
            n: patch.tokens_per_patch(),
            cond_width: cfg.backbone_width,
            depth: cfg.head_depth,
            head_width: cfg.head_width,
            heads: cfg.head_heads,
            num_steps: cfg.num_steps,
            cfg_scale: cfg.cfg_scale,
            delta_clamp: cfg.delta_clamp,
        };
        let head = Head::init(store, head_cfg, cfg.seed)?;
        Ok(ArModel { backbone, head, patch })
    }

    /// Rebuild handles from checkpointed parameters.
    pub fn from_store(store: &ParamStore, cfg: &RunConfig) -> Result<ArModel> {
        let patch = PatchLayout::new(cfg.patch_size, cfg.grid_len(), cfg.grid_len())?;
        let bb_cfg = BackboneConfig {
            width: cfg.backbone_width,
            depth: cfg.backbone_depth,
            heads: cfg.backbone_heads,
            d: cfg.d,
            num_classes: cfg.num_classes,
            mlp_ratio: cfg.backbone_mlp_ratio,
        };
        let backbone = Backbone::from_store(store, bb_cfg)?;
        let head_cfg = HeadConfig {
            d: cfg.d,
            n: patch.tokens_per_patch(),
            cond_width: cfg.backbone_width,
            depth: cfg.head_depth,
            head_width: cfg.head_width,
            heads: cfg.head_heads,
            num_steps: cfg.num_steps,
            cfg_scale: cfg.cfg_scale,
            delta_clamp: cfg.delta_clamp,
        };
        let head = Head::from_store(store, head_cfg)?;
        Ok(ArModel { backbone, head, patch })
    }
}

// ---------------------------------------------------------------------------
// Teacher-forced training
// ---------------------------------------------------------------------------

/// The stochastic draws of one AR training step, in a fixed order so training
/// is resumable and comparable across code paths: per-sample condition
/// dropout, then one t per (sample, patch), then the noise tensor.
pub struct ArStepDraws {
    pub dropped: Vec<bool>,
    pub sample: FlowSample,
}

pub fn draw_ar_step(
    model: &ArModel,
    grids: &[TokenGrid],
    drop_prob: f64,
    delta_clamp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ArStepDraws> {
    let p = model.patch.patch_size;
    let mut targets = Vec::with_capacity(grids.len());
    for grid in grids {
        if (grid.height, grid.width) != (model.patch.grid_h, model.patch.grid_w) {
            return Err(Error::InvalidInput(format!(
                "grid {}x{} does not match layout {}x{}",
                grid.height, grid.width, model.patch.grid_h, model.patch.grid_w
            )));
        }
        targets.push(flatten_patch_raster(grid, p)?);
    }
    draw_ar_step_mats(model, &targets, drop_prob, delta_clamp, rng)
}

/// As [`draw_ar_step`] over already-flattened `[num_tokens, d]` target
/// matrices (the continuous ablation passes unquantized latents here).
pub fn draw_ar_step_mats(
    model: &ArModel,
    targets: &[Mat],
    drop_prob: f64,
    delta_clamp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ArStepDraws> {
    let n = model.patch.tokens_per_patch();
    let m = model.patch.num_patches();
    for t in targets {
        if t.dim() != (model.patch.num_tokens(), model.backbone.cfg.d) {
            return Err(Error::InvalidInput(format!(
                "target matrix {:?} does not match layout ({}, {})",
                t.dim(),
                model.patch.num_tokens(),
                model.backbone.cfg.d
            )));
        }
    }
    let x = ndarray::concatenate(
        ndarray::Axis(0),
        &targets.iter().map(|t| t.view()).collect::<Vec<_>>(),
    )
    .unwrap();

    let dropped: Vec<bool> = (0..targets.len()).map(|_| rng.gen::<f64>() < drop_prob).collect();
    let t: Vec<f64> =
        (0..targets.len() * m).map(|_| rng.gen_range(0.0..1.0 - delta_clamp)).collect();
    let mut eps = Mat::zeros(x.dim());
    for v in eps.iter_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    Ok(ArStepDraws { dropped, sample: FlowSample::from_parts(x, eps, t, n) })
}

/// Build the teacher-forced loss graph for one batch.
///
/// Per sample: embed `[cond, prefix, all patches]`, run the block-causal
/// forward, and gather Z for patch m from the hidden states of block m-1.
/// All `(sample, patch)` groups are stacked and fed to the head jointly; the
/// loss is the mean over every velocity component.
pub fn ar_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    model: &ArModel,
    grids: &[TokenGrid],
    labels: &[Option<usize>],
    draws: &ArStepDraws,
) -> Result<crate::graph::NodeId> {
    let mut targets = Vec::with_capacity(grids.len());
    for grid in grids {
        targets.push(flatten_patch_raster(grid, model.patch.patch_size)?);
    }
    ar_loss_graph_mats(g, store, model, &targets, labels, draws)
}

/// Loss graph over already-flattened target matrices.
pub fn ar_loss_graph_mats(
    g: &mut Graph,
    store: &ParamStore,
    model: &ArModel,
    targets: &[Mat],
    labels: &[Option<usize>],
    draws: &ArStepDraws,
) -> Result<crate::graph::NodeId> {
    let layout = model.layout();
    let mask = build_block_causal_mask(&layout);
    let prefixes = mask.row_prefixes();
    let coords = patch_raster_coords(layout.grid_h, layout.grid_w, layout.patch_size);
    let m = layout.num_patches();
    let n = layout.tokens_per_patch();

    let mut z_parts = Vec::with_capacity(targets.len() * m);
    for (b, tokens) in targets.iter().enumerate() {
        let cond = if draws.dropped[b] { None } else { labels[b] };
        let emb = model.backbone.embed_sequence(g, store, &layout, cond, tokens, &coords)?;
        let h = model.backbone.forward(g, store, emb, &prefixes);
        for patch_m in 1..=m {
            let range = layout.cond_positions_for_patch(patch_m);
            z_parts.push(g.slice_rows(h, range.start, range.len()));
        }
    }
    let z = g.concat_rows(&z_parts);
    debug_assert_eq!(g.value(z).dim().0, targets.len() * m * n);
    Ok(flow_loss_node(g, store, &model.head, &draws.sample, z, false))
}

/// Mutable training state: optimizer moments, EMA shadow, step counter, and
/// the training RNG. Checkpoints capture all of it.
pub struct TrainerState {
    pub step: u64,
    pub opt: AdamW,
    pub ema: Ema,
    pub rng: ChaCha8Rng,
    pub rng_seed: u64,
}

impl TrainerState {
    pub fn new(store: &ParamStore, cfg: &RunConfig) -> TrainerState {
        let rng_seed = role_seed(cfg.seed, "ar-train");
        TrainerState {
            step: 0,
            opt: AdamW::new(store, cfg.ar_lr, cfg.weight_decay, cfg.grad_clip, cfg.warmup_steps),
            ema: Ema::new(store, cfg.ema_decay),
            rng: crate::rng::stream(rng_seed, 0),
            rng_seed,
        }
    }
}

/// One teacher-forced AR step: draws, loss, backward, AdamW, EMA.
pub fn ar_train_step(
    model: &ArModel,
    store: &mut ParamStore,
    state: &mut TrainerState,
    grids: &[TokenGrid],
    labels: &[Option<usize>],
    drop_prob: f64,
) -> Result<f64> {
    let draws =
        draw_ar_step(model, grids, drop_prob, model.head.cfg.delta_clamp, &mut state.rng)?;
    let mut g = Graph::new();
    let loss = ar_loss_graph(&mut g, store, model, grids, labels, &draws)?;
    let loss_val = g.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::TrainingDiverged { step: state.step, detail: format!("loss={loss_val}") });
    }
    let grads = g.backward(loss);
    state.opt.step(store, &grads);
    state.ema.update(store);
    state.step += 1;
    Ok(loss_val)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// A reproducible generation request.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationRequest {
    /// Class label, or None for unconditional.
    pub class: Option<usize>,
    pub patch: PatchLayout,
    /// Euler steps per patch.
    pub num_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

/// Counters from one generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenStats {
    /// Sequential AR steps executed (one head sampling per step).
    pub ar_steps: usize,
}

/// Patch-by-patch generation: exactly `M = N_tokens / p^2` AR steps, each
/// sampling `p^2` tokens jointly, guided against the learned null condition
/// when `cfg_scale > 0`. Pure function of `(params, request)`.
pub fn generate(model: &ArModel, store: &ParamStore, req: &GenerationRequest) -> Result<(TokenGrid, GenStats)> {
    let (seq, stats) = generate_seq(model, store, req, true)?;
    let layout = model.layout();
    let grid = unflatten_patch_raster(&seq, layout.grid_h, layout.grid_w, layout.patch_size)?;
    Ok((grid, stats))
}

/// Generation returning the raw patch-raster sequence; with
/// `binarize = false` the per-token Euler endpoints are left continuous
/// (ablation path).
pub fn generate_seq(
    model: &ArModel,
    store: &ParamStore,
    req: &GenerationRequest,
    binarize: bool,
) -> Result<(Mat, GenStats)> {
    if req.patch != model.patch {
        return Err(Error::InvalidInput("request layout differs from model layout".into()));
    }
    if let Some(c) = req.class {
        if c >= model.backbone.cfg.num_classes {
            return Err(Error::InvalidInput(format!(
                "class {c} out of range 0..{}",
                model.backbone.cfg.num_classes
            )));
        }
    }
    if req.num_steps == 0 {
        return Err(Error::InvalidInput("num_steps must be >= 1".into()));
    }
    let layout = model.layout();
    let coords = patch_raster_coords(layout.grid_h, layout.grid_w, layout.patch_size);
    let n = layout.tokens_per_patch();
    let m = layout.num_patches();
    let d = model.backbone.cfg.d;
    let use_cfg = req.cfg_scale > 0.0;
    let mut rng = crate::rng::stream(role_seed(req.seed, "generate"), 0);

    let mut cache_c = DecodeCache::new(model.backbone.cfg.depth, model.backbone.cfg.width);
    let mut cache_u = DecodeCache::new(model.backbone.cfg.depth, model.backbone.cfg.width);
    let block0_c = model.backbone.embed_cond_prefix_vals(store, &layout, req.class);
    let mut z_c = model.backbone.incremental_forward(store, &mut cache_c, &block0_c);
    let mut z_u = if use_cfg {
        let block0_u = model.backbone.embed_cond_prefix_vals(store, &layout, None);
        Some(model.backbone.incremental_forward(store, &mut cache_u, &block0_u))
    } else {
        None
    };

    let mut seq = Mat::zeros((0, d));
    let mut steps = 0usize;
    for patch_m in 1..=m {
        let tokens = if binarize {
            model.head.sample_groups(store, &z_c, z_u.as_ref(), req.cfg_scale, req.num_steps, &mut rng)
        } else {
            model
                .head
                .sample_groups_raw(store, &z_c, z_u.as_ref(), req.cfg_scale, req.num_steps, &mut rng)
        };
        steps += 1;
        seq = ndarray::concatenate(ndarray::Axis(0), &[seq.view(), tokens.view()]).unwrap();
        if patch_m == m {
            break;
        }
        let patch_coords = &coords[(patch_m - 1) * n..patch_m * n];
        let emb = model.backbone.embed_tokens_vals(store, &layout, &tokens, patch_coords);
        z_c = model.backbone.incremental_forward(store, &mut cache_c, &emb);
        if use_cfg {
            z_u = Some(model.backbone.incremental_forward(store, &mut cache_u, &emb));
        }
    }
    Ok((seq, GenStats { ar_steps: steps }))
}

// ---------------------------------------------------------------------------
// Direct next-token reference path
// ---------------------------------------------------------------------------

/// Straightforward next-token loss, written without the patch machinery:
/// plain raster order, a causal mask built directly from `j <= i`, no prefix
/// tokens, and per-token conditioning on the previous position's hidden
/// state. With `p = 1` the patch pipeline must match this exactly.
pub fn next_token_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    model: &ArModel,
    grids: &[TokenGrid],
    labels: &[Option<usize>],
    draws: &ArStepDraws,
) -> Result<crate::graph::NodeId> {
    let layout = model.layout();
    assert_eq!(layout.patch_size, 1, "reference path is next-token only");
    let n_tokens = layout.num_tokens();
    // Plain raster coordinates and a directly-built causal mask.
    let mut coords = Vec::new();
    for r in 0..layout.grid_h {
        for c in 0..layout.grid_w {
            coords.push((r, c));
        }
    }
    let row_prefixes: Vec<usize> = (0..=n_tokens).map(|i| i + 1).collect();

    let mut z_parts = Vec::with_capacity(grids.len() * n_tokens);
    for (b, grid) in grids.iter().enumerate() {
        let tokens = grid.to_mat();
        let cond = if draws.dropped[b] { None } else { labels[b] };
        let emb = model.backbone.embed_sequence(g, store, &layout, cond, &tokens, &coords)?;
        let h = model.backbone.forward(g, store, emb, &row_prefixes);
        for i in 0..n_tokens {
            z_parts.push(g.slice_rows(h, i, 1));
        }
    }
    let z = g.concat_rows(&z_parts);
    Ok(flow_loss_node(g, store, &model.head, &draws.sample, z, false))
}

/// Token-by-token generation through the same parameters; the p=1 pipeline
/// must reproduce its sampling trace bit for bit.
pub fn next_token_generate(
    model: &ArModel,
    store: &ParamStore,
    req: &GenerationRequest,
) -> Result<(TokenGrid, GenStats)> {
    let layout = model.layout();
    assert_eq!(layout.patch_size, 1, "reference path is next-token only");
    let n_tokens = layout.num_tokens();
    let d = model.backbone.cfg.d;
    let use_cfg = req.cfg_scale > 0.0;
    let mut rng = crate::rng::stream(role_seed(req.seed, "generate"), 0);

    let mut cache_c = DecodeCache::new(model.backbone.cfg.depth, model.backbone.cfg.width);
    let mut cache_u = DecodeCache::new(model.backbone.cfg.depth, model.backbone.cfg.width);
    let mut z_c = model
        .backbone
        .incremental_forward(store, &mut cache_c, &model.backbone.embed_cond_prefix_vals(store, &layout, req.class));
    let mut z_u = if use_cfg {
        Some(model.backbone.incremental_forward(
            store,
            &mut cache_u,
            &model.backbone.embed_cond_prefix_vals(store, &layout, None),
        ))
    } else {
        None
    };

    let mut seq = Mat::zeros((0, d));
    let mut steps = 0;
    for i in 0..n_tokens {
        let tok =
            model.head.sample_groups(store, &z_c, z_u.as_ref(), req.cfg_scale, req.num_steps, &mut rng);
        steps += 1;
        seq = ndarray::concatenate(ndarray::Axis(0), &[seq.view(), tok.view()]).unwrap();
        if i + 1 == n_tokens {
            break;
        }
        let coord = [(i / layout.grid_w, i % layout.grid_w)];
        let emb = model.backbone.embed_tokens_vals(store, &layout, &tok, &coord);
        z_c = model.backbone.incremental_forward(store, &mut cache_c, &emb);
        if use_cfg {
            z_u = Some(model.backbone.incremental_forward(store, &mut cache_u, &emb));
        }
    }
    let grid = unflatten_patch_raster(&seq, layout.grid_h, layout.grid_w, 1)?;
    Ok((grid, GenStats { ar_steps: steps }))
}

// ---------------------------------------------------------------------------
// Patch-size escalation
// ---------------------------------------------------------------------------

/// Reconfigure a trained model from patch size p to 2p.
///
/// Backbone weights are inherited; the prefix bank grows from `p^2-1` to
/// `(2p)^2-1` rows, new rows initialized to the mean of the existing ones
/// plus small noise. The head has no n-dependent parameters, so only its
/// descriptor changes. Returns the parameter-count delta.
pub fn escalate_patch_size(
    model: &ArModel,
    store: &mut ParamStore,
    seed: u64,
) -> Result<(ArModel, u64)> {
    let p = model.patch.patch_size;
    let target = 2 * p;
    let patch = PatchLayout::new(target, model.patch.grid_h, model.patch.grid_w).map_err(|_| {
        Error::InvalidInput(format!(
            "escalation: patch size {target} does not divide grid {}x{}",
            model.patch.grid_h, model.patch.grid_w
        ))
    })?;
    let before = store.num_scalars();
    let width = model.backbone.cfg.width;
    let old_len = p * p - 1;
    let new_len = target * target - 1;
    let bank_id = model.backbone.prefix_param();
    let old_bank = store.value(bank_id).clone();
    assert!(old_bank.dim().0 >= old_len);

    let mut mean = Mat::zeros((1, width));
    if old_len > 0 {
        for i in 0..old_len {
            for j in 0..width {
                mean[(0, j)] += old_bank[(i, j)] / old_len as f64;
            }
        }
    }
    let mut rng = crate::rng::stream(role_seed(seed, "escalate"), 0);
    let mut new_bank = Mat::zeros((new_len, width));
    for i in 0..new_len {
        for j in 0..width {
            new_bank[(i, j)] = if i < old_len {
                old_bank[(i, j)]
            } else {
                mean[(0, j)] + 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            };
        }
    }
    store.replace(bank_id, new_bank);
    let after = store.num_scalars();

    let backbone = Backbone::from_store(store, model.backbone.cfg)?;
    let head = Head::from_store(store, model.head.cfg.with_n(patch.tokens_per_patch()))?;
    Ok((ArModel { backbone, head, patch }, after - before))
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// Per-step record emitted by the training loops.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub event: &'static str,
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Train the tokenizer for `cfg.tok_steps` steps on the synthetic dataset.
pub fn train_tokenizer_loop(
    store: &mut ParamStore,
    tok: &Tokenizer,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()> {
    let spec = cfg.dataset_spec();
    let mut opt = AdamW::new(store, cfg.tok_lr, 0.0, cfg.grad_clip, cfg.warmup_steps.min(cfg.tok_steps / 10));
    for step in 0..cfg.tok_steps {
        let t0 = std::time::Instant::now();
        let batch: Vec<_> =
            (0..cfg.tok_batch).map(|i| spec.sample(step * cfg.tok_batch as u64 + i as u64).0).collect();
        let lr = opt.lr_at(opt.step_count());
        let report = tokenizer_train_step(tok, store, &mut opt, &batch, step)?;
        on_step(&StepRecord {
            event: "tokenizer_step",
            step,
            loss: report.total,
            recon: Some(report.recon),
            entropy: Some(report.entropy),
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

/// Encode a batch of dataset samples with the frozen tokenizer.
pub fn encode_batch(
    tok: &Tokenizer,
    store: &ParamStore,
    spec: &SyntheticDatasetSpec,
    first_idx: u64,
    count: usize,
) -> Result<(Vec<TokenGrid>, Vec<Option<usize>>)> {
    let mut grids = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (img, label) = spec.sample(first_idx + i as u64);
        grids.push(tok.encode_quantized(store, &img)?);
        labels.push(Some(label));
    }
    Ok((grids, labels))
}

/// Teacher-forced AR training for `cfg.ar_steps` steps against a frozen
/// tokenizer. Resumes from `state.step` when continuing a checkpoint.
pub fn train_ar_loop(
    store: &mut ParamStore,
    model: &ArModel,
    tok: &Tokenizer,
    cfg: &RunConfig,
    state: &mut TrainerState,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<()> {
    let spec = cfg.dataset_spec();
    while state.step < cfg.ar_steps {
        let t0 = std::time::Instant::now();
        let first = state.step * cfg.ar_batch as u64;
        let (grids, labels) = encode_batch(tok, store, &spec, first, cfg.ar_batch)?;
        let lr = state.opt.lr_at(state.opt.step_count());
        let loss = ar_train_step(model, store, state, &grids, &labels, cfg.cond_drop_prob)?;
        on_step(&StepRecord {
            event: "ar_step",
            step: state.step - 1,
            loss,
            recon: None,
            entropy: None,
            lr,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.image_size = 16;
        cfg.downsample = 4;
        cfg.d = 6;
        cfg.groups = 2;
        cfg.patch_size = 2;
        cfg.tok_hidden = 16;
        cfg.backbone_width = 16;
        cfg.backbone_depth = 2;
        cfg.backbone_heads = 2;
        cfg.backbone_mlp_ratio = 2;
        cfg.head_width = 16;
        cfg.head_depth = 2;
        cfg.head_heads = 2;
        cfg.num_steps = 4;
        cfg.cfg_scale = 0.0;
        cfg.seed = 11;
        cfg
    }

    fn random_grid(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, d: usize) -> TokenGrid {
        let bits: Vec<f64> =
            (0..h * w * d).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        TokenGrid::new(h, w, d, bits).unwrap()
    }

    #[test]
    fn patch_raster_matches_worked_example() {
        let coords = patch_raster_coords(4, 4, 2);
        let expect = [
            (0, 0), (0, 1), (1, 0), (1, 1),
            (0, 2), (0, 3), (1, 2), (1, 3),
            (2, 0), (2, 1), (3, 0), (3, 1),
            (2, 2), (2, 3), (3, 2), (3, 3),
        ];
        assert_eq!(coords, expect);
    }

    #[test]
    fn patch_raster_p1_is_plain_raster() {
        let coords = patch_raster_coords(2, 3, 1);
        assert_eq!(coords, [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut rng = crate::rng::stream(70, 0);
        for p in [1usize, 2, 4] {
            let grid = random_grid(&mut rng, 4, 4, 5);
            let seq = flatten_patch_raster(&grid, p).unwrap();
            let back = unflatten_patch_raster(&seq, 4, 4, p).unwrap();
            assert_eq!(grid, back, "p={p}");
        }
    }

    #[test]
    fn flatten_rejects_indivisible() {
        let mut rng = crate::rng::stream(71, 0);
        let grid = random_grid(&mut rng, 4, 4, 5);
        assert!(flatten_patch_raster(&grid, 3).is_err());
    }

    #[test]
    fn ar_step_draws_satisfy_velocity_identity() {
        // The step's own interpolation obeys v_t = (x - x_t)/(1-t) exactly,
        // so an oracle head returning x would achieve zero loss.
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let mut rng = crate::rng::stream(72, 0);
        let grids: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 4, 4, 6)).collect();
        let draws = draw_ar_step(&model, &grids, 0.1, 1e-3, &mut rng).unwrap();
        let s = &draws.sample;
        let v = crate::flowhead::velocity_from_x_pred(&s.x, &s.x_t, &s.t, s.n, 1e-12);
        let err: f64 =
            v.iter().zip(s.v_t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64;
        assert!(err < 1e-18, "oracle loss {err}");
    }

    #[test]
    fn ar_train_step_reduces_loss_and_updates_ema() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let mut state = TrainerState::new(&store, &cfg);
        let mut rng = crate::rng::stream(73, 0);
        let grids: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 4, 4, 6)).collect();
        let labels = vec![Some(0), Some(1)];
        let first = ar_train_step(&model, &mut store, &mut state, &grids, &labels, 0.1).unwrap();
        assert!(first.is_finite());
        assert_eq!(state.step, 1);
        // At adaLN-zero init only the head's output projection receives
        // gradient on step one; its EMA shadow must lag the raw value.
        let out_w = store.id("flowhead.out.w").unwrap();
        assert!(state.ema.shadow(out_w) != store.value(out_w));
        let before = store.value(out_w).clone();
        ar_train_step(&model, &mut store, &mut state, &grids, &labels, 0.1).unwrap();
        assert!(*store.value(out_w) != before, "head output projection should keep moving");
    }

    #[test]
    fn generate_step_count_law() {
        // 16x16 grid: 64 AR steps at p=2 and 16 at p=4.
        for (p, expect) in [(2usize, 64usize), (4, 16)] {
            let mut cfg = tiny_cfg();
            cfg.image_size = 64;
            cfg.patch_size = p;
            let mut store = ParamStore::new();
            let model = ArModel::init(&mut store, &cfg).unwrap();
            let req = GenerationRequest {
                class: Some(0),
                patch: model.patch,
                num_steps: 1,
                cfg_scale: 0.0,
                seed: 1,
            };
            let (grid, stats) = generate(&model, &store, &req).unwrap();
            assert_eq!(stats.ar_steps, expect, "p={p}");
            assert_eq!((grid.height, grid.width), (16, 16));
            assert!(grid.bits.iter().all(|&b| b == 1.0 || b == -1.0));
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let req = GenerationRequest {
            class: Some(2),
            patch: model.patch,
            num_steps: 3,
            cfg_scale: 1.5,
            seed: 42,
        };
        let (a, _) = generate(&model, &store, &req).unwrap();
        let (b, _) = generate(&model, &store, &req).unwrap();
        assert_eq!(a, b);
        let req2 = GenerationRequest { seed: 43, ..req };
        let (c, _) = generate(&model, &store, &req2).unwrap();
        assert_ne!(a, c, "different seeds should differ");
    }

    #[test]
    fn generate_rejects_bad_class() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let req = GenerationRequest {
            class: Some(99),
            patch: model.patch,
            num_steps: 1,
            cfg_scale: 0.0,
            seed: 1,
        };
        assert!(generate(&model, &store, &req).is_err());
    }

    #[test]
    fn p1_pipeline_matches_next_token_reference_exactly() {
        let mut cfg = tiny_cfg();
        cfg.patch_size = 1;
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let mut rng = crate::rng::stream(74, 0);
        let grids: Vec<_> = (0..2).map(|_| random_grid(&mut rng, 4, 4, 6)).collect();
        let labels = vec![Some(1), Some(3)];
        let draws = draw_ar_step(&model, &grids, 0.1, 1e-3, &mut rng).unwrap();

        let mut g1 = Graph::new();
        let l1 = ar_loss_graph(&mut g1, &store, &model, &grids, &labels, &draws).unwrap();
        let mut g2 = Graph::new();
        let l2 = next_token_loss_graph(&mut g2, &store, &model, &grids, &labels, &draws).unwrap();
        assert_eq!(g1.scalar(l1).to_bits(), g2.scalar(l2).to_bits(), "losses must be exact equal");

        let req = GenerationRequest {
            class: Some(0),
            patch: model.patch,
            num_steps: 2,
            cfg_scale: 2.0,
            seed: 7,
        };
        let (ga, sa) = generate(&model, &store, &req).unwrap();
        let (gb, sb) = next_token_generate(&model, &store, &req).unwrap();
        assert_eq!(sa.ar_steps, 16);
        assert_eq!(sb.ar_steps, 16);
        assert_eq!(ga, gb, "sampling traces must match bit for bit");
    }

    #[test]
    fn escalation_extends_prefix_bank_only() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        let before = store.num_scalars();
        let (model4, delta) = escalate_patch_size(&model, &mut store, 9).unwrap();
        let expect_delta = ((16 - 1) - (4 - 1)) as u64 * cfg.backbone_width as u64;
        assert_eq!(delta, expect_delta);
        assert_eq!(store.num_scalars(), before + expect_delta);
        assert_eq!(model4.patch.patch_size, 4);
        assert_eq!(model4.head.cfg.n, 16);
        // Step count drops 4x.
        let req = |patch| GenerationRequest { class: Some(0), patch, num_steps: 1, cfg_scale: 0.0, seed: 3 };
        let (_, s2) = generate(&model4, &store, &req(model4.patch)).unwrap();
        assert_eq!(s2.ar_steps, model.patch.num_patches() / 4);
    }

    #[test]
    fn escalation_rejects_oversized_patch() {
        let mut cfg = tiny_cfg();
        cfg.image_size = 8; // 2x2 grid at f=4
        let mut store = ParamStore::new();
        let model = ArModel::init(&mut store, &cfg).unwrap();
        assert!(escalate_patch_size(&model, &mut store, 9).is_err());
    }
}
