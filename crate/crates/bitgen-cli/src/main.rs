//! Command-line surface for the bitgen stack.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bitgen::checkpoint::{check_compat, Checkpoint};
use bitgen::config::RunConfig;
use bitgen::error::Error;
use bitgen::evalx;
use bitgen::flowhead::output_histogram;
use bitgen::metrics::MetricWriter;
use bitgen::pipeline::{
    self, generate, ArModel, GenerationRequest, PatchLayout, TrainerState,
};
use bitgen::toktrain::Tokenizer;

#[derive(Parser)]
#[command(name = "bitgen", version, about = "Autoregressive image generation with binary latent tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set seed=9 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> bitgen::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

/// Output directory: --out wins, then BITGEN_OUT_DIR, then ./out.
fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("BITGEN_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Subcommand)]
enum Command {
    /// Train the binary tokenizer on the synthetic dataset.
    TrainTokenizer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the next-patch AR model against a frozen tokenizer.
    TrainAr {
        #[command(flatten)]
        config: ConfigArgs,
        /// Tokenizer checkpoint produced by train-tokenizer.
        #[arg(long)]
        tokenizer: PathBuf,
        /// Resume from a previous AR checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images and packed latent grids from an AR checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class label (omit for unconditional sampling).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Euler steps per patch (defaults to the checkpoint config).
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale (defaults to the checkpoint config).
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Sampling weights: raw (trained) or ema.
        #[arg(long, default_value = "raw")]
        weights: String,
        /// Also write PNG copies next to the PPM outputs.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Head experiments: the joint-vs-factorized comparison or the
    /// continuous-target ablation.
    EvalHead {
        /// Experiment: "xor" or "ablation".
        #[arg(long, default_value = "xor")]
        experiment: String,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 2500)]
        train_steps: u64,
        #[arg(long, default_value_t = 10_000)]
        eval_samples: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Output-distribution histograms of the trained head across timesteps.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Timesteps to probe (repeatable).
        #[arg(long = "t", value_name = "T")]
        t_values: Vec<f64>,
        /// Teacher-forced conditioning pairs to draw.
        #[arg(long, default_value_t = 16)]
        pairs: usize,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long, default_value = "raw")]
        weights: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Oracle accuracy across Euler step counts.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated step counts, e.g. 1,2,5,10,50.
        #[arg(long, default_value = "1,2,5,10,50")]
        steps: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long, default_value = "raw")]
        weights: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Informational step-count and throughput report.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Time one generation per patch size (requires only random weights).
        #[arg(long)]
        time: bool,
    },
    /// Print the header of a packed latent file.
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> bitgen::Result<()> {
    match cli.command {
        Command::TrainTokenizer { config, out } => cmd_train_tokenizer(&config, &out_dir(&out)),
        Command::TrainAr { config, tokenizer, resume, out } => {
            cmd_train_ar(&config, &tokenizer, resume.as_deref(), &out_dir(&out))
        }
        Command::Sample { checkpoint, class, count, steps, cfg_scale, seed, weights, png, out } => {
            cmd_sample(&checkpoint, class, count, steps, cfg_scale, seed, &weights, png, &out_dir(&out))
        }
        Command::EvalHead { experiment, d, train_steps, eval_samples, seed, out } => {
            cmd_eval_head(&experiment, d, train_steps, eval_samples, seed, &out_dir(&out))
        }
        Command::Hist { checkpoint, t_values, pairs, seed, weights, out } => {
            cmd_hist(&checkpoint, &t_values, pairs, seed, &weights, &out_dir(&out))
        }
        Command::Sweep { checkpoint, steps, samples, seed, weights, out } => {
            cmd_sweep(&checkpoint, &steps, samples, seed, &weights, &out_dir(&out))
        }
        Command::Bench { config, time } => cmd_bench(&config, time),
        Command::Inspect { file } => cmd_inspect(&file),
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> bitgen::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.cfg"), cfg.to_config_text())?;
    Ok(())
}

fn cmd_train_tokenizer(config: &ConfigArgs, out: &Path) -> bitgen::Result<()> {
    let cfg = config.load()?;
    prepare_out(out, &cfg)?;
    let mut metrics = MetricWriter::create(&out.join("metrics.jsonl"))?;
    let mut store = bitgen::nn::ParamStore::new();
    let tok = Tokenizer::init(&mut store, cfg.tokenizer_config(), cfg.seed)?;
    pipeline::train_tokenizer_loop(&mut store, &tok, &cfg, |rec| {
        let _ = metrics.write(rec);
    })?;
    metrics.flush()?;
    let ckpt = Checkpoint::capture("tokenizer", cfg.tok_steps, &cfg, &store, None);
    let path = out.join("tokenizer.ckpt");
    ckpt.save(&path)?;
    println!("tokenizer checkpoint -> {}", path.display());
    Ok(())
}

fn cmd_train_ar(
    config: &ConfigArgs,
    tokenizer_path: &Path,
    resume: Option<&Path>,
    out: &Path,
) -> bitgen::Result<()> {
    let cfg = config.load()?;
    let tok_ckpt = Checkpoint::load(tokenizer_path)?;
    if tok_ckpt.header.kind != "tokenizer" {
        return Err(Error::Compat(format!(
            "{} is a '{}' checkpoint, expected 'tokenizer'",
            tokenizer_path.display(),
            tok_ckpt.header.kind
        )));
    }
    check_compat(&tok_ckpt.header, &cfg)?;
    prepare_out(out, &cfg)?;
    let mut metrics = MetricWriter::create(&out.join("metrics.jsonl"))?;

    let (mut store, model, mut state) = match resume {
        None => {
            let mut store = tok_ckpt.build_store(false)?;
            let model = ArModel::init(&mut store, &cfg)?;
            let state = TrainerState::new(&store, &cfg);
            (store, model, state)
        }
        Some(path) => {
            let ar_ckpt = Checkpoint::load(path)?;
            if ar_ckpt.header.kind != "ar" {
                return Err(Error::Compat(format!(
                    "{} is a '{}' checkpoint, expected 'ar'",
                    path.display(),
                    ar_ckpt.header.kind
                )));
            }
            if ar_ckpt.header.config != cfg {
                return Err(Error::Compat(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            let store = ar_ckpt.build_store(false)?;
            let model = ArModel::from_store(&store, &cfg)?;
            let mut state = TrainerState::new(&store, &cfg);
            ar_ckpt.restore_trainer(&store, &mut state.opt, &mut state.ema)?;
            state.step = ar_ckpt.header.step;
            let rng_state = ar_ckpt
                .header
                .rng
                .ok_or_else(|| Error::Format("AR checkpoint missing RNG state".into()))?;
            state.rng = bitgen::rng::restore(&rng_state);
            state.rng_seed = rng_state.seed;
            (store, model, state)
        }
    };
    let tok = Tokenizer::from_store(&store, cfg.tokenizer_config())?;

    pipeline::train_ar_loop(&mut store, &model, &tok, &cfg, &mut state, |rec| {
        let _ = metrics.write(rec);
    })?;
    metrics.flush()?;

    let rng_state = bitgen::rng::capture(state.rng_seed, &state.rng);
    let ckpt =
        Checkpoint::capture("ar", state.step, &cfg, &store, Some((&state.opt, &state.ema, rng_state)));
    let path = out.join("ar.ckpt");
    ckpt.save(&path)?;
    println!("ar checkpoint -> {}", path.display());
    Ok(())
}

fn load_ar(path: &Path, weights: &str) -> bitgen::Result<(RunConfig, bitgen::nn::ParamStore, ArModel, Tokenizer)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.header.kind != "ar" {
        return Err(Error::Compat(format!(
            "{} is a '{}' checkpoint, expected 'ar'",
            path.display(),
            ckpt.header.kind
        )));
    }
    let use_ema = match weights {
        "raw" => false,
        "ema" => true,
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown weights '{other}' (expected raw or ema)"
            )))
        }
    };
    let cfg = ckpt.header.config.clone();
    let store = ckpt.build_store(use_ema)?;
    let model = ArModel::from_store(&store, &cfg)?;
    let tok = Tokenizer::from_store(&store, cfg.tokenizer_config())?;
    Ok((cfg, store, model, tok))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    class: Option<usize>,
    count: usize,
    steps: Option<usize>,
    cfg_scale: Option<f64>,
    seed: u64,
    weights: &str,
    png: bool,
    out: &Path,
) -> bitgen::Result<()> {
    let (cfg, store, model, tok) = load_ar(checkpoint, weights)?;
    if let Some(c) = class {
        if c >= cfg.num_classes {
            return Err(Error::InvalidInput(format!(
                "class {c} out of range (valid: 0..{})",
                cfg.num_classes - 1
            )));
        }
    }
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let req = GenerationRequest {
            class,
            patch: model.patch,
            num_steps: steps.unwrap_or(cfg.num_steps),
            cfg_scale: cfg_scale.unwrap_or(cfg.cfg_scale),
            seed: seed.wrapping_add(i as u64),
        };
        let (grid, stats) = generate(&model, &store, &req)?;
        let packed = bitgen::binq::pack_bits(&grid)?;
        let stem = format!("sample_s{}_i{:04}", seed, i);
        let blt = out.join(format!("{stem}.blt"));
        std::fs::write(&blt, packed.to_bytes())?;
        let img = tok.decode(&store, &grid)?;
        let ppm = out.join(format!("{stem}.ppm"));
        let mut f = std::fs::File::create(&ppm)?;
        bitgen::image::write_ppm(&img, &mut f)?;
        if png {
            write_png(&img, &out.join(format!("{stem}.png")))?;
        }
        println!(
            "sample {i}: class {:?} seed {} ar_steps {} -> {}",
            class,
            req.seed,
            stats.ar_steps,
            ppm.display()
        );
    }
    Ok(())
}

fn write_png(img: &bitgen::image::ImageTensor, path: &Path) -> bitgen::Result<()> {
    let bytes: Vec<u8> =
        img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
            .expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(())
}

fn cmd_eval_head(
    experiment: &str,
    d: usize,
    train_steps: u64,
    eval_samples: usize,
    seed: u64,
    out: &Path,
) -> bitgen::Result<()> {
    std::fs::create_dir_all(out)?;
    match experiment {
        "xor" => {
            let spec = evalx::SyntheticJointSpec::xor(d);
            let budgets = evalx::ExperimentBudget {
                train_steps,
                batch: 64,
                eval_samples,
            };
            let report = evalx::joint_vs_factorized_experiment(&spec, budgets, seed)?;
            let mut metrics = MetricWriter::create(&out.join("eval_head.jsonl"))?;
            metrics.write(&report)?;
            metrics.flush()?;
            println!("{report}");
        }
        "ablation" => {
            let mut cfg = RunConfig::default();
            // Small budget: the comparison is qualitative, not the pinned recipe.
            cfg.image_size = 16;
            cfg.d = 8;
            cfg.groups = 2;
            cfg.tok_hidden = 32;
            cfg.tok_steps = 400;
            cfg.ar_steps = 500;
            cfg.ar_batch = 8;
            cfg.backbone_width = 32;
            cfg.backbone_depth = 2;
            cfg.backbone_heads = 2;
            cfg.head_width = 48;
            cfg.head_depth = 2;
            cfg.head_heads = 2;
            cfg.num_steps = 16;
            cfg.cfg_scale = 2.0;
            cfg.seed = seed;
            cfg.validate()?;
            let report = evalx::continuous_target_ablation(&cfg, seed)?;
            let mut metrics = MetricWriter::create(&out.join("ablation.jsonl"))?;
            for row in &report.rows {
                metrics.write(row)?;
            }
            metrics.flush()?;
            println!("{report}");
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown experiment '{other}' (expected xor or ablation)"
            )))
        }
    }
    Ok(())
}

fn cmd_hist(
    checkpoint: &Path,
    t_values: &[f64],
    pairs: usize,
    seed: u64,
    weights: &str,
    out: &Path,
) -> bitgen::Result<()> {
    let (cfg, store, model, tok) = load_ar(checkpoint, weights)?;
    let t_values = if t_values.is_empty() { vec![0.1, 0.5, 0.9] } else { t_values.to_vec() };
    std::fs::create_dir_all(out)?;
    let spec = cfg.dataset_spec();
    let pair_data = evalx::teacher_forced_pairs(&model, &tok, &store, &spec, pairs, seed)?;
    let mut rng = bitgen::rng::stream(bitgen::rng::role_seed(seed, "hist"), 0);
    let hists = output_histogram(&store, &model.head, &pair_data, &t_values, &mut rng);
    for h in &hists {
        let path = out.join(format!("hist_t{:.2}.csv", h.t));
        let mut f = std::fs::File::create(&path)?;
        evalx::write_histogram_csv(h, &mut f)?;
        println!(
            "t = {:.2}: frac(|f| > 0.5) = {:.3} -> {}",
            h.t,
            h.fraction_above(0.5),
            path.display()
        );
    }
    Ok(())
}

fn cmd_sweep(
    checkpoint: &Path,
    steps: &str,
    samples: usize,
    seed: u64,
    weights: &str,
    out: &Path,
) -> bitgen::Result<()> {
    let (cfg, store, model, tok) = load_ar(checkpoint, weights)?;
    let step_list: Vec<usize> = steps
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad step count '{s}'")))
        })
        .collect::<bitgen::Result<_>>()?;
    if step_list.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("step counts must be >= 1".into()));
    }
    std::fs::create_dir_all(out)?;
    let rows = evalx::step_sweep(&model, &store, &tok, &cfg, &step_list, samples, seed)?;
    let mut metrics = MetricWriter::create(&out.join("sweep.jsonl"))?;
    println!("{:>6} {:>9} {:>11} {:>14}", "steps", "accuracy", "classified", "bit_balance");
    for row in &rows {
        metrics.write(row)?;
        println!(
            "{:>6} {:>9.3} {:>11.3} {:>14.4}",
            row.num_steps, row.oracle_accuracy, row.classified_fraction, row.mean_abs_bit_mean
        );
    }
    metrics.flush()?;
    Ok(())
}

fn cmd_bench(config: &ConfigArgs, time: bool) -> bitgen::Result<()> {
    let cfg = config.load()?;
    let grid = cfg.grid_len();
    println!("token grid {grid}x{grid} ({} tokens)", grid * grid);
    println!("{:>6} {:>10} {:>12}", "p", "AR steps", "tokens/step");
    let mut p = 1usize;
    while p <= grid {
        if grid % p == 0 {
            let layout = PatchLayout::new(p, grid, grid)?;
            println!("{:>6} {:>10} {:>12}", p, layout.num_patches(), layout.tokens_per_patch());
        }
        p *= 2;
    }
    if time {
        let mut store = bitgen::nn::ParamStore::new();
        let model = ArModel::init(&mut store, &cfg)?;
        let req = GenerationRequest {
            class: Some(0),
            patch: model.patch,
            num_steps: cfg.num_steps,
            cfg_scale: cfg.cfg_scale,
            seed: 0,
        };
        let t0 = std::time::Instant::now();
        let (_, stats) = generate(&model, &store, &req)?;
        println!(
            "one generation at p={} ({} AR steps, N={}): {:.2} s",
            cfg.patch_size,
            stats.ar_steps,
            cfg.num_steps,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn cmd_inspect(file: &Path) -> bitgen::Result<()> {
    let bytes = std::fs::read(file)?;
    let packed = bitgen::binq::PackedLatentFile::from_bytes(&bytes)?;
    println!("magic   {}", String::from_utf8_lossy(bitgen::binq::PACKED_MAGIC));
    println!("height  {}", packed.height);
    println!("width   {}", packed.width);
    println!("d       {}", packed.d);
    println!("payload {} bytes", packed.payload.len());
    Ok(())
}
