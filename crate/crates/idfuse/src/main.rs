//! Command-line surface: dataset generation, two-phase training, sampling,
//! evaluation, and mask visualization. Every command is deterministic given
//! (config, seed) and writes a provenance sidecar next to its outputs.

use std::error::Error;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use idfuse::attention::{build_identity_attention_mask, IdentityMaskSet, ReferenceSet};
use idfuse::checkpoint;
use idfuse::config::RunConfig;
use idfuse::diffusion::{sample, NoiseSchedule, SamplerConfig};
use idfuse::eval::{delta_table, embedder_fixture, evaluate_run};
use idfuse::faces::{self, embed_prompt, null_prompt_embedding, PromptSpec};
use idfuse::imageio;
use idfuse::raster::BoolRaster;
use idfuse::seeding::derive_rng;
use idfuse::tensor::Tensor;
use idfuse::train::{load_training_set, train_phase, Phase};
use idfuse::unet::{Conditioning, UNetState};

#[derive(Parser)]
#[command(
    name = "idfuse",
    about = "Identity-fused cross-attention in a miniature latent diffusion pipeline"
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Base,
    Fused,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// One reference identity.
    Single,
    /// Several references fused into one face (morphing).
    Multiref,
    /// One reference per disjoint image region.
    Multiid,
}

impl ModeArg {
    fn label(self) -> &'static str {
        match self {
            ModeArg::Single => "single",
            ModeArg::Multiref => "multiref",
            ModeArg::Multiid => "multiid",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural face dataset.
    Dataset,
    /// Run one training phase to completion.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Continue from the phase's last training-state snapshot.
        #[arg(long)]
        resume: bool,
    },
    /// Generate an image from references.
    Sample {
        #[arg(long, value_enum, default_value = "single")]
        mode: ModeArg,
        /// Reference face images (64x64 PNG).
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        /// Per-identity region masks (multiid mode), paired with --refs.
        #[arg(long, num_args = 0..)]
        masks: Vec<PathBuf>,
        /// Prompt as style:expression:background, e.g. photo:smile:garden.
        #[arg(long, default_value = "photo:neutral:plain")]
        prompt: String,
        /// Override the checkpoint's attention-scale multiplier.
        #[arg(long)]
        alpha_mult: Option<f64>,
        /// Override the config's guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Hide each identity's face keys outside its own region.
        #[arg(long)]
        strict_mask: bool,
        /// Model checkpoint; defaults to the fused checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out identities.
    Eval {
        /// Model checkpoint; defaults to the fused checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Optional second checkpoint evaluated without references; emits a
        /// delta table against the main run.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Visualize identity masks at every attention scale plus the additive
    /// attention mask they induce.
    MaskDemo {
        #[arg(long, num_args = 1.., required = true)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        strict_mask: bool,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

type AnyResult<T> = Result<T, Box<dyn Error>>;

fn run() -> AnyResult<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;

    match cli.command {
        Command::Dataset => cmd_dataset(&cfg),
        Command::Train { phase, resume } => cmd_train(&cfg, phase, resume),
        Command::Sample {
            mode,
            refs,
            masks,
            prompt,
            alpha_mult,
            guidance,
            strict_mask,
            checkpoint,
        } => {
            if let Some(g) = guidance {
                cfg.guidance = g;
            }
            cmd_sample(
                &cfg, mode, &refs, &masks, &prompt, alpha_mult, strict_mask, checkpoint,
            )
        }
        Command::Eval {
            checkpoint,
            baseline,
        } => cmd_eval(&cfg, checkpoint, baseline),
        Command::MaskDemo { masks, strict_mask } => cmd_mask_demo(&cfg, &masks, strict_mask),
    }
}

fn write_sidecar(path: &Path, value: serde_json::Value) -> AnyResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn provenance(cfg: &RunConfig, command: &str) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "config": cfg,
    })
}

fn cmd_dataset(cfg: &RunConfig) -> AnyResult<()> {
    let rows = faces::make_dataset(
        &cfg.dataset_dir,
        cfg.n_identities,
        cfg.renders_per_identity,
        cfg.seed,
    )?;
    let mut sidecar = provenance(cfg, "dataset");
    sidecar["rows"] = serde_json::json!(rows.len());
    write_sidecar(&cfg.dataset_dir.join("provenance.json"), sidecar)?;
    println!(
        "dataset: {} renders of {} identities in {}",
        rows.len(),
        cfg.n_identities,
        cfg.dataset_dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, phase: PhaseArg, resume: bool) -> AnyResult<()> {
    let phase = match phase {
        PhaseArg::Base => Phase::Base,
        PhaseArg::Fused => Phase::Fused,
    };
    let data = load_training_set(&cfg.dataset_dir)?;
    println!(
        "training {} phase: {} items, {} steps",
        phase.label(),
        data.items.len(),
        phase.steps(cfg)
    );
    let mut report = |step: usize, loss: f64| {
        println!("step {step} loss {loss:.6}");
    };
    let ckpt = train_phase(cfg, phase, &data, resume, Some(&mut report))?;
    let hash = checkpoint::sha256_file(&ckpt)?;
    let mut sidecar = provenance(cfg, "train");
    sidecar["phase"] = serde_json::json!(phase.label());
    sidecar["resume"] = serde_json::json!(resume);
    sidecar["checkpoint"] = serde_json::json!(ckpt);
    sidecar["checkpoint_hash"] = serde_json::json!(hash);
    sidecar["loss_csv"] = serde_json::json!(phase.loss_csv_path(cfg));
    write_sidecar(
        &cfg.out_dir.join(format!("train_{}.json", phase.label())),
        sidecar,
    )?;
    println!("checkpoint: {} ({hash})", ckpt.display());
    Ok(())
}

fn parse_prompt(s: &str) -> AnyResult<PromptSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("prompt must be style:expression:background, got {s:?}").into());
    }
    let spec = serde_json::json!({
        "style": parts[0].trim(),
        "expression": parts[1].trim(),
        "background": parts[2].trim(),
    });
    serde_json::from_value(spec).map_err(|e| format!("bad prompt {s:?}: {e}").into())
}

fn load_checkpoint(cfg: &RunConfig, explicit: Option<PathBuf>) -> AnyResult<(UNetState, PathBuf)> {
    let path = explicit.unwrap_or_else(|| Phase::Fused.checkpoint_path(cfg));
    let state = checkpoint::load_unet(&path)?;
    Ok((state, path))
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    cfg: &RunConfig,
    mode: ModeArg,
    ref_paths: &[PathBuf],
    mask_paths: &[PathBuf],
    prompt_str: &str,
    alpha_mult: Option<f64>,
    strict_mask: bool,
    checkpoint_path: Option<PathBuf>,
) -> AnyResult<()> {
    let prompt = parse_prompt(prompt_str)?;
    let (mut state, ckpt_path) = load_checkpoint(cfg, checkpoint_path)?;
    if let Some(mult) = alpha_mult {
        let old = state.config.alpha_mult;
        for layer in &mut state.attn {
            layer.weights.alpha *= mult / old;
        }
        state.config.alpha_mult = mult;
    }

    match mode {
        ModeArg::Single => {
            if ref_paths.len() != 1 {
                return Err("single mode takes exactly one --refs image".into());
            }
        }
        ModeArg::Multiref => {
            if ref_paths.len() < 2 {
                return Err("multiref mode needs at least two --refs images".into());
            }
        }
        ModeArg::Multiid => {
            if ref_paths.len() < 2 || mask_paths.len() != ref_paths.len() {
                return Err(
                    "multiid mode needs >= 2 --refs with one --masks image each".into(),
                );
            }
        }
    }
    if mode != ModeArg::Multiid && !mask_paths.is_empty() {
        return Err("--masks is only meaningful in multiid mode".into());
    }

    let mut refs = Vec::new();
    for p in ref_paths {
        let img = imageio::read_rgb_png(p)?;
        refs.push(imageio::encode_latent(&img)?);
    }
    let identity_of: Vec<usize> = match mode {
        ModeArg::Single => vec![0],
        // distinct identities; without masks the labels only document intent
        ModeArg::Multiref | ModeArg::Multiid => (0..refs.len()).collect(),
    };
    let mask_set = if mode == ModeArg::Multiid {
        let mut scaled = Vec::new();
        for p in mask_paths {
            let m = imageio::read_mask_png(p)?;
            scaled.push(m.downscale_to(cfg.unet.base_resolution)?);
        }
        Some(IdentityMaskSet::new(scaled)?)
    } else {
        None
    };

    let text = embed_prompt(&prompt);
    let cond = Conditioning {
        text: &text,
        refs: &refs,
        identity_of: &identity_of,
        masks: mask_set.as_ref(),
        strict_mask,
    };
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig {
        steps: cfg.sample_steps,
        guidance: cfg.guidance,
    };
    let mut rng = derive_rng(cfg.seed, "cli-sample", 0);
    let latent = sample(
        &state,
        &schedule,
        &cond,
        &null_prompt_embedding(),
        sampler,
        &mut rng,
    )?;
    let image = imageio::decode_latent(&latent, cfg.unet.base_resolution)?;

    let stem = format!("sample_{}_seed{}", mode.label(), cfg.seed);
    let out_png = cfg.out_dir.join(format!("{stem}.png"));
    imageio::write_rgb_png(&out_png, &image)?;
    let mut sidecar = provenance(cfg, "sample");
    sidecar["mode"] = serde_json::json!(mode.label());
    sidecar["prompt"] = serde_json::json!(prompt);
    sidecar["refs"] = serde_json::json!(ref_paths);
    sidecar["masks"] = serde_json::json!(mask_paths);
    sidecar["guidance"] = serde_json::json!(cfg.guidance);
    sidecar["alpha_mult"] = serde_json::json!(state.config.alpha_mult);
    sidecar["strict_mask"] = serde_json::json!(strict_mask);
    sidecar["checkpoint"] = serde_json::json!(ckpt_path);
    sidecar["checkpoint_hash"] = serde_json::json!(checkpoint::sha256_file(&ckpt_path)?);
    sidecar["output"] = serde_json::json!(out_png);
    write_sidecar(&cfg.out_dir.join(format!("{stem}.json")), sidecar)?;
    println!("wrote {}", out_png.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> AnyResult<()> {
    let (state, ckpt_path) = load_checkpoint(cfg, checkpoint_path)?;
    let ckpt_hash = checkpoint::sha256_file(&ckpt_path)?;
    let (identity, prompt_net, fixture_hash) = embedder_fixture(&cfg.dataset_dir, cfg)?;

    let report = evaluate_run(
        &state,
        &identity,
        &prompt_net,
        &cfg.dataset_dir,
        cfg,
        cfg.seed,
        true,
        ckpt_hash.clone(),
    )?;
    let (json, csv) = report.write(&cfg.out_dir, "fused")?;
    println!(
        "fused: cosine {:.4} +- {:.4}, psnr {:.2}, ssim {:.4}, prompt {:.4}",
        report.summary.cosine_distance_mean,
        report.summary.cosine_distance_std,
        report.summary.psnr_face_mean,
        report.summary.ssim_face_mean,
        report.summary.prompt_alignment_mean
    );

    let mut sidecar = provenance(cfg, "eval");
    sidecar["checkpoint"] = serde_json::json!(ckpt_path);
    sidecar["checkpoint_hash"] = serde_json::json!(ckpt_hash);
    sidecar["embedder_fixture_hash"] = serde_json::json!(fixture_hash);
    sidecar["report_json"] = serde_json::json!(json);
    sidecar["report_csv"] = serde_json::json!(csv);

    if let Some(base_path) = baseline {
        let base_state = checkpoint::load_unet(&base_path)?;
        let base_hash = checkpoint::sha256_file(&base_path)?;
        let base_report = evaluate_run(
            &base_state,
            &identity,
            &prompt_net,
            &cfg.dataset_dir,
            cfg,
            cfg.seed,
            false,
            base_hash.clone(),
        )?;
        let (base_json, base_csv) = base_report.write(&cfg.out_dir, "base")?;
        let table = delta_table("base", &base_report, "fused", &report);
        let delta_path = cfg.out_dir.join(format!("eval_delta_seed{}.csv", cfg.seed));
        std::fs::write(&delta_path, &table)?;
        print!("{table}");
        sidecar["baseline_checkpoint"] = serde_json::json!(base_path);
        sidecar["baseline_checkpoint_hash"] = serde_json::json!(base_hash);
        sidecar["baseline_report_json"] = serde_json::json!(base_json);
        sidecar["baseline_report_csv"] = serde_json::json!(base_csv);
        sidecar["delta_csv"] = serde_json::json!(delta_path);
    }
    write_sidecar(
        &cfg.out_dir.join(format!("eval_seed{}.json", cfg.seed)),
        sidecar,
    )?;
    Ok(())
}

/// Nearest-neighbor upscale of a boolean raster into a [0,1] tile.
fn mask_tile(mask: &BoolRaster, tile: usize) -> Vec<f64> {
    let factor = tile / mask.height();
    let mut out = vec![0.0; tile * tile];
    for y in 0..tile {
        for x in 0..tile {
            if mask.get(y / factor, x / factor) {
                out[y * tile + x] = 1.0;
            }
        }
    }
    out
}

fn cmd_mask_demo(cfg: &RunConfig, mask_paths: &[PathBuf], strict_mask: bool) -> AnyResult<()> {
    let originals: Vec<BoolRaster> = mask_paths
        .iter()
        .map(|p| imageio::read_mask_png(p))
        .collect::<Result<_, _>>()?;
    let base = cfg.unet.base_resolution;
    let base_masks: Vec<BoolRaster> = originals
        .iter()
        .map(|m| m.downscale_to(base))
        .collect::<Result<_, _>>()?;
    let mask_set = IdentityMaskSet::new(base_masks)?;
    let n = mask_set.len();

    // one grid: a row per identity, a column per raster (input, base, scales)
    let tile = originals[0].height();
    let scales: Vec<usize> = std::iter::once(base).chain(cfg.unet.scales.iter().copied()).collect();
    let cols = 1 + scales.len();
    let mut grid = vec![0.0; n * tile * cols * tile];
    let mut blit = |row: usize, col: usize, values: &[f64]| {
        for y in 0..tile {
            for x in 0..tile {
                grid[(row * tile + y) * (cols * tile) + col * tile + x] = values[y * tile + x];
            }
        }
    };
    for (i, original) in originals.iter().enumerate() {
        blit(i, 0, &mask_tile(original, tile));
        for (j, &s) in scales.iter().enumerate() {
            let scaled = original.downscale_to(s)?;
            blit(i, j + 1, &mask_tile(&scaled, tile));
        }
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let grid_path = cfg.out_dir.join("mask_demo_masks.png");
    imageio::write_gray_png(&grid_path, n * tile, cols * tile, &grid)?;

    // the additive mask each attention scale would see: white = open (0),
    // black = blocked (-infinity)
    let n_c = faces::N_C;
    let mut additive_paths = Vec::new();
    for &s in &cfg.unet.scales {
        let streams = vec![Tensor::zeros(s * s, 1); n];
        let refs = ReferenceSet::new(streams, (0..n).collect())?;
        let scaled = mask_set.at_scale(s)?;
        let additive = build_identity_attention_mask(&scaled, n_c, &refs, strict_mask)?;
        let t = additive.tensor();
        let values: Vec<f64> = t.data().iter().map(|&v| if v == 0.0 { 1.0 } else { v }).collect();
        let path = cfg.out_dir.join(format!("mask_demo_additive_{s}.png"));
        imageio::write_gray_png(&path, t.rows(), t.cols(), &values)?;
        additive_paths.push(path);
    }

    let mut sidecar = provenance(cfg, "mask-demo");
    sidecar["masks"] = serde_json::json!(mask_paths);
    sidecar["strict_mask"] = serde_json::json!(strict_mask);
    sidecar["grid"] = serde_json::json!(grid_path);
    sidecar["additive"] = serde_json::json!(additive_paths);
    write_sidecar(&cfg.out_dir.join("mask_demo.json"), sidecar)?;
    println!("wrote {}", grid_path.display());
    Ok(())
}
