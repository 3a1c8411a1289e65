//! Two-phase training orchestration: a base text-conditioned phase over the
//! whole denoiser, then a fused phase that trains only the face key/value
//! projections against a frozen trunk.
//!
//! All randomness is derived as (seed, phase label, step index), so a run can
//! be interrupted and resumed, or replayed step by step, without drift.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use thiserror::Error;

use crate::attention::TrainSelection;
use crate::checkpoint::{self, CheckpointError, TensorArchive};
use crate::config::RunConfig;
use crate::diffusion::{loss_and_grads, DiffusionError, NoiseSchedule, SgdMomentum};
use crate::faces::{self, DatasetError, Split};
use crate::imageio::{self, ImageError};
use crate::seeding::derive_rng;
use crate::tape::{GradMap, ParamId};
use crate::tensor::{randn, Tensor, TensorError};
use crate::unet::{Conditioning, UNetError, UNetState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset has no training rows")]
    EmptyTrainingSet,
    #[error("identity {0} has fewer than two renders; cannot pair references")]
    UnpairableIdentity(usize),
    #[error("frozen trunk weights drifted during the fused phase (step {step})")]
    FrozenDrift { step: usize },
    #[error("training state at {path} is for phase {found}, expected {expected}")]
    PhaseMismatch {
        path: String,
        found: String,
        expected: String,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Base,
    Fused,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Fused => "fused",
        }
    }

    pub fn selection(self) -> TrainSelection {
        match self {
            Phase::Base => TrainSelection::Base,
            Phase::Fused => TrainSelection::FaceOnly,
        }
    }

    pub fn steps(self, cfg: &RunConfig) -> usize {
        match self {
            Phase::Base => cfg.base_steps,
            Phase::Fused => cfg.fused_steps,
        }
    }

    pub fn lr(self, cfg: &RunConfig) -> f64 {
        match self {
            Phase::Base => cfg.base_lr,
            Phase::Fused => cfg.fused_lr,
        }
    }

    pub fn checkpoint_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.checkpoint_dir.join(format!("{}.ckpt", self.label()))
    }

    pub fn state_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.checkpoint_dir.join(format!("{}.state", self.label()))
    }

    pub fn loss_csv_path(self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join(format!("loss_{}.csv", self.label()))
    }
}

/// One training example: encoded latent plus its prompt embedding.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub latent: Tensor,
    pub prompt: Tensor,
    pub identity: usize,
}

/// The train split loaded into memory as latents.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
    pub by_identity: BTreeMap<usize, Vec<usize>>,
}

pub fn load_training_set(dataset_dir: &Path) -> Result<TrainingSet> {
    let rows = faces::load_manifest(dataset_dir)?;
    let mut items = Vec::new();
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.split == Split::Train) {
        let image = imageio::read_rgb_png(&dataset_dir.join(&row.image))?;
        let latent = imageio::encode_latent(&image)?;
        by_identity.entry(row.identity).or_default().push(items.len());
        items.push(TrainItem {
            latent,
            prompt: faces::embed_prompt(&row.prompt),
            identity: row.identity,
        });
    }
    if items.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    Ok(TrainingSet { items, by_identity })
}

const STATE_KIND: &str = "train-state";
const VELOCITY_PREFIX: &str = "velocity.";

fn save_train_state(
    path: &Path,
    state: &UNetState,
    opt: &SgdMomentum,
    phase: Phase,
    next_step: usize,
) -> Result<()> {
    let mut tensors = Vec::new();
    state.visit_params(|name, t, _| tensors.push((name.to_string(), t.clone())));
    for (id, v) in opt.velocity() {
        tensors.push((format!("{VELOCITY_PREFIX}{}", id.0), v.clone()));
    }
    checkpoint::save(
        path,
        &TensorArchive {
            kind: STATE_KIND.into(),
            meta: serde_json::json!({
                "unet": state.config,
                "phase": phase.label(),
                "next_step": next_step,
            }),
            tensors,
        },
    )?;
    Ok(())
}

fn load_train_state(
    path: &Path,
    phase: Phase,
    opt: &mut SgdMomentum,
) -> Result<(UNetState, usize)> {
    let archive = checkpoint::load(path)?;
    if archive.kind != STATE_KIND {
        return Err(CheckpointError::WrongKind {
            got: archive.kind,
            want: STATE_KIND.into(),
        }
        .into());
    }
    let found = archive.meta["phase"].as_str().unwrap_or("?").to_string();
    if found != phase.label() {
        return Err(TrainError::PhaseMismatch {
            path: path.display().to_string(),
            found,
            expected: phase.label().into(),
        });
    }
    let next_step = archive.meta["next_step"].as_u64().unwrap_or(0) as usize;
    let config = serde_json::from_value(archive.meta["unet"].clone()).map_err(|e| {
        CheckpointError::Format {
            path: path.display().to_string(),
            message: format!("bad config: {e}"),
        }
    })?;
    let mut state = UNetState::init(config, &mut derive_rng(0, "load", 0))?;
    let by_name: BTreeMap<&str, &Tensor> = archive
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut missing = Vec::new();
    state.visit_params_mut(|name, t, _| match by_name.get(name) {
        Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
        _ => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(CheckpointError::TensorSet(format!("missing {missing:?}")).into());
    }
    for (name, t) in &archive.tensors {
        if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
            opt.restore_velocity(ParamId::new(param), t.clone());
        }
    }
    Ok((state, next_step))
}

/// Per-step draw: target item, whether the step is unconditional, and the
/// reference item for the fused phase. Fully determined by the RNG stream.
fn draw_sample(
    data: &TrainingSet,
    phase: Phase,
    uncond_fraction: f64,
    rng: &mut impl rand::Rng,
) -> Result<(usize, bool, Option<usize>)> {
    let idx = rng.gen_range(0..data.items.len());
    let uncond = rng.gen::<f64>() < uncond_fraction;
    if uncond || phase == Phase::Base {
        return Ok((idx, uncond, None));
    }
    let peers = &data.by_identity[&data.items[idx].identity];
    if peers.len() < 2 {
        return Err(TrainError::UnpairableIdentity(data.items[idx].identity));
    }
    // the reference is the identity's canonical render (its first, as in
    // evaluation); when that is the target itself, fall back to a random
    // other render so the reference is never the target
    let ref_idx = if peers[0] != idx {
        peers[0]
    } else {
        loop {
            let cand = peers[rng.gen_range(0..peers.len())];
            if cand != idx {
                break cand;
            }
        }
    };
    Ok((idx, false, Some(ref_idx)))
}

/// Run (or resume) one training phase to completion; returns the final
/// checkpoint path.
pub fn train_phase(
    cfg: &RunConfig,
    phase: Phase,
    data: &TrainingSet,
    resume: bool,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<PathBuf> {
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let mut opt = SgdMomentum::new(phase.lr(cfg), cfg.momentum);
    let null_prompt = faces::null_prompt_embedding();

    let state_path = phase.state_path(cfg);
    let (mut state, start_step) = if resume && state_path.exists() {
        load_train_state(&state_path, phase, &mut opt)?
    } else {
        let state = match phase {
            Phase::Base => UNetState::init(cfg.unet.clone(), &mut derive_rng(cfg.seed, "init", 0))?,
            Phase::Fused => checkpoint::load_unet(&Phase::Base.checkpoint_path(cfg))?,
        };
        (state, 0)
    };
    let frozen = match phase {
        Phase::Fused => Some(checkpoint::base_trunk_checksum(&state)),
        Phase::Base => None,
    };

    let csv_path = phase.loss_csv_path(cfg);
    if let Some(dir) = csv_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut csv = std::io::BufWriter::new(if start_step == 0 {
        let mut f = std::fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
        writeln!(f, "step,loss").map_err(|e| io_err(&csv_path, e))?;
        f
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&csv_path)
            .map_err(|e| io_err(&csv_path, e))?
    });

    let total_steps = phase.steps(cfg);
    for step in start_step..total_steps {
        let mut rng = derive_rng(cfg.seed, phase.label(), step as u64);
        let mut grad_acc: GradMap = GradMap::new();
        let mut loss_acc = 0.0;
        for _ in 0..cfg.batch_size {
            let (idx, uncond, ref_idx) = draw_sample(data, phase, cfg.uncond_fraction, &mut rng)?;
            let item = &data.items[idx];
            let z0 = &item.latent;
            let refs: Vec<Tensor> = ref_idx
                .map(|r| vec![data.items[r].latent.clone()])
                .unwrap_or_default();
            let identity_of = vec![0usize; refs.len()];
            let cond = Conditioning {
                text: if uncond { &null_prompt } else { &item.prompt },
                refs: &refs,
                identity_of: &identity_of,
                masks: None,
                strict_mask: false,
            };
            let t = rng.gen_range(0..schedule.len());
            let noise = randn(z0.rows(), z0.cols(), 1.0, &mut rng);
            let (loss, grads) =
                loss_and_grads(&state, &schedule, z0, &cond, phase.selection(), t, &noise)?;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { loss, t }.into());
            }
            loss_acc += loss;
            for (id, g) in grads {
                match grad_acc.entry(id) {
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() = e.get().add(&g)?;
                    }
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let grads: GradMap = grad_acc
            .into_iter()
            .map(|(id, g)| (id, g.scale(inv)))
            .collect();
        opt.step(&mut state, &grads)?;
        let loss = loss_acc * inv;

        if step % cfg.log_every == 0 || step + 1 == total_steps {
            writeln!(csv, "{step},{loss}").map_err(|e| io_err(&csv_path, e))?;
            if let Some(f) = progress.as_deref_mut() {
                f(step, loss);
            }
            if let Some(expected) = &frozen {
                if checkpoint::base_trunk_checksum(&state) != *expected {
                    return Err(TrainError::FrozenDrift { step });
                }
            }
        }
        if cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0 {
            csv.flush().map_err(|e| io_err(&csv_path, e))?;
            save_train_state(&state_path, &state, &opt, phase, step + 1)?;
        }
    }
    csv.flush().map_err(|e| io_err(&csv_path, e))?;

    if let Some(expected) = &frozen {
        if checkpoint::base_trunk_checksum(&state) != *expected {
            return Err(TrainError::FrozenDrift { step: total_steps });
        }
    }
    save_train_state(&state_path, &state, &opt, phase, total_steps)?;
    let ckpt = phase.checkpoint_path(cfg);
    checkpoint::save_unet(&ckpt, &state)?;
    Ok(ckpt)
}
