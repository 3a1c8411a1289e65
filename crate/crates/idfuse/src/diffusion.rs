//! DDPM noise schedule, training step, and classifier-free-guided sampler.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::TrainSelection;
use crate::tape::{GradMap, ParamId, Tape};
use crate::tensor::{randn, Tensor, TensorError};
use crate::unet::{Conditioning, UNetError, UNetState};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error("timestep {t} out of range (schedule has {max} steps)")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error("sampler steps {steps} exceed schedule length {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("non-finite loss {loss} at timestep {t}; step rejected")]
    NonFiniteLoss { loss: f64, t: usize },
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Linear-beta DDPM schedule with precomputed cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from 1e-4 to 0.02 over `timesteps`.
    pub fn linear(timesteps: usize) -> Self {
        let (lo, hi) = (1e-4, 0.02);
        let betas: Vec<f64> = (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    lo
                } else {
                    lo + (hi - lo) * t as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_cumprod = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_cumprod.push(acc);
        }
        Self {
            betas,
            alpha_cumprod,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alpha_cumprod[t]
    }

    /// Forward process: `sqrt(acp_t) z0 + sqrt(1 - acp_t) noise`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        if t >= self.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.len() });
        }
        let acp = self.alpha_cumprod[t];
        Ok(z0.scale(acp.sqrt()).add(&noise.scale((1.0 - acp).sqrt()))?)
    }

    /// Descending timestep sequence for a strided sampler.
    fn stride_times(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(DiffusionError::NoSteps);
        }
        if steps > self.len() {
            return Err(DiffusionError::TooManySteps {
                steps,
                max: self.len(),
            });
        }
        let mut times: Vec<usize> = (0..steps).map(|i| i * self.len() / steps).collect();
        times.dedup();
        times.reverse();
        Ok(times)
    }
}

/// SGD with heavy-ball momentum, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Momentum buffers, for checkpointing training state.
    pub fn velocity(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.velocity
    }

    /// Restore a momentum buffer, e.g. when resuming a run.
    pub fn restore_velocity(&mut self, id: ParamId, v: Tensor) {
        self.velocity.insert(id, v);
    }

    /// Apply one update to every parameter present in `grads`.
    pub fn step(&mut self, state: &mut UNetState, grads: &GradMap) -> Result<()> {
        let mut failure: Option<TensorError> = None;
        state.visit_params_mut(|name, tensor, _| {
            let Some(g) = grads.get(&ParamId::new(name)) else {
                return;
            };
            if failure.is_some() {
                return;
            }
            let v = self
                .velocity
                .entry(ParamId::new(name))
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            match v.scale(self.momentum).add(g) {
                Ok(nv) => *v = nv,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            }
            match tensor.sub(&v.scale(self.lr)) {
                Ok(nt) => *tensor = nt,
                Err(e) => failure = Some(e),
            }
        });
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

/// One training step's bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss: f64,
    pub t: usize,
}

/// Deterministic core of a training step: fixed timestep and noise draw.
/// Computes the noise-prediction MSE, backpropagates, and applies the
/// optimizer to whatever `selection` marked trainable.
pub fn train_step_at(
    state: &mut UNetState,
    schedule: &NoiseSchedule,
    opt: &mut SgdMomentum,
    z0: &Tensor,
    cond: &Conditioning,
    selection: TrainSelection,
    t: usize,
    noise: &Tensor,
) -> Result<TrainOutcome> {
    let (loss, grads) = loss_and_grads(state, schedule, z0, cond, selection, t, noise)?;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss { loss, t });
    }
    opt.step(state, &grads)?;
    Ok(TrainOutcome { loss, t })
}

/// One training step with `t` uniform in the schedule and fresh Gaussian
/// noise from `rng`.
pub fn train_step(
    state: &mut UNetState,
    schedule: &NoiseSchedule,
    opt: &mut SgdMomentum,
    z0: &Tensor,
    cond: &Conditioning,
    selection: TrainSelection,
    rng: &mut impl rand::Rng,
) -> Result<TrainOutcome> {
    let t = rng.gen_range(0..schedule.len());
    let noise = randn(z0.rows(), z0.cols(), 1.0, rng);
    train_step_at(state, schedule, opt, z0, cond, selection, t, &noise)
}

/// Noise-prediction MSE and its gradients, without touching the state.
pub fn loss_and_grads(
    state: &UNetState,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    selection: TrainSelection,
    t: usize,
    noise: &Tensor,
) -> Result<(f64, GradMap)> {
    let z_t = schedule.q_sample(z0, t, noise)?;
    let mut tape = Tape::new();
    let eps_hat = state.forward_on_tape(&mut tape, &z_t, t, cond, selection, None)?;
    let target = tape.leaf(noise.clone());
    let diff = tape.sub(eps_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq);
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).at(0, 0), grads))
}

/// Evaluation-only loss at a fixed draw.
pub fn loss_at(
    state: &UNetState,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    t: usize,
    noise: &Tensor,
) -> Result<f64> {
    let z_t = schedule.q_sample(z0, t, noise)?;
    let eps_hat = state.forward(&z_t, t, cond)?;
    let diff = eps_hat.sub(noise)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Strided denoising steps, e.g. 50 of a 1000-step schedule.
    pub steps: usize,
    /// Classifier-free guidance weight `g`: the applied noise estimate is
    /// `eps_u + g (eps_c - eps_u)`, so 0 is unconditional and 1 is purely
    /// conditional.
    pub guidance: f64,
}

/// Ancestral DDPM sampling over a strided timestep subset with
/// classifier-free guidance. `uncond_text` is the null condition used for
/// the unconditional branch; all randomness comes from `rng`.
pub fn sample(
    state: &UNetState,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    uncond_text: &Tensor,
    sampler: SamplerConfig,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    let times = schedule.stride_times(sampler.steps)?;
    let (rows, cols) = (cond.text.rows(), cond.text.cols());
    debug_assert!(rows > 0 && cols > 0);
    let uncond = Conditioning::text_only(uncond_text);
    let mut z = randn(
        state.config.latent_tokens(),
        state.config.latent_channels,
        1.0,
        rng,
    );
    for (i, &t) in times.iter().enumerate() {
        let eps_u = state.forward(&z, t, &uncond)?;
        let eps = if sampler.guidance == 0.0 {
            eps_u
        } else {
            let eps_c = state.forward(&z, t, cond)?;
            let delta = eps_c.sub(&eps_u)?;
            eps_u.add(&delta.scale(sampler.guidance))?
        };

        let acp_t = schedule.alpha_cumprod(t);
        let acp_prev = match times.get(i + 1) {
            Some(&tp) => schedule.alpha_cumprod(tp),
            None => 1.0,
        };
        let alpha_eff = acp_t / acp_prev;
        let beta_eff = 1.0 - alpha_eff;

        let z0_hat = z
            .sub(&eps.scale((1.0 - acp_t).sqrt()))?
            .scale(1.0 / acp_t.sqrt());
        let mean = z0_hat
            .scale(acp_prev.sqrt() * beta_eff / (1.0 - acp_t))
            .add(&z.scale(alpha_eff.sqrt() * (1.0 - acp_prev) / (1.0 - acp_t)))?;
        if i + 1 < times.len() {
            let sigma = (beta_eff * (1.0 - acp_prev) / (1.0 - acp_t)).sqrt();
            let noise = randn(z.rows(), z.cols(), 1.0, rng);
            z = mean.add(&noise.scale(sigma))?;
        } else {
            z = mean;
        }
    }
    Ok(z)
}
