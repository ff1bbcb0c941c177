//! Linear DDPM noise schedule and the ancestral sampling step.
//!
//! States run `z_T, …, z_0`. The step taking `z_t` to `z_{t-1}` (for
//! `1 <= t <= T`) uses `beta_t`, stored at index `t - 1`, and queries the model
//! at timestep index `t - 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{AttentionHook, TextEmbedding, ToyModel};
use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Clamp the implied clean sample to `[-1, 1]` before forming the
    /// posterior mean.
    pub clip_denoised: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Ends at alpha_bar ~ 0.0045, close to latent-diffusion models; a
        // steeper ramp spends half the chain at near-zero signal.
        Self {
            num_steps: 50,
            beta_start: 0.001,
            beta_end: 0.2,
            clip_denoised: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    clip_denoised: bool,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let n = cfg.num_steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, cfg.clip_denoised)
    }

    pub fn from_betas(betas: Vec<f64>, clip_denoised: bool) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            clip_denoised,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, index: usize) -> f64 {
        self.betas[index]
    }

    pub fn alpha(&self, index: usize) -> f64 {
        self.alphas[index]
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        self.alpha_bars[index]
    }

    pub fn clip_denoised(&self) -> bool {
        self.clip_denoised
    }

    /// Forward process: `sqrt(ab)·x0 + sqrt(1-ab)·noise` at timestep index `index`.
    pub fn add_noise<T: Scalar>(&self, x0: &[T], noise: &[T], index: usize) -> Vec<T> {
        let ab = self.alpha_bars[index];
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter()
            .zip(noise)
            .map(|(&x, &e)| T::narrow(s0 * x.widen() + s1 * e.widen()))
            .collect()
    }

    /// Ancestral update from `z_t` to `z_{t-1}` given the predicted noise.
    ///
    /// `noise` is only read for `t > 1`; the last step is deterministic.
    pub fn step<T: Scalar>(&self, z: &Tensor<T>, eps: &Tensor<T>, t: usize, noise: &[T]) -> Result<Tensor<T>> {
        if t == 0 {
            return Err(Error::Invalid(
                "t = 0 is the terminal state; there is no step from z_0".into(),
            ));
        }
        if t > self.num_steps() {
            return Err(Error::Invalid(format!(
                "t = {t} beyond schedule of {} steps",
                self.num_steps()
            )));
        }
        if z.shape() != eps.shape() {
            return Err(Error::shape("z_t vs predicted noise", z.shape(), eps.shape()));
        }
        let i = t - 1;
        let (beta, alpha, ab) = (self.betas[i], self.alphas[i], self.alpha_bars[i]);
        let ab_prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        let sigma = if t > 1 {
            ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt()
        } else {
            0.0
        };
        if t > 1 && noise.len() != z.len() {
            return Err(Error::shape("step noise", &[noise.len()], z.shape()));
        }
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(k, (&zt, &e))| {
                let (zt, e) = (zt.widen(), e.widen());
                let mean = if self.clip_denoised {
                    let x0 = ((zt - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                    c0 * x0 + ct * zt
                } else {
                    (zt - beta / (1.0 - ab).sqrt() * e) / alpha.sqrt()
                };
                let n = if t > 1 { sigma * noise[k].widen() } else { 0.0 };
                T::narrow(mean + n)
            })
            .collect();
        let out = Tensor::new(z.shape().to_vec(), data)?;
        out.ensure_finite()?;
        Ok(out)
    }
}

/// Standard-normal tensor of `shape` from a seeded stream.
pub fn gaussian<T: Scalar>(shape: &[usize], seed: u64, stream: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::narrow(v)
    })
}

/// Stream reserved for the initial `z_T`; step `t` draws from stream `t`.
const INITIAL_STREAM: u64 = 0;

/// The starting latent `z_T` for a sampling chain.
pub fn initial_noise<T: Scalar>(model: &ToyModel<T>, seed: u64) -> Tensor<T> {
    let c = &model.config;
    gaussian(&[c.height, c.width, c.channels], seed, INITIAL_STREAM)
}

/// One ancestral step from `z_t`, with the model queried at index `t - 1`.
///
/// Returns `z_{t-1}` and the block maps the forward pass computed.
pub fn ddpm_step<T: Scalar>(
    model: &ToyModel<T>,
    z: &Tensor<T>,
    t: usize,
    text: &TextEmbedding<T>,
    schedule: &DiffusionSchedule,
    noise_seed: u64,
    hook: Option<&mut dyn AttentionHook<T>>,
) -> Result<(Tensor<T>, Vec<AttentionTensor<T>>)> {
    if t == 0 {
        return Err(Error::Invalid(
            "t = 0 is the terminal state; there is no step from z_0".into(),
        ));
    }
    let (eps, maps) = model.forward(z, t - 1, text, hook)?;
    let noise = step_noise::<T>(z.shape(), noise_seed, t);
    Ok((schedule.step(z, &eps, t, noise.data())?, maps))
}

/// Noise drawn for step `t` of the chain seeded by `seed`.
pub fn step_noise<T: Scalar>(shape: &[usize], seed: u64, t: usize) -> Tensor<T> {
    gaussian(shape, seed, t as u64)
}

/// Maps a latent in `[-1, 1]` to an image in `[0, 1]`.
pub fn latent_to_image<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    z.map(|v| {
        let x = (v.widen() + 1.0) * 0.5;
        T::narrow(x.clamp(0.0, 1.0))
    })
}

/// Full unguided chain from `z_T` to an image.
pub fn sample<T: Scalar>(
    model: &ToyModel<T>,
    schedule: &DiffusionSchedule,
    text: &TextEmbedding<T>,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut z = initial_noise(model, seed);
    for t in (1..=schedule.num_steps()).rev() {
        z = ddpm_step(model, &z, t, text, schedule, seed, None)?.0;
    }
    Ok(latent_to_image(&z))
}
