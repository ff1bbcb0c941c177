//! Noise-prediction training with minibatch SGD or Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ToySample;
use super::model::{Params, ToyModel};
use super::schedule::{gaussian, DiffusionSchedule};
use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain stochastic gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam with the usual `(0.9, 0.999, 1e-8)` constants.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Weight of the attention-grounding term; zero trains on the
    /// noise-prediction loss alone.
    pub grounding_weight: f64,
    pub grounded_tokens: GroundedTokens,
    /// Decay of an exponential moving average of the weights, which replaces
    /// the trained weights at the end; zero disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::Sgd,
            grounding_weight: 0.0,
            grounded_tokens: GroundedTokens::Concepts,
            ema_decay: 0.0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter update rule.
struct Stepper {
    kind: Optimizer,
    lr: f64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: i32,
}

impl Stepper {
    fn new<T: Scalar>(cfg: &TrainConfig, params: &Params<T>) -> Self {
        let moments = match cfg.optimizer {
            Optimizer::Sgd => Vec::new(),
            Optimizer::Adam => params
                .named()
                .iter()
                .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            moments,
            t: 0,
        }
    }

    /// Applies one update from gradients summed over `batch` examples.
    fn apply<T: Scalar>(&mut self, params: &mut Params<T>, grads: &mut Params<T>, batch: usize) {
        let inv = 1.0 / batch as f64;
        self.t += 1;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(self.t), 1.0 - ADAM_BETA2.powi(self.t));
        for (k, (w, g)) in params.tensors_mut().into_iter().zip(grads.tensors_mut()).enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv = T::narrow(wv.widen() - self.lr * inv * gv.widen());
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = &mut self.moments[k];
                    for (i, (wv, gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gv = gv.widen() * inv;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                        *wv = T::narrow(wv.widen() - step);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample noise-prediction loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.epoch_losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Image in `[0, 1]` to latent in `[-1, 1]`.
pub fn image_to_latent<T: Scalar>(image: &Tensor<f32>) -> Tensor<T> {
    image.map(|v| v * 2.0 - 1.0).cast()
}

/// A prompt token and the grid cells its attention should land on.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingTarget {
    pub token: usize,
    pub cells: Vec<usize>,
}

/// Which tokens the grounding term supervises.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundedTokens {
    /// Concept words only.
    #[default]
    Concepts,
    /// Concept words and the attribute bound to each.
    ConceptsAndAttributes,
}

/// Grounding targets of one training sample: each concept's drawn cells,
/// and optionally the same cells for its bound attribute.
pub fn grounding_targets(sample: &ToySample, tokens: GroundedTokens) -> Vec<GroundingTarget> {
    let mut out = Vec::new();
    for region in &sample.layout.regions {
        out.push(GroundingTarget {
            token: region.concept,
            cells: region.cells.clone(),
        });
        if tokens == GroundedTokens::ConceptsAndAttributes {
            if let Some(pair) = sample.prompt.pairs.iter().find(|p| p.concept == region.concept) {
                out.push(GroundingTarget {
                    token: pair.bound,
                    cells: region.cells.clone(),
                });
            }
        }
    }
    out
}

/// Optional attention-grounding term: for each target and block,
/// `weight · (1 − f)²` averaged over both, where `f` is the share of the
/// token's head-pooled cross-attention mass that falls on its cells.
#[derive(Debug, Clone, Copy)]
pub struct Grounding<'a> {
    pub weight: f64,
    pub targets: &'a [GroundingTarget],
}

impl Grounding<'_> {
    /// Loss and, per block, its gradient with respect to the pooled map.
    fn evaluate<T: Scalar>(&self, maps: &[AttentionTensor<T>]) -> (f64, Vec<Vec<f64>>) {
        let terms = (maps.len() * self.targets.len()).max(1) as f64;
        let mut loss = 0.0;
        let grads = maps
            .iter()
            .map(|map| {
                let l = map.tokens();
                let rows = map.rows();
                let mut g = vec![0.0; rows.len()];
                for c in self.targets {
                    let total: f64 = rows.chunks(l).map(|r| r[c.token].widen()).sum();
                    let inside: f64 = c.cells.iter().map(|&p| rows[p * l + c.token].widen()).sum();
                    let share = inside / total;
                    loss += self.weight * (1.0 - share).powi(2) / terms;
                    // d share / d A[p] = (1[p inside] − share) / total
                    let outer = -2.0 * self.weight * (1.0 - share) / terms / total;
                    for p in 0..map.positions() {
                        g[p * l + c.token] -= outer * share;
                    }
                    for &p in &c.cells {
                        g[p * l + c.token] += outer;
                    }
                }
                g
            })
            .collect();
        (loss, grads)
    }
}

/// Loss of one example, split into its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Mean squared noise-prediction error.
    pub denoise: f64,
    pub grounding: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.denoise + self.grounding
    }
}

/// Loss of one example and its gradient, accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad<T: Scalar>(
    model: &ToyModel<T>,
    x0: &Tensor<T>,
    tokens: &[usize],
    timestep: usize,
    noise: &Tensor<T>,
    schedule: &DiffusionSchedule,
    grounding: Option<Grounding<'_>>,
    grads: &mut Params<T>,
) -> Result<LossParts> {
    let text = model.embed_text(tokens)?;
    let z = Tensor::new(
        x0.shape().to_vec(),
        schedule.add_noise(x0.data(), noise.data(), timestep),
    )?;
    let (eps, maps, cache) = model.forward_cached(&z, timestep, &text)?;
    let n = eps.len() as f64;
    let mut denoise = 0.0;
    let grad: Vec<T> = eps
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&p, &e)| {
            let diff = p.widen() - e.widen();
            denoise += diff * diff;
            T::narrow(2.0 * diff / n)
        })
        .collect();
    let (grounding, grad_maps) = match grounding {
        Some(g) => {
            let (loss, grad_maps) = g.evaluate(&maps);
            (loss, Some(grad_maps))
        }
        None => (0.0, None),
    };
    model.backward(&cache, &text, &grad, grad_maps.as_deref(), grads);
    Ok(LossParts {
        denoise: denoise / n,
        grounding,
    })
}

/// Loss of one example without gradients.
pub fn loss<T: Scalar>(
    model: &ToyModel<T>,
    x0: &Tensor<T>,
    tokens: &[usize],
    timestep: usize,
    noise: &Tensor<T>,
    schedule: &DiffusionSchedule,
    grounding: Option<Grounding<'_>>,
) -> Result<LossParts> {
    let text = model.embed_text(tokens)?;
    let z = Tensor::new(
        x0.shape().to_vec(),
        schedule.add_noise(x0.data(), noise.data(), timestep),
    )?;
    let (eps, maps) = model.forward(&z, timestep, &text, None)?;
    let n = eps.len() as f64;
    let denoise = eps
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&p, &e)| (p.widen() - e.widen()).powi(2))
        .sum::<f64>()
        / n;
    Ok(LossParts {
        denoise,
        grounding: grounding.map_or(0.0, |g| g.evaluate(&maps).0),
    })
}

/// Trains in place and reports per-epoch mean losses.
///
/// Each example gets a fresh uniform timestep and Gaussian noise per epoch.
/// Everything random is drawn from `cfg.seed`.
pub fn train<T: Scalar>(
    model: &mut ToyModel<T>,
    dataset: &[ToySample],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if !(cfg.grounding_weight >= 0.0 && cfg.grounding_weight.is_finite()) {
        return Err(Error::Config(format!(
            "grounding_weight {} must be finite and >= 0",
            cfg.grounding_weight
        )));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::Config(format!("ema_decay {} must lie in [0, 1)", cfg.ema_decay)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if schedule.num_steps() > model.config.num_timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model only embeds {}",
            schedule.num_steps(),
            model.config.num_timesteps
        )));
    }
    let latents: Vec<Tensor<T>> = dataset.iter().map(|s| image_to_latent(&s.image)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let mut grads = model.params.zeros_like();
    let mut stepper = Stepper::new(cfg, &model.params);
    let mut ema: Option<Vec<Vec<f64>>> = (cfg.ema_decay > 0.0).then(|| {
        model
            .params
            .named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v.widen()).collect())
            .collect()
    });
    let shape = latents[0].shape().to_vec();
    let targets: Vec<Vec<GroundingTarget>> = if cfg.grounding_weight > 0.0 {
        dataset
            .iter()
            .map(|s| grounding_targets(s, cfg.grounded_tokens))
            .collect()
    } else {
        vec![Vec::new(); dataset.len()]
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for g in grads.tensors_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
            let mut batch_loss = 0.0;
            let mut batch_denoise = 0.0;
            for &i in batch {
                let timestep = rng.gen_range(0..schedule.num_steps());
                let noise = gaussian::<T>(&shape, rng.gen(), 0);
                let grounding = (cfg.grounding_weight > 0.0).then(|| Grounding {
                    weight: cfg.grounding_weight,
                    targets: &targets[i],
                });
                let parts = loss_and_grad(
                    model,
                    &latents[i],
                    &dataset[i].prompt.tokens,
                    timestep,
                    &noise,
                    schedule,
                    grounding,
                    &mut grads,
                )
                .map_err(|e| match e {
                    // Weights still finite but large enough to overflow activations.
                    Error::NonFinite { .. } => Error::Diverged {
                        step: report.steps,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
                batch_loss += parts.total();
                batch_denoise += parts.denoise;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss: batch_loss,
                });
            }
            stepper.apply(&mut model.params, &mut grads, batch.len());
            if model
                .params
                .tensors_mut()
                .iter()
                .any(|w| w.first_non_finite().is_some())
            {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss: batch_loss,
                });
            }
            if let Some(avg) = ema.as_mut() {
                let d = cfg.ema_decay;
                for (a, w) in avg.iter_mut().zip(model.params.tensors_mut()) {
                    for (av, wv) in a.iter_mut().zip(w.data()) {
                        *av = d * *av + (1.0 - d) * wv.widen();
                    }
                }
            }
            report.steps += 1;
            epoch_loss += batch_denoise;
        }
        let mean = epoch_loss / dataset.len() as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    if let Some(avg) = ema {
        for (a, w) in avg.iter().zip(model.params.tensors_mut()) {
            for (av, wv) in a.iter().zip(w.data_mut()) {
                *wv = T::narrow(*av);
            }
        }
    }
    Ok(report)
}
