//! The two-pass guided sampling loop.
//!
//! At every step an unguided forward pass yields the attention maps that the
//! next step's concept masks are cut from. A second, guided pass recomputes
//! the step with each block's cross-attention amplified inside the masks
//! carried over from the previous step, and that pass produces `z_{t-1}`.
//! The first step has no earlier masks, so it keeps the unguided result.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::apply::scg_apply;
use super::config::{GuidanceConfig, MaskMethod};
use super::kmeans::kmeans_mask;
use super::prompt::{BindingPrompt, Task};
use super::ratio::{ratio_mask, RatioPlanner};
use crate::attention::{average_attention_maps, AttentionTensor, ConceptMask};
use crate::error::{Error, Result};
use crate::image::write_pbm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::toy_dit::schedule::{initial_noise, latent_to_image, step_noise};
use crate::toy_dit::{DiffusionSchedule, ToyModel};

/// One mask per binding pair, from maps of a single step.
///
/// The concept token's slice is averaged over all layers, then split by
/// k-means (coarse and style prompts) or cut at the planned part ratio
/// (fine prompts), unless `cfg.mask_method` forces one of the two.
pub fn extract_masks<T: Scalar>(
    maps: &[AttentionTensor<T>],
    prompt: &BindingPrompt,
    cfg: &GuidanceConfig,
    planner: &RatioPlanner,
) -> Result<Vec<ConceptMask>> {
    let step = maps.first().ok_or(Error::Empty("attention maps"))?.step;
    let use_ratio = match cfg.mask_method {
        MaskMethod::Auto => prompt.task == Task::Fine,
        MaskMethod::Kmeans => false,
        MaskMethod::Ratio => true,
    };
    prompt
        .pairs
        .iter()
        .map(|pair| {
            let avg = average_attention_maps(maps, pair.concept)?;
            if use_ratio {
                let object = prompt.object.ok_or_else(|| {
                    Error::Invalid(format!("ratio masks need an object word in {:?}", prompt.raw_text))
                })?;
                let plan = planner.plan_ratio(prompt.word(object), prompt.word(pair.concept), cfg.ratio_source)?;
                ratio_mask(&avg, plan.ratio, pair.concept, step)
            } else {
                kmeans_mask(&avg, pair.concept, step)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceLevel {
    /// Masks and pass bookkeeping only.
    #[default]
    Masks,
    /// Also keep every attention map before and after amplification.
    Maps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceOptions {
    pub level: TraceLevel,
    /// Upper bound on the bytes of recorded maps; checked before sampling.
    pub byte_budget: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            level: TraceLevel::Masks,
            byte_budget: 256 << 20,
        }
    }
}

/// Which forward pass produced a step's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pass {
    Unguided,
    Guided,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T = f32> {
    /// Chain position: this step maps `z_t` to `z_{t-1}`.
    pub t: usize,
    /// Model timestep index, `t - 1`.
    pub timestep: usize,
    pub pass: Pass,
    /// Masks amplified at this step (extracted one step earlier).
    pub applied: Vec<ConceptMask>,
    /// Masks extracted from this step's unguided maps.
    pub extracted: Vec<ConceptMask>,
    /// Unguided maps, one per block, when maps are traced.
    pub pre_maps: Vec<AttentionTensor<T>>,
    /// The maps the guided pass actually used, when it ran and maps are traced.
    pub post_maps: Vec<AttentionTensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GuidanceTrace<T = f32> {
    /// In generation order, `t = T` first.
    pub steps: Vec<StepRecord<T>>,
}

impl<T: Scalar> GuidanceTrace<T> {
    pub fn guided_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.pass == Pass::Guided).count()
    }

    /// All unguided maps in generation order.
    pub fn pre_maps(&self) -> Vec<AttentionTensor<T>> {
        self.steps.iter().flat_map(|s| s.pre_maps.iter().cloned()).collect()
    }

    /// Writes each extracted mask as `step<t>_token<k>.pbm` under `dir`.
    pub fn export_masks(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for s in &self.steps {
            for m in &s.extracted {
                let path = dir.join(format!("step{:03}_token{}.pbm", s.timestep, m.concept_token));
                write_pbm(&path, m)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Samples an image for `prompt` with self-coherence guidance.
pub fn guided_sample<T: Scalar>(
    model: &ToyModel<T>,
    schedule: &DiffusionSchedule,
    prompt: &BindingPrompt,
    cfg: &GuidanceConfig,
    seed: u64,
    planner: &RatioPlanner,
    trace_opts: &TraceOptions,
) -> Result<(Tensor<T>, GuidanceTrace<T>)> {
    let num_steps = schedule.num_steps();
    cfg.validate(num_steps)?;
    prompt.validate()?;
    let keep_maps = trace_opts.level == TraceLevel::Maps;
    if keep_maps {
        let mc = &model.config;
        let per_map = mc.height * mc.width * prompt.tokens.len() * T::BYTES;
        let needed = 2 * num_steps * mc.num_blocks * per_map;
        if needed > trace_opts.byte_budget {
            return Err(Error::TraceOverflow {
                needed,
                budget: trace_opts.byte_budget,
            });
        }
    }
    let text = model.embed_text(&prompt.tokens)?;
    let c = T::narrow(cfg.amplification_factor);
    let mut z = initial_noise(model, seed);
    let mut trace = GuidanceTrace::default();
    let mut carried: Option<Vec<ConceptMask>> = None;

    for t in (1..=num_steps).rev() {
        let timestep = t - 1;
        let (eps_plain, maps) = model.forward(&z, timestep, &text, None)?;
        let mut record = StepRecord {
            t,
            timestep,
            pass: Pass::Unguided,
            applied: Vec::new(),
            extracted: Vec::new(),
            pre_maps: Vec::new(),
            post_maps: Vec::new(),
        };

        let mut eps = eps_plain;
        if let (Some(masks), true) = (&carried, cfg.active_steps.contains(timestep, num_steps)) {
            let pairs: Vec<(ConceptMask, usize)> = masks
                .iter()
                .cloned()
                .zip(prompt.pairs.iter().map(|p| p.bound))
                .collect();
            let mut used = Vec::new();
            let mut hook = |map: &AttentionTensor<T>| -> Result<Option<AttentionTensor<T>>> {
                let guided = scg_apply(map, &pairs, c, cfg.renormalize_rows)?;
                if keep_maps {
                    used.push(guided.clone());
                }
                Ok(Some(guided))
            };
            eps = model.forward(&z, timestep, &text, Some(&mut hook))?.0;
            record.pass = Pass::Guided;
            record.applied = masks.clone();
            record.post_maps = used;
        }

        // Masks for the next step, only when that step may be guided.
        carried = if timestep > 0 && cfg.active_steps.contains(timestep - 1, num_steps) {
            let masks = extract_masks(&maps, prompt, cfg, planner)?;
            record.extracted = masks.clone();
            Some(masks)
        } else {
            None
        };
        if keep_maps {
            record.pre_maps = maps;
        }
        trace.steps.push(record);

        let noise = step_noise::<T>(z.shape(), seed, t);
        z = schedule.step(&z, &eps, t, noise.data())?;
    }
    Ok((latent_to_image(&z), trace))
}
