use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How concept masks are extracted from the layer-averaged attention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMethod {
    /// K-means for coarse and style prompts, planned ratio for fine ones.
    #[default]
    Auto,
    Kmeans,
    Ratio,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioSource {
    #[default]
    StaticTable,
    ExternalPlanner,
}

/// Model timestep indices at which guidance runs. Index `T - 1` is the first
/// denoising step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveSteps {
    /// Every index in `[0, T - 2]`: all steps except the first.
    #[default]
    AllButFirst,
    /// No guidance at all.
    None,
    /// Inclusive `[first, last]`.
    Range { first: usize, last: usize },
}

impl ActiveSteps {
    pub fn contains(&self, index: usize, num_steps: usize) -> bool {
        match *self {
            ActiveSteps::AllButFirst => index + 1 < num_steps,
            ActiveSteps::None => false,
            ActiveSteps::Range { first, last } => first <= index && index <= last,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// The factor `c` that attention to a bound token is multiplied by inside
    /// its concept's mask.
    pub amplification_factor: f64,
    pub mask_method: MaskMethod,
    /// Rescale each position's token vector back to sum 1 after amplifying.
    pub renormalize_rows: bool,
    pub active_steps: ActiveSteps,
    pub ratio_source: RatioSource,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            amplification_factor: 4.0,
            mask_method: MaskMethod::Auto,
            renormalize_rows: false,
            active_steps: ActiveSteps::AllButFirst,
            ratio_source: RatioSource::StaticTable,
        }
    }
}

impl GuidanceConfig {
    /// Guidance that changes nothing: `c = 1`.
    pub fn identity() -> Self {
        Self {
            amplification_factor: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        let c = self.amplification_factor;
        if !(c.is_finite() && c >= 1.0) {
            return Err(Error::Config(format!(
                "amplification_factor must be finite and >= 1, got {c}"
            )));
        }
        if let ActiveSteps::Range { first, last } = self.active_steps {
            if first > last || last >= num_steps {
                return Err(Error::Config(format!(
                    "active_steps [{first}, {last}] must be an ordered range within [0, {}]",
                    num_steps.saturating_sub(1)
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skips_only_the_first_step() {
        let a = ActiveSteps::default();
        assert!(a.contains(0, 50));
        assert!(a.contains(48, 50));
        assert!(!a.contains(49, 50));
        assert!(!ActiveSteps::None.contains(10, 50));
    }

    #[test]
    fn validation() {
        assert!(GuidanceConfig::default().validate(50).is_ok());
        let low = GuidanceConfig {
            amplification_factor: 0.5,
            ..GuidanceConfig::default()
        };
        assert!(low.validate(50).is_err());
        let out_of_range = GuidanceConfig {
            active_steps: ActiveSteps::Range { first: 3, last: 50 },
            ..GuidanceConfig::default()
        };
        assert!(out_of_range.validate(50).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg: GuidanceConfig = toml::from_str(
            "amplification_factor = 2.5\nmask_method = \"ratio\"\nactive_steps = { range = { first = 0, last = 9 } }\nratio_source = \"external-planner\"\n",
        )
        .unwrap();
        assert_eq!(cfg.amplification_factor, 2.5);
        assert_eq!(cfg.active_steps, ActiveSteps::Range { first: 0, last: 9 });
        assert_eq!(cfg.ratio_source, RatioSource::ExternalPlanner);
        let none: GuidanceConfig = toml::from_str("active_steps = \"none\"").unwrap();
        assert_eq!(none.active_steps, ActiveSteps::None);
    }
}
