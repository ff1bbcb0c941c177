//! The run configuration file and seed sets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use scg_core::scg::GuidanceConfig;
use scg_core::toy_dit::{DatasetConfig, ModelConfig, ScheduleConfig, TrainConfig};

use crate::error::CliError;

/// Seeds to sample, in order. Written as `"0..63"` (inclusive), `"1,5,9"`,
/// a single number, or a TOML array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SeedsRepr", into = "String")]
pub struct Seeds(Vec<u64>);

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedsRepr {
    List(Vec<u64>),
    One(u64),
    Text(String),
}

impl TryFrom<SeedsRepr> for Seeds {
    type Error = String;

    fn try_from(repr: SeedsRepr) -> Result<Self, String> {
        match repr {
            SeedsRepr::List(v) => Seeds::new(v),
            SeedsRepr::One(s) => Seeds::new(vec![s]),
            SeedsRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Seeds> for String {
    fn from(s: Seeds) -> String {
        s.to_string()
    }
}

impl Seeds {
    pub fn new(seeds: Vec<u64>) -> Result<Self, String> {
        if seeds.is_empty() {
            return Err("seed set is empty".into());
        }
        Ok(Self(seeds))
    }

    pub fn range(first: u64, last: u64) -> Self {
        Self((first..=last).collect())
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::range(0, 3)
    }
}

impl FromStr for Seeds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
        if let Some((a, b)) = s.split_once("..") {
            let (first, last) = (num(a)?, num(b.trim_start_matches('='))?);
            if first > last {
                return Err(format!("seed range {s:?} runs backwards"));
            }
            return Ok(Self::range(first, last));
        }
        Seeds::new(
            s.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(num)
                .collect::<Result<_, _>>()?,
        )
    }
}

impl fmt::Display for Seeds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = &self.0;
        let contiguous = v.windows(2).all(|w| w[1] == w[0] + 1);
        if v.len() > 1 && contiguous {
            write!(f, "{}..{}", v[0], v[v.len() - 1])
        } else {
            let parts: Vec<String> = v.iter().map(u64::to_string).collect();
            write!(f, "{}", parts.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TraceVerbosity {
    /// Images only.
    #[default]
    Off,
    /// Also every extracted concept mask as PBM.
    Masks,
    /// Also the unguided attention maps of every step, as a dump file.
    Maps,
}

/// Everything one run needs. Every section is optional in the file.
///
/// The model's grid size, channel count and vocabulary come from the dataset
/// section when training; `model` sets only depth, width and the like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub trace: TraceVerbosity,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("out/toy.ckpt"),
            output_dir: PathBuf::from("out"),
            seeds: Seeds::default(),
            trace: TraceVerbosity::Off,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// The file at `path`, or defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Paper-parity sampling: 64 seeds, 50 steps, `c = 4`.
    pub fn apply_paper_preset(&mut self) {
        self.seeds = Seeds::range(0, 63);
        self.schedule.num_steps = 50;
        self.guidance.amplification_factor = 4.0;
    }

    /// The model section with the grid and vocabulary the dataset implies.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            height: self.dataset.height,
            width: self.dataset.width,
            channels: 3,
            vocab_size: self.dataset.vocab().len(),
            num_timesteps: self.model.num_timesteps.max(self.schedule.num_steps),
            ..self.model.clone()
        }
    }
}
