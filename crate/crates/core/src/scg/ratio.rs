//! Ratio masks for fine-grained parts, and where the ratios come from: a
//! static table shipped with the crate or an external planning service.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::RatioSource;
use super::kmeans::grid_dims;
use crate::attention::ConceptMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Environment variable naming the planner endpoint.
pub const PLANNER_URL_ENV: &str = "SCG_PLANNER_URL";
/// Environment variable overriding the planner timeout, in milliseconds.
pub const PLANNER_TIMEOUT_ENV: &str = "SCG_PLANNER_TIMEOUT_MS";
pub const DEFAULT_PLANNER_TIMEOUT: Duration = Duration::from_secs(2);

const DEFAULT_TABLE: &str = include_str!("../../data/ratios.toml");

/// Marks the `max(1, round(ratio·h·w))` largest positions of an `(h, w)` map.
/// Equal values are taken in row-major order.
pub fn ratio_mask<T: Scalar>(
    avg_map: &Tensor<T>,
    ratio: f64,
    concept_token: usize,
    source_step: usize,
) -> Result<ConceptMask> {
    check_ratio(ratio)?;
    let (h, w) = grid_dims(avg_map)?;
    let n = h * w;
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    let values = avg_map.data();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps row-major order among equal values.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite attention"));
    let mut grid = vec![false; n];
    for &i in &order[..k] {
        grid[i] = true;
    }
    ConceptMask::new(concept_token, source_step, h, w, grid)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("ratio {ratio} outside (0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPlan {
    pub concept: String,
    pub part: String,
    pub ratio: f64,
}

/// `(concept, part) → ratio`, stored as TOML tables keyed by concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatioTable {
    entries: BTreeMap<String, BTreeMap<String, f64>>,
}

impl RatioTable {
    /// The table compiled into the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped ratio table is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, BTreeMap<String, f64>> =
            toml::from_str(text).map_err(|e| Error::Config(format!("ratio table: {e}")))?;
        for (concept, parts) in &entries {
            for (part, &ratio) in parts {
                check_ratio(ratio)
                    .map_err(|_| Error::Config(format!("ratio table: {concept}.{part} = {ratio} outside (0, 1]")))?;
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, concept: &str, part: &str) -> Option<f64> {
        self.entries.get(concept)?.get(part).copied()
    }

    pub fn insert(&mut self, concept: &str, part: &str, ratio: f64) -> Result<()> {
        check_ratio(ratio)?;
        self.entries
            .entry(concept.into())
            .or_default()
            .insert(part.into(), ratio);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannerEndpoint {
    pub url: String,
    pub timeout: Duration,
}

impl PlannerEndpoint {
    /// Reads [`PLANNER_URL_ENV`] and [`PLANNER_TIMEOUT_ENV`].
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(PLANNER_URL_ENV).ok().filter(|u| !u.is_empty())?;
        let timeout = std::env::var(PLANNER_TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(DEFAULT_PLANNER_TIMEOUT);
        Some(Self { url, timeout })
    }
}

/// A planner call that failed and was answered from the table instead.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerFallback {
    pub concept: String,
    pub part: String,
    pub reason: String,
}

#[derive(Serialize)]
struct PlanRequest<'a> {
    concept: &'a str,
    part: &'a str,
}

#[derive(Deserialize)]
struct PlanReply {
    ratio: f64,
}

/// Resolves part ratios. Shareable across sampling chains; requests to the
/// endpoint are serialized so at most one is in flight.
#[derive(Debug)]
pub struct RatioPlanner {
    table: RatioTable,
    endpoint: Option<PlannerEndpoint>,
    in_flight: Mutex<()>,
    fallbacks: Mutex<Vec<PlannerFallback>>,
}

impl Default for RatioPlanner {
    fn default() -> Self {
        Self::new(RatioTable::builtin(), None)
    }
}

impl RatioPlanner {
    pub fn new(table: RatioTable, endpoint: Option<PlannerEndpoint>) -> Self {
        Self {
            table,
            endpoint,
            in_flight: Mutex::new(()),
            fallbacks: Mutex::new(Vec::new()),
        }
    }

    pub fn table(&self) -> &RatioTable {
        &self.table
    }

    pub fn endpoint(&self) -> Option<&PlannerEndpoint> {
        self.endpoint.as_ref()
    }

    /// Table answers for `(concept, part)` that stood in for failed planner calls.
    pub fn fallbacks(&self) -> Vec<PlannerFallback> {
        self.fallbacks.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn plan_ratio(&self, concept: &str, part: &str, source: RatioSource) -> Result<RatioPlan> {
        let plan = |ratio| RatioPlan {
            concept: concept.into(),
            part: part.into(),
            ratio,
        };
        if source == RatioSource::ExternalPlanner {
            let reason = match &self.endpoint {
                None => "no planner endpoint configured".to_string(),
                Some(ep) => match self.query(ep, concept, part) {
                    Ok(ratio) => return Ok(plan(ratio)),
                    Err(reason) => reason,
                },
            };
            self.fallbacks
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(PlannerFallback {
                    concept: concept.into(),
                    part: part.into(),
                    reason,
                });
        }
        self.table
            .get(concept, part)
            .map(plan)
            .ok_or_else(|| Error::UnresolvedRatio {
                concept: concept.into(),
                part: part.into(),
            })
    }

    fn query(&self, ep: &PlannerEndpoint, concept: &str, part: &str) -> std::result::Result<f64, String> {
        let _guard = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        let agent = ureq::AgentBuilder::new().timeout(ep.timeout).build();
        let reply: PlanReply = agent
            .post(&ep.url)
            .send_json(PlanRequest { concept, part })
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| format!("malformed reply: {e}"))?;
        check_ratio(reply.ratio).map_err(|e| e.to_string())?;
        Ok(reply.ratio)
    }
}
