//! Run configuration: one TOML file with `problem`, `schedule`, `search`,
//! `reward`, `output` and optional `sweep` and `ablation` sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::reward::{Reward, RewardSpec};
use crate::oracle::{preset, GaussianMixture};
use crate::schedule::{linear_beta_schedule, NoiseSchedule};
use crate::search::{AxisValue, SearchConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// A preset name, or a label when `mixture` is given.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<GaussianMixture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            name: "ring-8".into(),
            mixture: None,
            target: None,
        }
    }
}

/// A resolved problem: data mixture plus the target point used by rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub name: String,
    pub mixture: GaussianMixture,
    pub target: Vec<f64>,
}

impl ProblemSection {
    pub fn resolve(&self) -> Result<Problem> {
        let (mixture, default_target) = match &self.mixture {
            Some(m) => (m.clone(), None),
            None => {
                let p = preset(&self.name)?;
                (p.mixture, Some(p.target))
            }
        };
        let target = self
            .target
            .clone()
            .or(default_target)
            .ok_or_else(|| Error::Config("problem.target is required with a custom mixture".into()))?;
        if target.len() != mixture.dim() {
            return Err(Error::Config(format!(
                "problem.target has length {}, the mixture has dimension {}",
                target.len(),
                mixture.dim()
            )));
        }
        Ok(Problem {
            name: self.name.clone(),
            mixture,
            target,
        })
    }
}

/// Linear-beta training schedule strided to `steps` sampling steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 2e-2,
            train_steps: 1000,
            steps: 50,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.beta_start, self.beta_end, self.train_steps)?.strided(self.steps)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Explicit seeds; takes precedence over `seed_count`.
    pub seeds: Option<Vec<u64>>,
    /// Seeds `0..seed_count`.
    pub seed_count: Option<u64>,
    /// Axis name to values. Besides the search fields, `problem`, `steps` and
    /// `budget` are accepted.
    pub axes: BTreeMap<String, Vec<AxisValue>>,
}

impl SweepSection {
    pub fn seed_list(&self, fallback: u64) -> Vec<u64> {
        match (&self.seeds, self.seed_count) {
            (Some(s), _) => s.clone(),
            (None, Some(n)) => (0..n).collect(),
            (None, None) => vec![fallback],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub t_primes: Vec<usize>,
    /// Noisy latents per problem for the estimation-error curve.
    pub latents: usize,
    /// Step at which those latents are drawn.
    pub entry_step: usize,
    /// Seeds for the end-to-end reward curve.
    pub seeds: u64,
    /// Problems to ablate; defaults to `problem.name`.
    pub problems: Option<Vec<String>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            t_primes: vec![1, 2, 3, 6, 12],
            latents: 200,
            entry_step: 30,
            seeds: 20,
            problems: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

/// 1-based line of `key = ...` inside `[section]`, if present.
fn line_of(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn field_of(message: &str) -> Option<(&str, &str)> {
    let start = message.find(|c: char| c.is_ascii_lowercase())?;
    let word = message[start..].split_whitespace().next()?;
    let (section, key) = word.split_once('.')?;
    Some((
        section,
        key.trim_end_matches(|c: char| !c.is_ascii_alphanumeric() && c != '_'),
    ))
}

impl RunConfig {
    pub fn from_toml_str(source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(source).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => {
                let line = field_of(&msg).and_then(|(s, k)| line_of(source, s, k));
                match line {
                    Some(l) => Error::Config(format!("line {l}: {msg}")),
                    None => Error::Config(msg),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.search.validate().map_err(|e| match e {
            Error::Config(msg) if !msg.starts_with("search.") => Error::Config(format!("search: {msg}")),
            other => other,
        })?;
        let problem = self.problem.resolve()?;
        self.reward.build(&problem.mixture, &problem.target)?;
        let s = &self.schedule;
        if s.steps == 0 || s.steps > s.train_steps {
            return Err(Error::Config(format!(
                "schedule.steps must lie in 1..={} (got {})",
                s.train_steps, s.steps
            )));
        }
        s.build()?;
        if let Some(r) = self.search.step_range {
            if r.lo == 0 || r.hi > s.steps {
                return Err(Error::Config(format!(
                    "search.step_range must lie within [1, {}] (got [{}, {}])",
                    s.steps, r.hi, r.lo
                )));
            }
        }
        Ok(())
    }

    /// The parts that identify a cell: everything except output location,
    /// sweep/ablation plans and the seed.
    pub fn canonical_value(&self) -> serde_json::Value {
        let mut search = self.search.clone();
        search.seed = 0;
        let v = serde_json::json!({
            "problem": self.problem,
            "schedule": self.schedule,
            "search": search,
            "reward": self.reward,
        });
        sort_keys(v)
    }

    /// SHA-256 of the canonical JSON rendering, hex encoded.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical_value()).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn build_reward(&self, problem: &Problem) -> Result<Box<dyn Reward>> {
        self.reward.build(&problem.mixture, &problem.target)
    }

    /// Applies one sweep axis.
    pub fn set_axis(&mut self, name: &str, value: &AxisValue) -> Result<()> {
        match name {
            "problem" => {
                self.problem = ProblemSection {
                    name: value.as_str(name)?.to_string(),
                    mixture: None,
                    target: None,
                };
            }
            "steps" => self.schedule.steps = value.as_usize(name)?,
            "reward_scale" => match &mut self.reward {
                RewardSpec::ModeDistance { scale, .. } | RewardSpec::Linear { scale, .. } => {
                    *scale = value.as_f64(name)?
                }
                RewardSpec::ComponentPreference { .. } => {
                    return Err(Error::Config(
                        "reward_scale does not apply to component_preference".into(),
                    ))
                }
            },
            other => self.search.set_axis(other, value)?,
        }
        Ok(())
    }
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}
