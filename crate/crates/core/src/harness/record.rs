//! Run records, single runs and sweeps with per-record persistence.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::search::{nfe_estimate, run_search, AxisValue, Method, Solver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    pub problem: String,
    pub method: Method,
    pub solver: Solver,
    pub k: usize,
    pub b: usize,
    pub budget: usize,
    /// Lookahead steps; 0 for methods without lookahead.
    pub t_prime: usize,
    pub eta: f64,
    pub steps: usize,
    pub reward_kind: String,
    pub final_reward: Option<f64>,
    pub nfe: Option<u64>,
    pub nfe_expected: u64,
    pub non_finite_rewards: Option<usize>,
    pub wall_clock_s: f64,
    pub trace_path: Option<String>,
    pub error: Option<String>,
}

impl RunRecord {
    fn skeleton(cfg: &RunConfig) -> Self {
        let s = &cfg.search;
        let t_prime = if s.method == Method::DlbsLa {
            s.lookahead_steps
        } else {
            0
        };
        Self {
            config_hash: cfg.config_hash(),
            seed: s.seed,
            status: RunStatus::Failed,
            problem: cfg.problem.name.clone(),
            method: s.method,
            solver: s.solver,
            k: s.k,
            b: s.b,
            budget: s.k * s.b,
            t_prime,
            eta: s.eta,
            steps: cfg.schedule.steps,
            reward_kind: cfg.reward.kind().to_string(),
            final_reward: None,
            nfe: None,
            nfe_expected: nfe_estimate(s.method, s.k, s.b, cfg.schedule.steps, s.lookahead_steps, s.step_range),
            non_finite_rewards: None,
            wall_clock_s: 0.0,
            trace_path: None,
            error: None,
        }
    }

    pub fn failed(cfg: &RunConfig, err: &Error) -> Self {
        let mut r = Self::skeleton(cfg);
        r.error = Some(err.to_string());
        r
    }

    /// The record with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.json", self.config_hash, self.seed)
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("cannot start {workers:?} workers: {e}")))
}

fn execute(cfg: &RunConfig, trace_dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let problem = cfg.problem.resolve()?;
    let schedule = cfg.schedule.build()?;
    let reward = cfg.build_reward(&problem)?;
    let result = run_search(&cfg.search, &problem.mixture, &schedule, reward.as_ref())?;
    let mut rec = RunRecord::skeleton(cfg);
    rec.status = RunStatus::Ok;
    rec.final_reward = Some(result.best_reward);
    rec.nfe = Some(result.nfe);
    rec.non_finite_rewards = Some(result.non_finite_rewards);
    rec.wall_clock_s = result.wall_clock_s;
    if let (Some(trace), Some(dir)) = (&result.trace, trace_dir) {
        let name = format!("trace_{}_{}.json", rec.config_hash, rec.seed);
        write_json(&dir.join(&name), trace)?;
        rec.trace_path = Some(name);
    }
    Ok(rec)
}

/// Runs one search on `workers` threads. Traces go to `trace_dir` when the
/// configuration asks for them.
pub fn run_single(cfg: &RunConfig, workers: Option<usize>, trace_dir: Option<&Path>) -> Result<RunRecord> {
    thread_pool(workers)?.install(|| execute(cfg, trace_dir))
}

const SWEEP_AXES: [&str; 12] = [
    "problem",
    "steps",
    "reward_scale",
    "budget",
    "method",
    "solver",
    "k",
    "b",
    "lookahead_steps",
    "eta",
    "step_hi",
    "step_lo",
];

/// A sweep cell: the resolved configuration, or the reason it is invalid.
pub struct Cell {
    pub config: RunConfig,
    pub error: Option<Error>,
}

/// Cartesian product of the sweep axes and seeds, axes in name order and
/// seeds innermost.
pub fn expand_sweep(cfg: &RunConfig, seed_offset: u64) -> Result<Vec<Cell>> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    if let Some(name) = sweep.axes.keys().find(|n| !SWEEP_AXES.contains(&n.as_str())) {
        return Err(Error::Config(format!("unknown sweep axis `{name}`")));
    }
    if sweep.axes.values().any(Vec::is_empty) {
        return Err(Error::Config("sweep axes must list at least one value".into()));
    }
    let seeds: Vec<u64> = sweep
        .seed_list(cfg.search.seed)
        .into_iter()
        .map(|s| s + seed_offset)
        .collect();
    let mut combos: Vec<Vec<(&str, &AxisValue)>> = vec![Vec::new()];
    for (name, values) in &sweep.axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((name.as_str(), v));
                    c
                })
            })
            .collect();
    }
    let mut cells = Vec::with_capacity(combos.len() * seeds.len());
    for combo in &combos {
        for &seed in &seeds {
            let mut config = cfg.clone();
            config.sweep = None;
            config.ablation = None;
            config.search.seed = seed;
            let mut apply = || -> Result<()> {
                let mut budget = None;
                for (name, value) in combo {
                    if *name == "budget" {
                        budget = Some(value.as_usize(name)?);
                    } else {
                        config.set_axis(name, value)?;
                    }
                }
                if let Some(kb) = budget {
                    config.search.apply_budget(kb)?;
                }
                config.validate()
            };
            let error = apply().err();
            cells.push(Cell { config, error });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    /// Cells restored from earlier runs.
    pub resumed: usize,
    pub failed: usize,
    pub results_csv: PathBuf,
}

/// Runs a sweep into `out_dir`: one JSON file per run under `records/`,
/// written as each run completes, and `results.csv` rebuilt at the end.
/// With `resume`, cells whose record file already exists are not rerun.
pub fn run_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    workers: Option<usize>,
    seed_offset: u64,
    resume: bool,
) -> Result<SweepOutcome> {
    let cells = expand_sweep(cfg, seed_offset)?;
    let records_dir = out_dir.join("records");
    std::fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let pool = thread_pool(workers)?;
    let outcomes: Vec<(RunRecord, bool)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> Result<(RunRecord, bool)> {
                let name = format!("{}_{}.json", cell.config.config_hash(), cell.config.search.seed);
                let path = records_dir.join(&name);
                if resume && path.exists() {
                    if let Ok(rec) = read_record(&path) {
                        return Ok((rec, true));
                    }
                    log::warn!("unreadable record {}; rerunning", path.display());
                }
                let rec = match &cell.error {
                    Some(e) => RunRecord::failed(&cell.config, e),
                    None => execute(&cell.config, Some(&records_dir))
                        .unwrap_or_else(|e| RunRecord::failed(&cell.config, &e)),
                };
                if rec.status == RunStatus::Failed {
                    log::warn!("sweep cell {name} failed: {}", rec.error.as_deref().unwrap_or(""));
                }
                write_json(&path, &rec)?;
                Ok((rec, false))
            })
            .collect::<Result<_>>()
    })?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut resumed = 0;
    for (rec, was_resumed) in outcomes {
        if seen.insert((rec.config_hash.clone(), rec.seed)) {
            resumed += usize::from(was_resumed);
            records.push(rec);
        }
    }
    let failed = records.iter().filter(|r| r.status == RunStatus::Failed).count();
    let results_csv = out_dir.join("results.csv");
    write_records_csv(&results_csv, &records)?;
    Ok(SweepOutcome {
        records,
        resumed,
        failed,
        results_csv,
    })
}
