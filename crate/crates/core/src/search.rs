//! Inference-time search over the reverse process.
//!
//! Four strategies share one engine:
//!
//! - **Best-of-N** (`bon`): `B` independent chains, argmax at the end.
//! - **Greedy** (`greedy`): one beam, `K` candidates per step, keep the best.
//! - **DLBS** (`dlbs`): `B` beams, `K` candidates per beam, keep the top `B`
//!   of the `K * B` candidates by the reward of their one-jump clean estimate.
//! - **DLBS-LA** (`dlbs_la`): DLBS scoring candidates with a `T'`-step
//!   deterministic lookahead instead of the one-jump estimate.
//!
//! A selection round happens at every noisy step `s = T, ..., 1` inside the
//! configured step range: at `s = T` the candidates are `K * B` fresh
//! Gaussian draws, afterwards they are `K` noise draws around each beam's
//! transition mean. The last transition (to `t = 0`) is deterministic and the
//! final argmax over the `B` finished beams is the only selection there. Each
//! round spends `K * B` estimator calls on top of the `B` transition calls per
//! step, which gives the budget `T * (B + K * B * c)` with `c = 1` for the
//! one-jump estimate and `c = T'` for the lookahead.
//!
//! All noise comes from counter-based streams keyed by
//! `(seed, step, beam slot, candidate)`, and selected beams keep ascending
//! candidate order in their slots, so results do not depend on the number of
//! worker threads. With `K = 1` DLBS draws exactly the noise Best-of-N draws.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::cosine_similarity;
use crate::metrics::reward::Reward;
use crate::oracle::{CountingDenoiser, Denoiser, Latent};
use crate::rng::StreamKey;
use crate::sampler::{
    ddim_sample_candidates, ddim_transition_mean, dpmpp_jump_estimate, dpmpp_lookahead, dpmpp_sample_candidates,
    dpmpp_transition_mean, lookahead_estimate, tweedie_estimate, CleanEstimate, TransitionMean,
};
use crate::schedule::{ddim_noise_scale, dpm_coefficients, DdimNoiseScale, DpmCoefficients, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bon,
    Greedy,
    Dlbs,
    DlbsLa,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bon => "bon",
            Method::Greedy => "greedy",
            Method::Dlbs => "dlbs",
            Method::DlbsLa => "dlbs_la",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bon" => Ok(Method::Bon),
            "greedy" | "gs" => Ok(Method::Greedy),
            "dlbs" => Ok(Method::Dlbs),
            "dlbs_la" | "dlbs-la" => Ok(Method::DlbsLa),
            other => Err(Error::Config(format!("unknown search method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddim,
    Dpmpp,
}

impl Solver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Solver::Ddim => "ddim",
            Solver::Dpmpp => "dpmpp",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Solver::Ddim),
            "dpmpp" | "dpm++" => Ok(Solver::Dpmpp),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// Inclusive interval `[lo, hi]` of steps at which selection runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRange {
    pub hi: usize,
    pub lo: usize,
}

impl StepRange {
    pub fn contains(&self, step: usize) -> bool {
        self.lo <= step && step <= self.hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub method: Method,
    pub k: usize,
    pub b: usize,
    /// Lookahead steps `T'`; only read by `dlbs_la`.
    pub lookahead_steps: usize,
    pub eta: f64,
    pub solver: Solver,
    /// Defaults to the whole trajectory.
    pub step_range: Option<StepRange>,
    pub seed: u64,
    /// Record per-step candidate rewards and selections.
    pub trace: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            method: Method::Dlbs,
            k: 4,
            b: 4,
            lookahead_steps: 6,
            eta: 1.0,
            solver: Solver::Ddim,
            step_range: None,
            seed: 0,
            trace: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.b == 0 {
            return Err(Error::Config(format!(
                "search.k and search.b must be >= 1 (got k = {}, b = {})",
                self.k, self.b
            )));
        }
        if self.method == Method::Bon && self.k != 1 {
            return Err(Error::Config(format!(
                "search.k must be 1 for bon (got {}); use search.b for the number of chains",
                self.k
            )));
        }
        if self.method == Method::Greedy && self.b != 1 {
            return Err(Error::Config(format!("search.b must be 1 for greedy (got {})", self.b)));
        }
        if self.method == Method::DlbsLa && self.lookahead_steps == 0 {
            return Err(Error::Config("search.lookahead_steps must be >= 1 for dlbs_la".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "search.eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if let Some(r) = self.step_range {
            if r.hi < r.lo {
                return Err(Error::Config(format!(
                    "search.step_range must satisfy hi >= lo (got [{}, {}])",
                    r.hi, r.lo
                )));
            }
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.k * self.b
    }

    /// Fills the free dimension for a total candidate budget `K * B`.
    pub fn apply_budget(&mut self, budget: usize) -> Result<()> {
        if budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        match self.method {
            Method::Bon => {
                self.k = 1;
                self.b = budget;
            }
            Method::Greedy => {
                self.k = budget;
                self.b = 1;
            }
            Method::Dlbs | Method::DlbsLa => {
                if self.k == 0 || !budget.is_multiple_of(self.k) {
                    return Err(Error::Config(format!(
                        "budget {budget} is not a multiple of k = {}",
                        self.k
                    )));
                }
                self.b = budget / self.k;
            }
        }
        Ok(())
    }

    /// Sets one sweepable field by name.
    pub fn set_axis(&mut self, name: &str, value: &AxisValue) -> Result<()> {
        match name {
            "method" => self.method = value.as_str(name)?.parse()?,
            "solver" => self.solver = value.as_str(name)?.parse()?,
            "k" => self.k = value.as_usize(name)?,
            "b" => self.b = value.as_usize(name)?,
            "lookahead_steps" => self.lookahead_steps = value.as_usize(name)?,
            "eta" => self.eta = value.as_f64(name)?,
            "seed" => self.seed = value.as_usize(name)? as u64,
            "step_hi" => {
                let lo = self.step_range.map_or(1, |r| r.lo);
                self.step_range = Some(StepRange {
                    hi: value.as_usize(name)?,
                    lo,
                });
            }
            "step_lo" => {
                let hi = self.step_range.map_or(usize::MAX, |r| r.hi);
                self.step_range = Some(StepRange {
                    hi,
                    lo: value.as_usize(name)?,
                });
            }
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
        Ok(())
    }

    fn active_range(&self, steps: usize) -> StepRange {
        self.step_range.unwrap_or(StepRange { hi: steps, lo: 1 })
    }

    fn selects_at(&self, step: usize, steps: usize) -> bool {
        self.method != Method::Bon && step >= 1 && self.active_range(steps).contains(step)
    }
}

/// One value on a sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl AxisValue {
    pub fn as_usize(&self, name: &str) -> Result<usize> {
        match self {
            AxisValue::Int(i) if *i >= 0 => Ok(*i as usize),
            _ => Err(Error::Config(format!(
                "axis `{name}` expects a nonnegative integer, got {self}"
            ))),
        }
    }

    pub fn as_f64(&self, name: &str) -> Result<f64> {
        match self {
            AxisValue::Int(i) => Ok(*i as f64),
            AxisValue::Float(f) => Ok(*f),
            AxisValue::Text(_) => Err(Error::Config(format!("axis `{name}` expects a number, got {self}"))),
        }
    }

    pub fn as_str(&self, name: &str) -> Result<&str> {
        match self {
            AxisValue::Text(s) => Ok(s),
            _ => Err(Error::Config(format!("axis `{name}` expects a string, got {self}"))),
        }
    }
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Int(i) => write!(f, "{i}"),
            AxisValue::Float(x) => write!(f, "{x}"),
            AxisValue::Text(s) => write!(f, "{s}"),
        }
    }
}

/// Candidate rewards and selections at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub candidate_rewards: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_sample: Latent,
    pub best_reward: f64,
    pub final_beams: Vec<Latent>,
    pub final_rewards: Vec<f64>,
    pub nfe: u64,
    pub non_finite_rewards: usize,
    pub wall_clock_s: f64,
    pub trace: Option<Vec<StepTrace>>,
}

/// Greedy top-`B` selection without replacement: repeatedly take the
/// highest remaining reward, ties going to the lowest candidate index.
/// Returns indices in selection order.
pub fn select_top_b(rewards: &[f64], b: usize) -> Result<Vec<usize>> {
    if rewards.len() < b {
        return Err(Error::Config(format!(
            "cannot select {b} beams from {} candidates",
            rewards.len()
        )));
    }
    let mut taken = vec![false; rewards.len()];
    let mut out = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best: Option<usize> = None;
        for (i, r) in rewards.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                Some(j) if rewards[j].total_cmp(r).is_ge() => {}
                _ => best = Some(i),
            }
        }
        let j = best.expect("enough candidates remain");
        taken[j] = true;
        out.push(j);
    }
    Ok(out)
}

/// Denoiser evaluations a search with these settings spends.
pub fn nfe_estimate(
    method: Method,
    k: usize,
    b: usize,
    steps: usize,
    lookahead_steps: usize,
    step_range: Option<StepRange>,
) -> u64 {
    let transitions = (steps * b) as u64;
    if method == Method::Bon {
        return transitions;
    }
    let range = step_range.unwrap_or(StepRange { hi: steps, lo: 1 });
    let rounds = (1..=steps).filter(|&s| range.contains(s)).count() as u64;
    let per_candidate = if method == Method::DlbsLa { lookahead_steps } else { 1 } as u64;
    transitions + rounds * (k * b) as u64 * per_candidate
}

enum Kernel {
    Ddim(DdimNoiseScale),
    Dpmpp(DpmCoefficients),
}

struct Engine<'a> {
    config: &'a SearchConfig,
    denoiser: &'a dyn Denoiser,
    schedule: &'a NoiseSchedule,
    kernel: Kernel,
    reward: &'a dyn Reward,
}

impl Engine<'_> {
    fn transition(&self, z: &Latent) -> Result<TransitionMean> {
        match &self.kernel {
            Kernel::Ddim(noise) => ddim_transition_mean(z, self.denoiser, self.schedule, noise),
            Kernel::Dpmpp(dpm) => dpmpp_transition_mean(z, z.step - 1, self.denoiser, dpm),
        }
    }

    fn candidates(&self, mean: &TransitionMean, k: usize, beam: usize) -> Vec<Latent> {
        match &self.kernel {
            Kernel::Ddim(noise) => {
                ddim_sample_candidates(mean, noise.sigma[mean.source_step], k, self.config.seed, beam)
            }
            Kernel::Dpmpp(dpm) => dpmpp_sample_candidates(mean, dpm, k, self.config.seed, beam),
        }
    }

    fn estimate(&self, z: &Latent) -> Result<CleanEstimate> {
        let la = self.config.method == Method::DlbsLa;
        let t_prime = self.config.lookahead_steps;
        match (&self.kernel, la) {
            (Kernel::Ddim(_), false) => tweedie_estimate(z, self.denoiser, self.schedule),
            (Kernel::Ddim(_), true) => lookahead_estimate(z, t_prime, self.denoiser, self.schedule),
            (Kernel::Dpmpp(dpm), false) => dpmpp_jump_estimate(z, 0, self.denoiser, dpm),
            (Kernel::Dpmpp(dpm), true) => dpmpp_lookahead(z, 0, t_prime, self.denoiser, dpm),
        }
    }

    fn score(&self, x: &[f64], non_finite: &mut usize) -> f64 {
        let r = self.reward.reward(x);
        if r.is_finite() {
            r
        } else {
            *non_finite += 1;
            log::warn!("non-finite reward {r}; treating the candidate as -inf");
            f64::NEG_INFINITY
        }
    }

    /// Scores `pool` (grouped as `B` slots of `K`), keeps the top `B` in
    /// ascending candidate order.
    fn select(
        &self,
        pool: Vec<Latent>,
        non_finite: &mut usize,
        trace: &mut Option<Vec<StepTrace>>,
    ) -> Result<Vec<Latent>> {
        let step = pool[0].step;
        let estimates: Vec<CleanEstimate> = pool.par_iter().map(|z| self.estimate(z)).collect::<Result<_>>()?;
        let rewards: Vec<f64> = estimates
            .iter()
            .map(|e| self.score(&e.value.values, non_finite))
            .collect();
        let mut chosen = select_top_b(&rewards, self.config.b)?;
        if let Some(t) = trace {
            t.push(StepTrace {
                step,
                candidate_rewards: rewards.clone(),
                selected: chosen.clone(),
            });
        }
        chosen.sort_unstable();
        let mut pool: Vec<Option<Latent>> = pool.into_iter().map(Some).collect();
        Ok(chosen
            .into_iter()
            .map(|i| pool[i].take().expect("selected once"))
            .collect())
    }
}

/// Runs one search and audits its denoiser budget.
pub fn run_search(
    config: &SearchConfig,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    reward: &dyn Reward,
) -> Result<SearchResult> {
    config.validate()?;
    let started = Instant::now();
    let steps = schedule.steps();
    let counter = CountingDenoiser::new(denoiser);
    let kernel = match config.solver {
        Solver::Ddim => Kernel::Ddim(ddim_noise_scale(schedule, config.eta)?),
        Solver::Dpmpp => Kernel::Dpmpp(dpm_coefficients(schedule)?),
    };
    let engine = Engine {
        config,
        denoiser: &counter,
        schedule,
        kernel,
        reward,
    };
    let (k, b, dim) = (config.k, config.b, denoiser.dim());
    let mut non_finite = 0;
    let mut trace = config.trace.then(Vec::new);

    let mut beams = if config.selects_at(steps, steps) {
        let pool: Vec<Latent> = (0..b)
            .flat_map(|j| (0..k).map(move |i| (j, i)))
            .map(|(j, i)| Latent::new(StreamKey::new(config.seed, steps, j, i).standard_normal(dim), steps))
            .collect();
        engine.select(pool, &mut non_finite, &mut trace)?
    } else {
        (0..b)
            .map(|j| Latent::new(StreamKey::new(config.seed, steps, j, 0).standard_normal(dim), steps))
            .collect()
    };

    for t in (1..=steps).rev() {
        let means: Vec<TransitionMean> = beams.par_iter().map(|z| engine.transition(z)).collect::<Result<_>>()?;
        let next = t - 1;
        beams = if next == 0 {
            means.into_iter().map(|m| m.latent).collect()
        } else if config.selects_at(next, steps) {
            let pool: Vec<Latent> = means
                .iter()
                .enumerate()
                .flat_map(|(j, m)| engine.candidates(m, k, j))
                .collect();
            engine.select(pool, &mut non_finite, &mut trace)?
        } else {
            means
                .iter()
                .enumerate()
                .map(|(j, m)| engine.candidates(m, 1, j).remove(0))
                .collect()
        };
    }

    let final_rewards: Vec<f64> = beams.iter().map(|z| engine.score(&z.values, &mut non_finite)).collect();
    let best = select_top_b(&final_rewards, 1)?[0];
    Ok(SearchResult {
        best_sample: beams[best].clone(),
        best_reward: final_rewards[best],
        final_beams: beams,
        final_rewards,
        nfe: counter.calls(),
        non_finite_rewards: non_finite,
        wall_clock_s: started.elapsed().as_secs_f64(),
        trace,
    })
}

/// Expands a base configuration over the Cartesian product of `axes` and
/// `seeds`. A `budget` axis is applied last via [`SearchConfig::apply_budget`].
/// Unknown axis names fail before anything is expanded.
pub fn expand_grid(
    base: &SearchConfig,
    axes: &[(String, Vec<AxisValue>)],
    seeds: &[u64],
) -> Result<Vec<Result<SearchConfig>>> {
    const KNOWN: [&str; 10] = [
        "method",
        "solver",
        "k",
        "b",
        "lookahead_steps",
        "eta",
        "seed",
        "step_hi",
        "step_lo",
        "budget",
    ];
    if let Some((name, _)) = axes.iter().find(|(n, _)| !KNOWN.contains(&n.as_str())) {
        return Err(Error::Config(format!("unknown sweep axis `{name}`")));
    }
    let mut cells: Vec<Vec<(&str, &AxisValue)>> = vec![Vec::new()];
    for (name, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((name.as_str(), v));
                    c
                })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(cells.len() * seeds.len());
    for cell in &cells {
        for &seed in seeds {
            let build = || -> Result<SearchConfig> {
                let mut cfg = base.clone();
                let mut budget = None;
                for (name, value) in cell {
                    if *name == "budget" {
                        budget = Some(value.as_usize(name)?);
                    } else {
                        cfg.set_axis(name, value)?;
                    }
                }
                if let Some(kb) = budget {
                    cfg.apply_budget(kb)?;
                }
                cfg.seed = seed;
                cfg.validate()?;
                Ok(cfg)
            };
            out.push(build());
        }
    }
    Ok(out)
}

/// Runs every cell of [`expand_grid`] in order. Invalid cells surface as errors
/// in their slot; the other cells still run.
pub fn sweep(
    base: &SearchConfig,
    axes: &[(String, Vec<AxisValue>)],
    seeds: &[u64],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    reward: &dyn Reward,
) -> Result<Vec<Result<SearchResult>>> {
    let cells = expand_grid(base, axes, seeds)?;
    Ok(cells
        .into_par_iter()
        .map(|cfg| cfg.and_then(|c| run_search(&c, denoiser, schedule, reward)))
        .collect())
}

/// Mean pairwise `1 - cos` over ordered pairs of embedded samples.
pub fn diversity_of_results<F>(samples: &[Latent], embed: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = samples.len();
    if n < 2 {
        return Err(Error::Domain(format!("diversity needs at least 2 samples, got {n}")));
    }
    let emb: Vec<Vec<f64>> = samples.iter().map(|s| embed(&s.values)).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += 1.0 - cosine_similarity(&emb[i], &emb[j])?;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::reward::ModeDistance;
    use crate::oracle::preset;
    use crate::schedule::linear_beta_schedule;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        linear_beta_schedule(1e-4, 2e-2, 1000).unwrap().strided(50).unwrap()
    }

    #[test]
    fn top_b_examples() {
        assert_eq!(select_top_b(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_b(&[5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert!(select_top_b(&[1.0], 2).is_err());
        assert_eq!(
            select_top_b(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0], 2).unwrap(),
            vec![2, 0]
        );
    }

    proptest! {
        #[test]
        fn top_b_matches_sort_oracle(rewards in prop::collection::vec(-5i32..5, 1..40), b in 1usize..40) {
            let rewards: Vec<f64> = rewards.into_iter().map(f64::from).collect();
            prop_assume!(b <= rewards.len());
            let mut idx: Vec<usize> = (0..rewards.len()).collect();
            idx.sort_by(|&i, &j| rewards[j].total_cmp(&rewards[i]).then(i.cmp(&j)));
            idx.truncate(b);
            prop_assert_eq!(select_top_b(&rewards, b).unwrap(), idx);
        }
    }

    #[test]
    fn nfe_table_values() {
        assert_eq!(nfe_estimate(Method::Bon, 1, 64, 50, 0, None), 3200);
        assert_eq!(nfe_estimate(Method::Dlbs, 2, 8, 50, 0, None), 1200);
        assert_eq!(nfe_estimate(Method::Dlbs, 2, 16, 50, 0, None), 2400);
        assert_eq!(nfe_estimate(Method::DlbsLa, 4, 2, 50, 6, None), 2500);
        let range = Some(StepRange { hi: 50, lo: 41 });
        assert_eq!(nfe_estimate(Method::Dlbs, 2, 8, 50, 0, range), 400 + 10 * 16);
    }

    #[test]
    fn config_validation() {
        let mut c = SearchConfig {
            method: Method::Bon,
            k: 2,
            b: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.k = 1;
        assert!(c.validate().is_ok());
        let g = SearchConfig {
            method: Method::Greedy,
            k: 8,
            b: 2,
            ..Default::default()
        };
        assert!(g.validate().is_err());
        let e = SearchConfig {
            eta: 1.2,
            ..Default::default()
        };
        assert!(e.validate().is_err());
        let r = SearchConfig {
            step_range: Some(StepRange { hi: 3, lo: 5 }),
            ..Default::default()
        };
        assert!(r.validate().is_err());
    }

    #[test]
    fn budget_fills_the_free_dimension() {
        let mut c = SearchConfig {
            method: Method::Bon,
            ..Default::default()
        };
        c.apply_budget(16).unwrap();
        assert_eq!((c.k, c.b), (1, 16));
        c.method = Method::Greedy;
        c.apply_budget(16).unwrap();
        assert_eq!((c.k, c.b), (16, 1));
        c.method = Method::Dlbs;
        c.k = 4;
        c.apply_budget(32).unwrap();
        assert_eq!((c.k, c.b), (4, 8));
        c.k = 3;
        assert!(c.apply_budget(32).is_err());
    }

    #[test]
    fn audited_counter_matches_estimate() {
        let p = preset("bimodal-1d").unwrap();
        let reward = ModeDistance::new(p.target.clone(), 1.0);
        let s = sched();
        for method in [Method::Bon, Method::Greedy, Method::Dlbs, Method::DlbsLa] {
            for solver in [Solver::Ddim, Solver::Dpmpp] {
                let (k, b) = match method {
                    Method::Bon => (1, 3),
                    Method::Greedy => (5, 1),
                    _ => (2, 3),
                };
                for range in [None, Some(StepRange { hi: 30, lo: 10 })] {
                    let cfg = SearchConfig {
                        method,
                        k,
                        b,
                        solver,
                        step_range: range,
                        lookahead_steps: 4,
                        ..Default::default()
                    };
                    let r = run_search(&cfg, &p.mixture, &s, &reward).unwrap();
                    assert_eq!(
                        r.nfe,
                        nfe_estimate(method, k, b, 50, 4, range),
                        "{method:?} {solver:?} {range:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn best_reward_is_recomputed_max() {
        let p = preset("ring-8").unwrap();
        let reward = ModeDistance::new(p.target.clone(), 1.0);
        let cfg = SearchConfig {
            k: 3,
            b: 4,
            seed: 5,
            ..Default::default()
        };
        let r = run_search(&cfg, &p.mixture, &sched(), &reward).unwrap();
        let recomputed = reward.reward(&r.best_sample.values);
        assert!((recomputed - r.best_reward).abs() < 1e-12);
        let max = r.final_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max, r.best_reward);
        assert_eq!(r.best_sample.step, 0);
    }

    #[test]
    fn k_one_dlbs_matches_best_of_n() {
        let p = preset("ring-8").unwrap();
        let reward = ModeDistance::new(p.target.clone(), 1.0);
        for seed in 0..5 {
            let bon = SearchConfig {
                method: Method::Bon,
                k: 1,
                b: 6,
                seed,
                ..Default::default()
            };
            let dlbs = SearchConfig {
                method: Method::Dlbs,
                k: 1,
                b: 6,
                seed,
                ..Default::default()
            };
            let a = run_search(&bon, &p.mixture, &sched(), &reward).unwrap();
            let b = run_search(&dlbs, &p.mixture, &sched(), &reward).unwrap();
            assert_eq!(a.final_beams, b.final_beams);
            assert_eq!(a.best_sample, b.best_sample);
        }
    }

    struct Nan;
    impl Reward for Nan {
        fn reward(&self, x: &[f64]) -> f64 {
            if x[0] > 0.0 {
                f64::NAN
            } else {
                x[0]
            }
        }
    }

    #[test]
    fn non_finite_rewards_degrade_gracefully() {
        let p = preset("bimodal-1d").unwrap();
        let cfg = SearchConfig {
            k: 2,
            b: 2,
            ..Default::default()
        };
        let r = run_search(&cfg, &p.mixture, &sched(), &Nan).unwrap();
        assert!(r.non_finite_rewards > 0);
    }

    #[test]
    fn trace_records_every_round() {
        let p = preset("bimodal-1d").unwrap();
        let reward = ModeDistance::new(p.target.clone(), 1.0);
        let cfg = SearchConfig {
            k: 2,
            b: 2,
            trace: true,
            ..Default::default()
        };
        let r = run_search(&cfg, &p.mixture, &sched(), &reward).unwrap();
        let trace = r.trace.unwrap();
        assert_eq!(trace.len(), 50);
        assert_eq!(trace[0].step, 50);
        assert_eq!(trace.last().unwrap().step, 1);
        assert!(trace
            .iter()
            .all(|t| t.candidate_rewards.len() == 4 && t.selected.len() == 2));
    }

    #[test]
    fn grid_expansion() {
        let base = SearchConfig::default();
        let axes = vec![(
            "k".to_string(),
            vec![AxisValue::Int(1), AxisValue::Int(2), AxisValue::Int(4)],
        )];
        let cells = expand_grid(&base, &axes, &[0, 1]).unwrap();
        assert_eq!(cells.len(), 6);
        let bad = vec![("kk".to_string(), vec![AxisValue::Int(1)])];
        assert!(expand_grid(&base, &bad, &[0]).is_err());
    }

    #[test]
    fn fixed_budget_k_sweep_shape() {
        let base = SearchConfig::default();
        let ks: Vec<AxisValue> = [1, 2, 4, 8, 16, 32].iter().map(|&k| AxisValue::Int(k)).collect();
        let axes = vec![("k".to_string(), ks), ("budget".to_string(), vec![AxisValue::Int(32)])];
        let cells = expand_grid(&base, &axes, &[0]).unwrap();
        let kb: Vec<(usize, usize)> = cells
            .iter()
            .map(|c| {
                let c = c.as_ref().unwrap();
                (c.k, c.b)
            })
            .collect();
        assert_eq!(kb, vec![(1, 32), (2, 16), (4, 8), (8, 4), (16, 2), (32, 1)]);
    }

    #[test]
    fn diversity_examples() {
        let id = |x: &[f64]| x.to_vec();
        let same = vec![Latent::new(vec![1.0, 0.0], 0); 3];
        assert!(diversity_of_results(&same, id).unwrap().abs() < 1e-15);
        let orth = vec![Latent::new(vec![1.0, 0.0], 0), Latent::new(vec![0.0, 1.0], 0)];
        assert!((diversity_of_results(&orth, id).unwrap() - 1.0).abs() < 1e-15);
        let three = vec![
            Latent::new(vec![1.0, 0.0], 0),
            Latent::new(vec![1.0, 0.0], 0),
            Latent::new(vec![0.0, 1.0], 0),
        ];
        assert!((diversity_of_results(&three, id).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(diversity_of_results(&three[..1], id).is_err());
        let zero = vec![Latent::new(vec![0.0, 0.0], 0), Latent::new(vec![1.0, 0.0], 0)];
        assert!(diversity_of_results(&zero, id).is_err());
    }
}
