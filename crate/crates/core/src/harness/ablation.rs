//! Lookahead ablation: estimator error against the deterministic endpoint and
//! end-to-end DLBS-LA reward, per lookahead length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Problem, RunConfig};
use crate::harness::report::mean_stderr;
use crate::oracle::{GaussianMixture, Latent};
use crate::rng::{keyed_rng, standard_normal_vec};
use crate::sampler::{ddim_chain, lookahead_estimate};
use crate::schedule::{ddim_noise_scale, NoiseSchedule};
use crate::search::{run_search, Method};

const ABLATION_STREAM: u64 = 0x4142_4c41;

/// Noisy latents `sqrt(ab) x0 + sqrt(1 - ab) eps` at `step`, with `x0` drawn
/// from the data mixture.
pub fn forward_latents(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    step: usize,
    count: usize,
    seed: u64,
) -> Vec<Latent> {
    let ab = schedule.at(step);
    (0..count)
        .map(|n| {
            let mut rng = keyed_rng(seed, [ABLATION_STREAM, n as u64, step as u64]);
            let x0 = mixture.sample_exact(&mut rng);
            let eps = standard_normal_vec(&mut rng, x0.len());
            let z = x0
                .iter()
                .zip(&eps)
                .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect();
            Latent::new(z, step)
        })
        .collect()
}

/// Per-latent Euclidean error of the `T'`-step lookahead against the
/// full-resolution deterministic DDIM endpoint, for each `T'`.
pub fn estimation_errors(
    mixture: &GaussianMixture,
    schedule: &NoiseSchedule,
    latents: &[Latent],
    t_primes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let deterministic = ddim_noise_scale(schedule, 0.0)?;
    let per_latent: Vec<Vec<f64>> = latents
        .par_iter()
        .map(|z| -> Result<Vec<f64>> {
            let reference = ddim_chain(z, mixture, schedule, &deterministic, 0, 0)?;
            t_primes
                .iter()
                .map(|&tp| {
                    let est = lookahead_estimate(z, tp, mixture, schedule)?;
                    Ok(est
                        .value
                        .values
                        .iter()
                        .zip(&reference.values)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..t_primes.len())
        .map(|j| per_latent.iter().map(|row| row[j]).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub problem: String,
    pub t_prime: usize,
    pub mean_estimation_error: f64,
    pub estimation_error_stderr: f64,
    pub mean_final_reward: f64,
    pub final_reward_stderr: f64,
    pub nfe: u64,
}

fn ablate_problem(cfg: &RunConfig, problem: &Problem) -> Result<Vec<AblationRow>> {
    let plan = cfg.ablation.clone().unwrap_or_default();
    let schedule = cfg.schedule.build()?;
    if plan.entry_step == 0 || plan.entry_step > schedule.steps() {
        return Err(Error::Config(format!(
            "ablation.entry_step must lie in 1..={} (got {})",
            schedule.steps(),
            plan.entry_step
        )));
    }
    let latents = forward_latents(
        &problem.mixture,
        &schedule,
        plan.entry_step,
        plan.latents,
        cfg.search.seed,
    );
    let errors = estimation_errors(&problem.mixture, &schedule, &latents, &plan.t_primes)?;
    let reward = cfg.build_reward(problem)?;
    let mut rows = Vec::new();
    for (&tp, errs) in plan.t_primes.iter().zip(&errors) {
        let mut search = cfg.search.clone();
        search.method = Method::DlbsLa;
        search.lookahead_steps = tp;
        let results: Vec<(f64, u64)> = (0..plan.seeds)
            .into_par_iter()
            .map(|seed| {
                let mut s = search.clone();
                s.seed = seed;
                run_search(&s, &problem.mixture, &schedule, reward.as_ref()).map(|r| (r.best_reward, r.nfe))
            })
            .collect::<Result<_>>()?;
        let rewards: Vec<f64> = results.iter().map(|r| r.0).collect();
        let (me, se) = mean_stderr(errs);
        let (mr, sr) = if rewards.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_stderr(&rewards)
        };
        rows.push(AblationRow {
            problem: problem.name.clone(),
            t_prime: tp,
            mean_estimation_error: me,
            estimation_error_stderr: se,
            mean_final_reward: mr,
            final_reward_stderr: sr,
            nfe: results.first().map_or(0, |r| r.1),
        });
    }
    Ok(rows)
}

/// Runs the ablation for every configured problem.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let plan = cfg.ablation.clone().unwrap_or_default();
    if plan.t_primes.is_empty() || plan.t_primes.contains(&0) {
        return Err(Error::Config(
            "ablation.t_primes must be a nonempty list of positive integers".into(),
        ));
    }
    let names = plan.problems.clone().unwrap_or_else(|| vec![cfg.problem.name.clone()]);
    let mut rows = Vec::new();
    for name in names {
        let mut c = cfg.clone();
        if name != cfg.problem.name {
            c.problem = crate::harness::config::ProblemSection {
                name,
                mixture: None,
                target: None,
            };
        }
        c.validate()?;
        rows.extend(ablate_problem(&c, &c.problem.resolve()?)?);
    }
    Ok(rows)
}
