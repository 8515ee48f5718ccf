//! Single-step transition kernels and clean-sample estimators.
//!
//! Two samplers are supported: stochastic DDIM over the discrete schedule and
//! first-order SDE-DPMSolver++ in the variance-preserving parameterisation
//! `alpha(t) = sqrt(alpha_bar_t)`, `sigma(t) = sqrt(1 - alpha_bar_t)`. Each
//! has a one-jump clean estimate (Tweedie for DDIM, the data-prediction jump
//! for DPM-Solver++) and a multi-step deterministic lookahead estimate.

use crate::error::{Error, Result};
use crate::oracle::{clean_from_epsilon, Denoiser, Latent};
use crate::rng::StreamKey;
use crate::schedule::{
    dpm_lookahead_grid, lookahead_grid, DdimNoiseScale, DpmCoefficients, NoiseLevel, NoiseSchedule, VpPoint,
};

/// Mean of the next latent before noise injection.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMean {
    pub latent: Latent,
    pub source_step: usize,
    /// The noise prediction at the source latent.
    pub model_output: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateKind {
    /// One-jump estimate (Tweedie / data-prediction jump).
    Tweedie,
    /// Multi-step deterministic solve with the given number of steps.
    Lookahead(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CleanEstimate {
    pub value: Latent,
    pub kind: EstimateKind,
    /// Denoiser calls spent producing the estimate.
    pub nfe_cost: usize,
}

/// One DDIM update from noise level `src` to `dst` given the model output at
/// the source: `sqrt(a_dst) x0 + sqrt(1 - a_dst - sigma^2) eps`.
pub fn ddim_step(z: &[f64], eps: &[f64], src: f64, dst: f64, sigma: f64) -> Result<Vec<f64>> {
    let x0 = clean_from_epsilon(z, eps, src);
    let mut radicand = 1.0 - dst - sigma * sigma;
    if radicand < 0.0 {
        if radicand < -1e-12 {
            return Err(Error::Config(format!(
                "DDIM direction coefficient radicand is negative ({radicand}); sigma too large for this schedule"
            )));
        }
        radicand = 0.0;
    }
    let (a, b) = (dst.sqrt(), radicand.sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Transition mean from step `t` to `t - 1` (one denoiser call).
pub fn ddim_transition_mean(
    z: &Latent,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    noise: &DdimNoiseScale,
) -> Result<TransitionMean> {
    let t = z.step;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Domain(format!(
            "DDIM transition needs 1 <= t <= {}, got {t}",
            schedule.steps()
        )));
    }
    let eps = denoiser.epsilon(&z.values, schedule.level(t))?;
    let next = ddim_step(&z.values, &eps, schedule.at(t), schedule.at(t - 1), noise.sigma[t])?;
    Ok(TransitionMean {
        latent: Latent::new(next, t - 1),
        source_step: t,
        model_output: eps,
    })
}

/// `k` candidates `mean + std * eps_i`, with `eps_i` drawn from the stream
/// keyed by `(seed, mean.step, beam, i)`. No denoiser calls.
pub fn perturb_candidates(mean: &Latent, std: f64, k: usize, seed: u64, beam: usize) -> Vec<Latent> {
    (0..k)
        .map(|i| {
            if std == 0.0 {
                return mean.clone();
            }
            let noise = StreamKey::new(seed, mean.step, beam, i).standard_normal(mean.dim());
            let values = mean.values.iter().zip(noise).map(|(m, e)| m + std * e).collect();
            Latent::new(values, mean.step)
        })
        .collect()
}

/// DDIM candidate fan-out `z^{ij} = z^j + sigma_t eps^i`.
pub fn ddim_sample_candidates(mean: &TransitionMean, sigma_t: f64, k: usize, seed: u64, beam: usize) -> Vec<Latent> {
    perturb_candidates(&mean.latent, sigma_t, k, seed, beam)
}

/// Tweedie one-step estimate of the clean sample. Free at `t = 0`.
pub fn tweedie_estimate(z: &Latent, denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<CleanEstimate> {
    if z.step == 0 {
        return Ok(CleanEstimate {
            value: z.clone(),
            kind: EstimateKind::Tweedie,
            nfe_cost: 0,
        });
    }
    let level = schedule.level(z.step);
    let eps = denoiser.epsilon(&z.values, level)?;
    Ok(CleanEstimate {
        value: Latent::new(clean_from_epsilon(&z.values, &eps, level.alpha_bar), 0),
        kind: EstimateKind::Tweedie,
        nfe_cost: 1,
    })
}

/// Lookahead estimate: deterministic DDIM along [`lookahead_grid`].
///
/// The model output computed for each update is the one the clean estimate
/// at that grid point uses, and the estimate at timestep 0 is the latent
/// itself, so the solve costs one call per grid transition.
pub fn lookahead_estimate(
    z: &Latent,
    t_prime: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<CleanEstimate> {
    let grid = lookahead_grid(z.step, t_prime);
    let mut cur = z.values.clone();
    let mut calls = 0;
    for pair in grid.steps.windows(2) {
        let (src, dst) = (schedule.level_at(pair[0]), schedule.level_at(pair[1]));
        let eps = denoiser.epsilon(&cur, src)?;
        calls += 1;
        cur = ddim_step(&cur, &eps, src.alpha_bar, dst.alpha_bar, 0.0)?;
    }
    Ok(CleanEstimate {
        value: Latent::new(cur, 0),
        kind: EstimateKind::Lookahead(grid.effective_t_prime),
        nfe_cost: calls,
    })
}

fn dpm_level(dpm: &DpmCoefficients, t: f64) -> NoiseLevel {
    dpm.schedule().level_at(t)
}

/// First-order DPM-Solver++ data-prediction update between two points.
/// `sde` selects the stochastic variant's mean; otherwise the ODE update.
fn dpm_update(z: &[f64], signal: &[f64], src: &VpPoint, dst: &VpPoint, sde: bool) -> Vec<f64> {
    if dst.sigma == 0.0 {
        return signal.to_vec();
    }
    let e = src.exp_neg_h(dst);
    let ratio = dst.sigma / src.sigma;
    if sde {
        let (a, b) = (ratio * e, dst.alpha * (1.0 - e * e));
        z.iter().zip(signal).map(|(x, s)| a * x + b * s).collect()
    } else {
        let b = -dst.alpha * (e - 1.0);
        z.iter().zip(signal).map(|(x, s)| ratio * x + b * s).collect()
    }
}

/// SDE-DPMSolver++ transition mean from `src` to `dst` (one denoiser call).
pub fn dpmpp_transition_mean(
    z: &Latent,
    dst: usize,
    denoiser: &dyn Denoiser,
    dpm: &DpmCoefficients,
) -> Result<TransitionMean> {
    let src = z.step;
    let h = dpm.step_size(src, dst);
    if h < 0.0 || dst > src {
        return Err(Error::Domain(format!(
            "DPM-Solver++ step must move toward t = 0 (src {src}, dst {dst}, h = {h})"
        )));
    }
    let level = dpm_level(dpm, src as f64);
    let eps = denoiser.epsilon(&z.values, level)?;
    let signal = clean_from_epsilon(&z.values, &eps, level.alpha_bar);
    let next = dpm_update(&z.values, &signal, &dpm.point(src), &dpm.point(dst), true);
    Ok(TransitionMean {
        latent: Latent::new(next, dst),
        source_step: src,
        model_output: eps,
    })
}

/// Injected-noise standard deviation `sigma(dst) sqrt(1 - e^{-2h})`.
pub fn dpmpp_noise_std(dpm: &DpmCoefficients, src: usize, dst: usize) -> f64 {
    let (p_src, p_dst) = (dpm.point(src), dpm.point(dst));
    if p_dst.sigma == 0.0 {
        return 0.0;
    }
    let e = p_src.exp_neg_h(&p_dst);
    p_dst.sigma * (1.0 - e * e).max(0.0).sqrt()
}

/// SDE-DPMSolver++ candidate fan-out for the transition `src -> mean.step`.
pub fn dpmpp_sample_candidates(
    mean: &TransitionMean,
    dpm: &DpmCoefficients,
    k: usize,
    seed: u64,
    beam: usize,
) -> Vec<Latent> {
    let std = dpmpp_noise_std(dpm, mean.source_step, mean.latent.step);
    perturb_candidates(&mean.latent, std, k, seed, beam)
}

/// One-jump data-prediction estimate from `z.step` to `terminal`.
pub fn dpmpp_jump_estimate(
    z: &Latent,
    terminal: usize,
    denoiser: &dyn Denoiser,
    dpm: &DpmCoefficients,
) -> Result<CleanEstimate> {
    dpmpp_lookahead(z, terminal, 1, denoiser, dpm).map(|mut est| {
        est.kind = EstimateKind::Tweedie;
        est
    })
}

/// Lookahead estimate: `m_prime`-step deterministic DPM-Solver++ to `terminal`.
pub fn dpmpp_lookahead(
    z: &Latent,
    terminal: usize,
    m_prime: usize,
    denoiser: &dyn Denoiser,
    dpm: &DpmCoefficients,
) -> Result<CleanEstimate> {
    if z.step < terminal {
        return Err(Error::Domain(format!(
            "latent at step {} is already past the terminal step {terminal}",
            z.step
        )));
    }
    let grid = dpm_lookahead_grid(z.step, terminal, m_prime);
    let mut cur = z.values.clone();
    let mut calls = 0;
    for pair in grid.steps.windows(2) {
        let level = dpm_level(dpm, pair[0]);
        let eps = denoiser.epsilon(&cur, level)?;
        calls += 1;
        let signal = clean_from_epsilon(&cur, &eps, level.alpha_bar);
        cur = dpm_update(&cur, &signal, &dpm.point_at(pair[0]), &dpm.point_at(pair[1]), false);
    }
    Ok(CleanEstimate {
        value: Latent::new(cur, terminal),
        kind: EstimateKind::Lookahead(grid.effective_t_prime),
        nfe_cost: calls,
    })
}

/// Runs a full DDIM chain from `z` down to step 0, drawing the per-step
/// noise from streams keyed by `(seed, step, beam, 0)`.
pub fn ddim_chain(
    z: &Latent,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    noise: &DdimNoiseScale,
    seed: u64,
    beam: usize,
) -> Result<Latent> {
    let mut cur = z.clone();
    while cur.step > 0 {
        let sigma = noise.sigma[cur.step];
        let mean = ddim_transition_mean(&cur, denoiser, schedule, noise)?;
        cur = ddim_sample_candidates(&mean, sigma, 1, seed, beam).remove(0);
    }
    Ok(cur)
}

/// Runs a full SDE-DPMSolver++ chain from `z` down to step 0.
pub fn dpmpp_chain(
    z: &Latent,
    denoiser: &dyn Denoiser,
    dpm: &DpmCoefficients,
    seed: u64,
    beam: usize,
) -> Result<Latent> {
    let mut cur = z.clone();
    while cur.step > 0 {
        let mean = dpmpp_transition_mean(&cur, cur.step - 1, denoiser, dpm)?;
        cur = dpmpp_sample_candidates(&mean, dpm, 1, seed, beam).remove(0);
    }
    Ok(cur)
}
