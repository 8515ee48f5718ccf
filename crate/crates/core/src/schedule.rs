//! Discrete noise schedules and the solver coefficients derived from them.
//!
//! A schedule stores the cumulative signal coefficients `alpha_bar[0..=T]`
//! with the clean boundary `alpha_bar[0] = 1`. The forward marginal at step
//! `t` is `z_t = sqrt(alpha_bar[t]) z_0 + sqrt(1 - alpha_bar[t]) eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point on the (possibly fractional) time axis together with its signal
/// coefficient. Denoisers receive both: a learned model conditions on `t`,
/// the analytic oracle only needs `alpha_bar`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Validates `alpha_bar[0] == 1`, strict decrease and membership in (0, 1].
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Config(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            let (prev, cur) = (pair[0], pair[1]);
            if !(cur > 0.0 && cur <= 1.0 && cur.is_finite()) {
                return Err(Error::Config(format!("alpha_bar[{}] = {cur} is outside (0, 1]", t + 1)));
            }
            if cur >= prev {
                return Err(Error::Config(format!(
                    "alpha_bar must be strictly decreasing (alpha_bar[{}] = {cur} >= alpha_bar[{t}] = {prev})",
                    t + 1
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn at(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Linear interpolation of `alpha_bar` at a fractional timestep.
    /// Integer arguments return the table entry exactly.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.steps() as f64);
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return self.alpha_bar[lo];
        }
        let (a, b) = (self.alpha_bar[lo], self.alpha_bar[lo + 1]);
        a + frac * (b - a)
    }

    pub fn level(&self, t: usize) -> NoiseLevel {
        NoiseLevel {
            t: t as f64,
            alpha_bar: self.alpha_bar[t],
        }
    }

    pub fn level_at(&self, t: f64) -> NoiseLevel {
        NoiseLevel {
            t,
            alpha_bar: self.alpha_bar_at(t),
        }
    }

    /// Evenly strided sub-schedule with `steps` steps, keeping the boundary
    /// and the final step: entry `i` is `alpha_bar[i * T / steps]`.
    pub fn strided(&self, steps: usize) -> Result<Self> {
        let total = self.steps();
        if steps == 0 || steps > total || !total.is_multiple_of(steps) {
            return Err(Error::Config(format!(
                "cannot stride a {total}-step schedule down to {steps} steps"
            )));
        }
        let stride = total / steps;
        Self::from_alpha_bar((0..=steps).map(|i| self.alpha_bar[i * stride]).collect())
    }

    /// JSON array of `alpha_bar` values, for audit dumps.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.alpha_bar).expect("finite floats serialize")
    }
}

/// Linear-beta schedule: `beta_t` runs linearly from `beta_start` (t = 1) to
/// `beta_end` (t = T), and `alpha_bar[t] = prod_{s <= t} (1 - beta_s)`.
pub fn linear_beta_schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("number of steps must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 1..=steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// Per-step injected-noise standard deviations for stochastic DDIM.
#[derive(Clone, Debug, PartialEq)]
pub struct DdimNoiseScale {
    pub eta: f64,
    pub sigma: Vec<f64>,
}

/// `sigma_t = eta * sqrt((1 - a_{t-1}) / (1 - a_t)) * sqrt(1 - a_t / a_{t-1})`.
///
/// At `eta = 1` this is the DDPM posterior standard deviation. `sigma_1` is
/// zero because `alpha_bar[0] = 1`, so the last transition is deterministic.
pub fn ddim_noise_scale(schedule: &NoiseSchedule, eta: f64) -> Result<DdimNoiseScale> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let ab = schedule.alpha_bar();
    let mut sigma = vec![0.0; ab.len()];
    for t in 1..ab.len() {
        let (prev, cur) = (ab[t - 1], ab[t]);
        let s = eta * ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt();
        if s * s > (1.0 - prev) + 1e-15 {
            return Err(Error::Config(format!(
                "sigma_{t}^2 = {} exceeds 1 - alpha_bar[{}] = {}",
                s * s,
                t - 1,
                1.0 - prev
            )));
        }
        sigma[t] = s;
    }
    Ok(DdimNoiseScale { eta, sigma })
}

/// Timesteps visited by a lookahead solve, from the entry step down to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LookaheadGrid {
    pub steps: Vec<f64>,
    pub effective_t_prime: usize,
}

impl LookaheadGrid {
    fn from_steps(steps: Vec<f64>) -> Self {
        let effective_t_prime = steps.len() - 1;
        Self {
            steps,
            effective_t_prime,
        }
    }
}

/// DDIM lookahead grid `floor(s / T' * entry)` for `s = T'..=0`.
///
/// When `entry_step < t_prime` the floor grid would repeat timesteps; the
/// grid then falls back to `T'` evenly spaced fractional timesteps (with
/// linearly interpolated `alpha_bar`) so every lookahead from a noisy latent
/// costs exactly `T'` model evaluations. `entry_step = 0` yields `[0]`.
pub fn lookahead_grid(entry_step: usize, t_prime: usize) -> LookaheadGrid {
    assert!(t_prime >= 1, "lookahead needs at least one step");
    if entry_step == 0 {
        return LookaheadGrid::from_steps(vec![0.0]);
    }
    let steps = if entry_step >= t_prime {
        (0..=t_prime)
            .rev()
            .map(|s| ((s * entry_step) / t_prime) as f64)
            .collect()
    } else {
        (0..=t_prime)
            .rev()
            .map(|s| entry_step as f64 * s as f64 / t_prime as f64)
            .collect()
    };
    LookaheadGrid::from_steps(steps)
}

/// DPM-Solver++ lookahead grid from `entry` down to `terminal` in `m_prime`
/// steps, using the index interpolation `floor(((M'-u) s + u M) / M')` over
/// grid indices (index grows as the timestep decreases). Same fractional
/// fallback as [`lookahead_grid`] when fewer than `m_prime` steps remain.
pub fn dpm_lookahead_grid(entry: usize, terminal: usize, m_prime: usize) -> LookaheadGrid {
    assert!(m_prime >= 1, "lookahead needs at least one step");
    assert!(entry >= terminal, "entry must not precede the terminal step");
    let span = entry - terminal;
    if span == 0 {
        return LookaheadGrid::from_steps(vec![entry as f64]);
    }
    let steps = if span >= m_prime {
        (0..=m_prime).map(|u| (entry - (u * span) / m_prime) as f64).collect()
    } else {
        (0..=m_prime)
            .map(|u| entry as f64 - span as f64 * u as f64 / m_prime as f64)
            .collect()
    };
    LookaheadGrid::from_steps(steps)
}

/// Variance-preserving coefficients at one time point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VpPoint {
    pub alpha: f64,
    pub sigma: f64,
    /// `log(alpha / sigma)`; `+inf` at the clean boundary.
    pub lambda: f64,
}

impl VpPoint {
    pub fn from_alpha_bar(alpha_bar: f64) -> Self {
        let alpha = alpha_bar.sqrt();
        let sigma = (1.0 - alpha_bar).sqrt();
        Self {
            alpha,
            sigma,
            lambda: (alpha / sigma).ln(),
        }
    }

    /// `e^{-h}` with `h = lambda(dst) - lambda(self)`, computed as
    /// `sigma_dst alpha_src / (alpha_dst sigma_src)` so that a clean
    /// destination gives exactly zero instead of `exp(-inf)`.
    pub fn exp_neg_h(&self, dst: &VpPoint) -> f64 {
        (dst.sigma * self.alpha) / (dst.alpha * self.sigma)
    }
}

/// Half-log-SNR tables for DPM-Solver++ over the integer timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct DpmCoefficients {
    pub marginal_alpha: Vec<f64>,
    pub marginal_sigma: Vec<f64>,
    pub half_log_snr: Vec<f64>,
    schedule: NoiseSchedule,
}

impl DpmCoefficients {
    pub fn point(&self, t: usize) -> VpPoint {
        VpPoint {
            alpha: self.marginal_alpha[t],
            sigma: self.marginal_sigma[t],
            lambda: self.half_log_snr[t],
        }
    }

    /// Coefficients at a fractional timestep (interpolated `alpha_bar`).
    pub fn point_at(&self, t: f64) -> VpPoint {
        if t.fract() == 0.0 && t >= 0.0 && (t as usize) < self.marginal_alpha.len() {
            self.point(t as usize)
        } else {
            VpPoint::from_alpha_bar(self.schedule.alpha_bar_at(t))
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// `h = lambda(dst) - lambda(src)`.
    pub fn step_size(&self, src: usize, dst: usize) -> f64 {
        self.half_log_snr[dst] - self.half_log_snr[src]
    }
}

pub fn dpm_coefficients(schedule: &NoiseSchedule) -> Result<DpmCoefficients> {
    let ab = schedule.alpha_bar();
    if let Some(t) = (1..ab.len()).find(|&t| ab[t] >= 1.0) {
        return Err(Error::DegenerateSchedule(format!(
            "alpha_bar[{t}] = 1 makes the half-log-SNR infinite"
        )));
    }
    let points: Vec<VpPoint> = ab.iter().map(|&a| VpPoint::from_alpha_bar(a)).collect();
    Ok(DpmCoefficients {
        marginal_alpha: points.iter().map(|p| p.alpha).collect(),
        marginal_sigma: points.iter().map(|p| p.sigma).collect(),
        half_log_snr: points.iter().map(|p| p.lambda).collect(),
        schedule: schedule.clone(),
    })
}
