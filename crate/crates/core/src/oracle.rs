//! The denoiser abstraction and an exact analytic implementation.
//!
//! [`GaussianMixture`] with isotropic components is closed under the
//! variance-preserving forward process, so its noise prediction, posterior
//! mean and score are available in closed form at every noise level. It
//! stands in for a pretrained model wherever a test needs the exact answer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;
pub use crate::schedule::NoiseLevel;

/// A diffusion state: a real vector tagged with the timestep it lives at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub values: Vec<f64>,
    pub step: usize,
}

impl Latent {
    pub fn new(values: Vec<f64>, step: usize) -> Self {
        Self { values, step }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Noise prediction `eps(z, t)`. Implementations must be pure: identical
/// arguments give bit-identical outputs, and they may be called from many
/// threads at once.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn epsilon(&self, z: &[f64], level: NoiseLevel) -> Result<Vec<f64>>;

    /// Signal (clean-sample) prediction derived from the noise prediction.
    fn signal(&self, z: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
        let eps = self.epsilon(z, level)?;
        Ok(clean_from_epsilon(z, &eps, level.alpha_bar))
    }
}

/// `(z - sqrt(1 - a) eps) / sqrt(a)`: the one-step clean-sample estimate.
pub fn clean_from_epsilon(z: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let noise = (1.0 - alpha_bar).sqrt();
    let signal = alpha_bar.sqrt();
    z.iter().zip(eps).map(|(&zi, &ei)| (zi - noise * ei) / signal).collect()
}

/// Wraps a denoiser and counts forward evaluations.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicU64,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn epsilon(&self, z: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.epsilon(z, level)
    }
}

/// Mixture of isotropic Gaussians `sum_k w_k N(mu_k, v_k I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.weights, raw.means, raw.variances)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(g: GaussianMixture) -> Self {
        RawMixture {
            weights: g.weights,
            means: g.means,
            variances: g.variances,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha_bar = {alpha_bar} is outside (0, 1]")))
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Config(format!(
                "mixture needs matching non-empty weights/means/variances, got {}/{}/{}",
                k,
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config(
                "all mixture means must share a positive dimension".into(),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture variances must be strictly positive".into()));
        }
        if means.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Closed-form marginal of `z = sqrt(a) x + sqrt(1 - a) eps`.
    pub fn marginal(&self, alpha_bar: f64) -> Result<Self> {
        check_alpha_bar(alpha_bar)?;
        let s = alpha_bar.sqrt();
        Ok(Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|x| s * x).collect()).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| alpha_bar * v + (1.0 - alpha_bar))
                .collect(),
        })
    }

    /// Per-component log of `w_k N(z; sqrt(a) mu_k, (a v_k + 1 - a) I)`.
    fn component_log_terms(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let s = alpha_bar.sqrt();
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &v)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let var = alpha_bar * v + (1.0 - alpha_bar);
                let dist: f64 = z.iter().zip(mu).map(|(zi, m)| (zi - s * m).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * dist / var
            })
            .collect()
    }

    /// Posterior component probabilities given `z` at noise level `a`.
    pub fn responsibilities(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let logs = self.component_log_terms(z, alpha_bar);
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }

    /// Log density of the forward marginal at `z`.
    pub fn log_density(&self, z: &[f64], alpha_bar: f64) -> Result<f64> {
        check_alpha_bar(alpha_bar)?;
        Ok(log_sum_exp(&self.component_log_terms(z, alpha_bar)))
    }

    /// Conjugate-Gaussian posterior mean `sum_k r_k m_k`, evaluated directly.
    fn posterior_mean_direct(&self, z: &[f64], alpha_bar: f64) -> Vec<f64> {
        let s = alpha_bar.sqrt();
        let resp = self.responsibilities(z, alpha_bar);
        let mut out = vec![0.0; z.len()];
        for ((r, mu), &v) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            let gain = s * v / (alpha_bar * v + 1.0 - alpha_bar);
            for ((o, zi), m) in out.iter_mut().zip(z).zip(mu) {
                *o += r * (m + gain * (zi - s * m));
            }
        }
        out
    }

    /// Exact noise prediction `(z - sqrt(a) E[x | z]) / sqrt(1 - a)`.
    pub fn noise_prediction(&self, z: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        check_alpha_bar(alpha_bar)?;
        if alpha_bar == 1.0 {
            return Err(Error::Domain("noise prediction is undefined at alpha_bar = 1".into()));
        }
        self.check_dim(z)?;
        let pm = self.posterior_mean_direct(z, alpha_bar);
        let s = alpha_bar.sqrt();
        let n = (1.0 - alpha_bar).sqrt();
        Ok(z.iter().zip(&pm).map(|(zi, m)| (zi - s * m) / n).collect())
    }

    /// Exact `E[x_0 | z_t = z]`.
    ///
    /// Computed by pushing the exact noise prediction through
    /// [`clean_from_epsilon`], so a Tweedie step driven by this oracle
    /// reproduces it bit for bit.
    pub fn posterior_mean(&self, z: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        check_alpha_bar(alpha_bar)?;
        self.check_dim(z)?;
        if alpha_bar == 1.0 {
            return Ok(z.to_vec());
        }
        let eps = self.noise_prediction(z, alpha_bar)?;
        Ok(clean_from_epsilon(z, &eps, alpha_bar))
    }

    /// Exact score `grad_z log p_t(z)` of the forward marginal.
    pub fn score(&self, z: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        check_alpha_bar(alpha_bar)?;
        self.check_dim(z)?;
        let s = alpha_bar.sqrt();
        let resp = self.responsibilities(z, alpha_bar);
        let mut out = vec![0.0; z.len()];
        for ((r, mu), &v) in resp.iter().zip(&self.means).zip(&self.variances) {
            let var = alpha_bar * v + 1.0 - alpha_bar;
            for ((o, zi), m) in out.iter_mut().zip(z).zip(mu) {
                *o -= r * (zi - s * m) / var;
            }
        }
        Ok(out)
    }

    /// Draw from the data distribution: pick a component by weight, then sample it.
    pub fn sample_exact<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && w > 0.0 {
                k = i;
                break;
            }
        }
        while self.weights[k] == 0.0 {
            k -= 1;
        }
        let sd = self.variances[k].sqrt();
        standard_normal_vec(rng, self.dim())
            .into_iter()
            .zip(&self.means[k])
            .map(|(e, m)| m + sd * e)
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// Full covariance, row-major `dim x dim`.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mean = self.mean();
        let mut cov = vec![vec![0.0; d]; d];
        for ((w, mu), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..d {
                cov[i][i] += w * v;
                for j in 0..d {
                    cov[i][j] += w * (mu[i] - mean[i]) * (mu[j] - mean[j]);
                }
            }
        }
        cov
    }

    /// Index of the component whose mean is nearest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        self.means
            .iter()
            .enumerate()
            .min_by(|a, b| sq_dist(a.1, x).total_cmp(&sq_dist(b.1, x)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "latent has dimension {}, mixture has {}",
                z.len(),
                self.dim()
            )))
        }
    }
}

impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn epsilon(&self, z: &[f64], level: NoiseLevel) -> Result<Vec<f64>> {
        self.noise_prediction(z, level.alpha_bar)
    }
}

/// A named testbed problem: a data mixture plus the default reward target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub mixture: GaussianMixture,
    pub target: Vec<f64>,
}

pub const PRESET_NAMES: [&str; 3] = ["bimodal-1d", "ring-8", "needle-reward-16d"];

/// Built-in testbed problems.
///
/// - `bimodal-1d`: two equal modes at -2 and +2; the target sits between them,
///   nearer the right mode, so early posterior means are deceptive.
/// - `ring-8`: eight modes on a radius-4 circle; the target lies inside the
///   ring between two neighbouring modes.
/// - `needle-reward-16d`: four modes in 16 dimensions with a target offset
///   from one of them along a single axis.
pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "bimodal-1d" => Ok(Preset {
            name: name.into(),
            mixture: GaussianMixture::new(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], vec![0.25, 0.25])?,
            target: vec![1.0],
        }),
        "ring-8" => {
            let means = (0..8)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::PI / 4.0;
                    vec![4.0 * a.cos(), 4.0 * a.sin()]
                })
                .collect();
            let a = std::f64::consts::PI / 16.0;
            Ok(Preset {
                name: name.into(),
                mixture: GaussianMixture::new(vec![0.125; 8], means, vec![0.1; 8])?,
                target: vec![2.5 * a.cos(), 2.5 * a.sin()],
            })
        }
        "needle-reward-16d" => {
            let d = 16;
            let means: Vec<Vec<f64>> = (0..4)
                .map(|k| (0..d).map(|i| if (i + k) % 4 == 0 { 2.0 } else { -0.5 }).collect())
                .collect();
            let mut target = means[0].clone();
            target[1] += 1.5;
            Ok(Preset {
                name: name.into(),
                mixture: GaussianMixture::new(vec![0.25; 4], means, vec![0.3; 4])?,
                target,
            })
        }
        other => Err(Error::Config(format!(
            "unknown problem preset `{other}` (known: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    fn single(mu: f64, v: f64) -> GaussianMixture {
        GaussianMixture::new(vec![1.0], vec![vec![mu]], vec![v]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![f64::NAN]], vec![1.0]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn marginal_examples() {
        let g = single(2.0, 0.25);
        assert_eq!(g.marginal(1.0).unwrap(), g);
        let m = g.marginal(0.64).unwrap();
        assert!((m.means()[0][0] - 1.6).abs() < 1e-15);
        assert!((m.variances()[0] - 0.52).abs() < 1e-15);
        let tiny = g.marginal(1e-14).unwrap();
        assert!(tiny.means()[0][0].abs() < 1e-6);
        assert!((tiny.variances()[0] - 1.0).abs() < 1e-12);
        assert!(g.marginal(0.0).is_err());
        assert!(g.marginal(1.5).is_err());
    }

    #[test]
    fn marginal_composes() {
        let g = preset("ring-8").unwrap().mixture;
        let a = g.marginal(0.7).unwrap().marginal(0.4).unwrap();
        let b = g.marginal(0.28).unwrap();
        for (x, y) in a.means().iter().flatten().zip(b.means().iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.variances().iter().zip(b.variances()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_posterior_mean() {
        let g = single(1.5, 1.0);
        for &(z, a) in &[(0.3, 0.5), (-2.0, 0.9), (4.0, 0.1)] {
            let pm = g.posterior_mean(&[z], a).unwrap()[0];
            let closed = a.sqrt() * z + (1.0 - a) * 1.5;
            assert!((pm - closed).abs() < 1e-12, "{pm} vs {closed}");
        }
        assert_eq!(g.posterior_mean(&[0.7], 1.0).unwrap(), vec![0.7]);
    }

    #[test]
    fn uninformative_observation_gives_prior_mean() {
        let g = GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.0], vec![3.0]], vec![0.5, 0.2]).unwrap();
        let pm = g.posterior_mean(&[0.4], 1e-12).unwrap()[0];
        assert!((pm - (-0.3 + 0.7 * 3.0)).abs() < 1e-5);
    }

    #[test]
    fn mode_centered_latent_predicts_zero_noise() {
        let g = single(2.0, 1.0);
        let a: f64 = 0.36;
        let eps = g.noise_prediction(&[a.sqrt() * 2.0], a).unwrap()[0];
        assert!(eps.abs() < 1e-12);
    }

    #[test]
    fn pure_noise_limit() {
        let g = single(0.0, 1.0);
        let eps = g.noise_prediction(&[1.3], 1e-12).unwrap()[0];
        assert!((eps - 1.3).abs() < 1e-5);
        assert!(g.noise_prediction(&[1.3], 1.0).is_err());
    }

    #[test]
    fn score_examples() {
        let g = single(0.0, 1.0);
        let s = g.score(&[0.8], 0.5).unwrap();
        assert!((s[0] + 0.8).abs() < 1e-15);
        let sym = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-2.0, 1.0], vec![2.0, -1.0]], vec![0.3, 0.3]).unwrap();
        assert!(sym.score(&[0.0, 0.0], 0.4).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn score_matches_finite_differences() {
        let g = preset("ring-8").unwrap().mixture;
        let mut rng = keyed_rng(11, [0, 0, 0]);
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.05..0.95);
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let score = g.score(&z, a).unwrap();
            for i in 0..2 {
                let h = 1e-5;
                let mut up = z.clone();
                let mut dn = z.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (g.log_density(&up, a).unwrap() - g.log_density(&dn, a).unwrap()) / (2.0 * h);
                assert!((fd - score[i]).abs() < 1e-5, "fd {fd} vs {}", score[i]);
            }
        }
    }

    #[test]
    fn far_tail_does_not_underflow() {
        let g = preset("bimodal-1d").unwrap().mixture;
        let pm = g.posterior_mean(&[400.0], 1e-3).unwrap();
        assert!(pm[0].is_finite());
        let r = g.responsibilities(&[400.0], 1e-3);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_sampler_edge_cases() {
        let g = GaussianMixture::new(vec![1.0, 0.0], vec![vec![-5.0], vec![5.0]], vec![1e-30, 1.0]).unwrap();
        let mut rng = keyed_rng(3, [0, 0, 0]);
        for _ in 0..1000 {
            let x = g.sample_exact(&mut rng);
            assert!((x[0] + 5.0).abs() < 1e-10);
        }
    }

    #[test]
    fn presets_are_valid_and_named() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.target.len(), p.mixture.dim());
            let json = serde_json::to_string(&p).unwrap();
            let back: Preset = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn deserialization_validates() {
        let bad = r#"{"weights":[0.5],"means":[[0.0]],"variances":[1.0]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }

    #[test]
    fn counting_wrapper_counts() {
        let g = single(0.0, 1.0);
        let c = CountingDenoiser::new(&g);
        let level = NoiseLevel { t: 3.0, alpha_bar: 0.5 };
        c.epsilon(&[0.1], level).unwrap();
        c.signal(&[0.1], level).unwrap();
        assert_eq!(c.calls(), 2);
    }
}
