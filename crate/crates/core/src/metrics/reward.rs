//! Rewards over clean samples, including the analytic testbed rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;

/// A pure scalar reward on decoded samples. Higher is better.
pub trait Reward: Send + Sync {
    fn reward(&self, x: &[f64]) -> f64;
}

impl<F> Reward for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn reward(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Maps a clean latent to the space the reward is defined on.
pub trait Decoder: Send + Sync {
    fn decode(&self, z: &[f64]) -> Vec<f64>;
}

/// The testbed decoder: latents are samples.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn decode(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

/// `r(Dec(z))`.
pub struct Decoded<D, R> {
    pub decoder: D,
    pub reward: R,
}

impl<D: Decoder, R: Reward> Reward for Decoded<D, R> {
    fn reward(&self, z: &[f64]) -> f64 {
        self.reward.reward(&self.decoder.decode(z))
    }
}

/// `-scale * ||x - target||^2`, maximal (zero) at the target.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeDistance {
    pub target: Vec<f64>,
    pub scale: f64,
}

impl ModeDistance {
    pub fn new(target: Vec<f64>, scale: f64) -> Self {
        Self { target, scale }
    }
}

impl Reward for ModeDistance {
    fn reward(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.target).map(|(a, b)| (a - b) * (a - b)).sum();
        -self.scale * d2
    }
}

/// Posterior probability that `x` was drawn from one mixture component.
#[derive(Clone, Debug)]
pub struct ComponentPreference {
    pub mixture: GaussianMixture,
    pub component: usize,
}

impl ComponentPreference {
    pub fn new(mixture: GaussianMixture, component: usize) -> Result<Self> {
        if component >= mixture.weights().len() {
            return Err(Error::Config(format!(
                "component {component} out of range for a {}-component mixture",
                mixture.weights().len()
            )));
        }
        Ok(Self { mixture, component })
    }
}

impl Reward for ComponentPreference {
    fn reward(&self, x: &[f64]) -> f64 {
        self.mixture.responsibilities(x, 1.0)[self.component]
    }
}

/// `scale * <w, x>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: Vec<f64>,
    pub scale: f64,
}

impl Reward for Linear {
    fn reward(&self, x: &[f64]) -> f64 {
        self.scale * x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Configuration form of the testbed rewards.
///
/// `mode_distance` without a target uses the problem's target point. On a
/// region within distance `R` of the target, `scale = 1 / (2R)` makes the
/// mode-distance reward 1-Lipschitz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    ModeDistance {
        #[serde(default)]
        target: Option<Vec<f64>>,
        #[serde(default = "one")]
        scale: f64,
    },
    ComponentPreference {
        component: usize,
    },
    Linear {
        weights: Vec<f64>,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::ModeDistance {
            target: None,
            scale: 1.0,
        }
    }
}

impl RewardSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            RewardSpec::ModeDistance { .. } => "mode_distance",
            RewardSpec::ComponentPreference { .. } => "component_preference",
            RewardSpec::Linear { .. } => "linear",
        }
    }

    /// Builds the reward for a problem with the given data mixture and target.
    pub fn build(&self, mixture: &GaussianMixture, target: &[f64]) -> Result<Box<dyn Reward>> {
        let dim = mixture.dim();
        let check = |v: &[f64], what: &str| {
            if v.len() == dim {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "reward {what} has length {}, problem dimension is {dim}",
                    v.len()
                )))
            }
        };
        Ok(match self {
            RewardSpec::ModeDistance { target: t, scale } => {
                let t = t.clone().unwrap_or_else(|| target.to_vec());
                check(&t, "target")?;
                Box::new(ModeDistance::new(t, *scale))
            }
            RewardSpec::ComponentPreference { component } => {
                Box::new(ComponentPreference::new(mixture.clone(), *component)?)
            }
            RewardSpec::Linear { weights, scale } => {
                check(weights, "weights")?;
                Box::new(Linear {
                    weights: weights.clone(),
                    scale: *scale,
                })
            }
        })
    }
}

/// Builds a testbed reward by kind name with default parameters.
pub fn testbed_reward(kind: &str, mixture: &GaussianMixture, target: &[f64]) -> Result<Box<dyn Reward>> {
    let spec = match kind {
        "mode_distance" => RewardSpec::ModeDistance {
            target: None,
            scale: 1.0,
        },
        "component_preference" => RewardSpec::ComponentPreference { component: 0 },
        "linear" => {
            let mut w = vec![0.0; mixture.dim()];
            w[0] = 1.0;
            RewardSpec::Linear { weights: w, scale: 1.0 }
        }
        other => return Err(Error::Config(format!("unknown reward kind `{other}`"))),
    };
    spec.build(mixture, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let m = ModeDistance::new(vec![1.0, 2.0], 1.0);
        assert_eq!(m.reward(&[1.0, 2.0]), 0.0);
        assert_eq!(m.reward(&[2.0, 2.0]), -1.0);
        let one = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let c = ComponentPreference::new(one.clone(), 0).unwrap();
        for x in [[0.0, 0.0], [5.0, -3.0], [100.0, 1.0]] {
            assert!((c.reward(&x) - 1.0).abs() < 1e-15);
        }
        let l = Linear {
            weights: vec![1.0, 0.0, 0.0],
            scale: 1.0,
        };
        assert_eq!(l.reward(&[3.0, 7.0, -1.0]), 3.0);
        assert!(testbed_reward("nope", &one, &[0.0, 0.0]).is_err());
        assert!(ComponentPreference::new(one, 1).is_err());
    }

    #[test]
    fn decoded_composes() {
        let r = Decoded {
            decoder: IdentityDecoder,
            reward: ModeDistance::new(vec![0.0], 2.0),
        };
        assert_eq!(r.reward(&[3.0]), -18.0);
    }

    #[test]
    fn spec_parsing() {
        let s: RewardSpec = serde_json::from_str(r#"{"kind":"linear","weights":[1,2]}"#).unwrap();
        assert_eq!(
            s,
            RewardSpec::Linear {
                weights: vec![1.0, 2.0],
                scale: 1.0
            }
        );
        assert!(serde_json::from_str::<RewardSpec>(r#"{"kind":"mode_distance","foo":1}"#).is_err());
    }
}
