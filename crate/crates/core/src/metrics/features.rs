//! Feature extractors standing in for pretrained image, video and text encoders.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Stream words reserved for extractor randomness, disjoint from search keys.
const PROJECTION_STREAM: u64 = u64::MAX;
const TEXT_STREAM: u64 = u64::MAX - 1;

/// Scales `v` to unit Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Domain(format!("cannot normalise a vector with norm {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine similarity of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (a, b) = (normalize(a)?, normalize(b)?);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Maps frames, videos and text conditions into a shared unit-norm space.
pub trait FeatureExtractor: Send + Sync {
    fn embed(&self, frame: &[f64]) -> Result<Vec<f64>>;

    fn embed_text(&self, condition: &str) -> Result<Vec<f64>>;

    /// Normalised mean of the frame embeddings.
    fn embed_video(&self, frames: &[&[f64]]) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for f in frames {
            let e = self.embed(f)?;
            match acc.as_mut() {
                None => acc = Some(e),
                Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
            }
        }
        let acc = acc.ok_or_else(|| Error::Shape("cannot embed an empty video".into()))?;
        normalize(&acc)
    }
}

/// Deterministic unit vector for a text condition.
fn text_vector(condition: &str, seed: u64, dim: usize) -> Result<Vec<f64>> {
    let digest = Sha256::digest(condition.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let mut rng = keyed_rng(seed, [TEXT_STREAM, u64::from_le_bytes(word), 0]);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&v)
}

/// Frames embed as themselves, normalised.
#[derive(Clone, Debug)]
pub struct IdentityNormalize {
    pub dim: usize,
    pub seed: u64,
}

impl IdentityNormalize {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl FeatureExtractor for IdentityNormalize {
    fn embed(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.dim {
            return Err(Error::Shape(format!(
                "frame has {} values, expected {}",
                frame.len(),
                self.dim
            )));
        }
        normalize(frame)
    }

    fn embed_text(&self, condition: &str) -> Result<Vec<f64>> {
        text_vector(condition, self.seed, self.dim)
    }
}

/// A fixed Gaussian projection `R^d -> R^e`, drawn from `seed`.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    matrix: Vec<Vec<f64>>,
    input_dim: usize,
    seed: u64,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        let mut rng = keyed_rng(seed, [PROJECTION_STREAM, input_dim as u64, output_dim as u64]);
        let scale = 1.0 / (input_dim as f64).sqrt();
        let matrix = (0..output_dim)
            .map(|_| {
                (0..input_dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Self {
            matrix,
            input_dim,
            seed,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.len()
    }
}

impl FeatureExtractor for RandomProjection {
    fn embed(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "frame has {} values, expected {}",
                frame.len(),
                self.input_dim
            )));
        }
        let projected: Vec<f64> = self
            .matrix
            .iter()
            .map(|row| row.iter().zip(frame).map(|(a, b)| a * b).sum())
            .collect();
        normalize(&projected)
    }

    fn embed_text(&self, condition: &str) -> Result<Vec<f64>> {
        text_vector(condition, self.seed, self.output_dim())
    }
}
