//! Quality metrics over frame sequences and rewards for the analytic testbed.
//!
//! The video metrics follow the usual definitions of subject consistency,
//! motion smoothness, dynamic degree, per-frame aesthetic and imaging quality
//! and text-video consistency. The pretrained networks behind them are
//! replaced by small pluggable components: [`FeatureExtractor`],
//! [`Interpolator`], [`OpticalFlow`] and [`FrameScorer`].

pub mod features;
pub mod reward;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use features::{cosine_similarity, normalize, FeatureExtractor, IdentityNormalize, RandomProjection};

/// Floor applied to the summed flow magnitude before the logarithm.
pub const DYNAMIC_FLOOR: f64 = 1e-8;
/// Frames fed to the video encoder for text-video consistency.
pub const TEXT_VIDEO_FRAMES: usize = 8;

/// Names of the default registry, in evaluation order.
pub const DEFAULT_METRICS: [&str; 6] = [
    "subject_consistency",
    "motion_smoothness",
    "dynamic_degree",
    "aesthetic_quality",
    "imaging_quality",
    "text_video_consistency",
];

/// `F` frames of `d` values each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    frames: Vec<Vec<f64>>,
    value_range: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Vec<f64>>, value_range: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("a frame sequence needs at least one frame".into()));
        }
        let d = frames[0].len();
        if d == 0 || frames.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("frames must be nonempty and of equal length".into()));
        }
        if frames.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("frame values must be finite".into()));
        }
        if !(value_range > 0.0 && value_range.is_finite()) {
            return Err(Error::Domain(format!(
                "value_range must be positive, got {value_range}"
            )));
        }
        Ok(Self { frames, value_range })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn value_range(&self) -> f64 {
        self.value_range
    }
}

/// Reconstructs a frame from its two neighbours.
pub trait Interpolator: Send + Sync {
    fn interpolate(&self, prev: &[f64], next: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LinearMidpoint;

impl Interpolator for LinearMidpoint {
    fn interpolate(&self, prev: &[f64], next: &[f64]) -> Vec<f64> {
        prev.iter().zip(next).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Motion field between consecutive frames.
pub trait OpticalFlow: Send + Sync {
    fn flow(&self, from: &[f64], to: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FrameDifference;

impl OpticalFlow for FrameDifference {
    fn flow(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        to.iter().zip(from).map(|(b, a)| b - a).collect()
    }
}

/// Scores a single frame on `[0, scale]`.
pub trait FrameScorer: Send + Sync {
    fn score(&self, frame: &[f64], value_range: f64) -> f64;
}

impl<F> FrameScorer for F
where
    F: Fn(&[f64], f64) -> f64 + Send + Sync,
{
    fn score(&self, frame: &[f64], value_range: f64) -> f64 {
        self(frame, value_range)
    }
}

/// Aesthetic stand-in: `scale * min(1, 2 * std / value_range)`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastScorer {
    pub scale: f64,
}

impl FrameScorer for ContrastScorer {
    fn score(&self, frame: &[f64], value_range: f64) -> f64 {
        let n = frame.len() as f64;
        let mean = frame.iter().sum::<f64>() / n;
        let var = frame.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        self.scale * (2.0 * var.sqrt() / value_range).min(1.0)
    }
}

/// Imaging stand-in: `scale * (1 - min(1, mean |f[i+1] - f[i]| / value_range))`,
/// penalising high-frequency noise.
#[derive(Clone, Copy, Debug)]
pub struct NoiseScorer {
    pub scale: f64,
}

impl FrameScorer for NoiseScorer {
    fn score(&self, frame: &[f64], value_range: f64) -> f64 {
        if frame.len() < 2 {
            return self.scale;
        }
        let tv = frame.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (frame.len() - 1) as f64;
        self.scale * (1.0 - (tv / value_range).min(1.0))
    }
}

fn require_frames(seq: &FrameSequence, min: usize, what: &str) -> Result<()> {
    if seq.len() < min {
        return Err(Error::Shape(format!(
            "{what} needs at least {min} frames, got {}",
            seq.len()
        )));
    }
    Ok(())
}

/// Mean over `t = 2..F` of `(<d_1, d_t> + <d_{t-1}, d_t>) / 2` for unit
/// frame features `d`.
pub fn subject_consistency(seq: &FrameSequence, fx: &dyn FeatureExtractor) -> Result<f64> {
    require_frames(seq, 2, "subject consistency")?;
    let d: Vec<Vec<f64>> = seq.frames().iter().map(|f| fx.embed(f)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for t in 1..d.len() {
        total += 0.5 * (cosine_similarity(&d[0], &d[t])? + cosine_similarity(&d[t - 1], &d[t])?);
    }
    Ok(total / (d.len() - 1) as f64)
}

/// Drops the odd frames of `f_0..f_{2n}`, reconstructs them from their
/// neighbours and returns `1 - MAE / value_range`, floored at zero.
pub fn motion_smoothness(seq: &FrameSequence, interpolator: &dyn Interpolator) -> Result<f64> {
    let f = seq.len();
    if f < 3 || f.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "motion smoothness needs an odd number >= 3 of frames, got {f}"
        )));
    }
    let frames = seq.frames();
    let mut abs_err = 0.0;
    let mut count = 0usize;
    for i in (1..f).step_by(2) {
        let rebuilt = interpolator.interpolate(&frames[i - 1], &frames[i + 1]);
        if rebuilt.len() != frames[i].len() {
            return Err(Error::Shape("interpolator changed the frame size".into()));
        }
        abs_err += rebuilt.iter().zip(&frames[i]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += rebuilt.len();
    }
    let mae = abs_err / count as f64;
    Ok((1.0 - mae / seq.value_range()).max(0.0))
}

/// `log(max(sum_t ||flow(f_t, f_{t+1})||, 1e-8)) / 16`.
pub fn dynamic_degree(seq: &FrameSequence, flow: &dyn OpticalFlow) -> Result<f64> {
    require_frames(seq, 2, "dynamic degree")?;
    let total: f64 = seq
        .frames()
        .windows(2)
        .map(|w| flow.flow(&w[0], &w[1]).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    Ok(total.max(DYNAMIC_FLOOR).ln() / 16.0)
}

/// Mean of `scorer(frame) / scale`, with out-of-range scores clamped.
pub fn per_frame_quality(seq: &FrameSequence, scorer: &dyn FrameScorer, scale: f64) -> Result<f64> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Domain(format!("quality scale must be positive, got {scale}")));
    }
    let mut total = 0.0;
    for frame in seq.frames() {
        let s = scorer.score(frame, seq.value_range());
        let clamped = if s.is_nan() { 0.0 } else { s.clamp(0.0, scale) };
        if clamped != s {
            log::warn!("frame score {s} outside [0, {scale}], clamped to {clamped}");
        }
        total += clamped / scale;
    }
    Ok(total / seq.len() as f64)
}

/// Frame indices used for the video embedding: all frames when `F <= 8`,
/// otherwise `floor(j * F / 8)` for `j = 0..8`.
pub fn text_video_frame_indices(frames: usize) -> Vec<usize> {
    if frames <= TEXT_VIDEO_FRAMES {
        (0..frames).collect()
    } else {
        (0..TEXT_VIDEO_FRAMES).map(|j| j * frames / TEXT_VIDEO_FRAMES).collect()
    }
}

/// Cosine similarity between the video embedding of eight sampled frames and
/// the text embedding of `condition`.
pub fn text_video_consistency(seq: &FrameSequence, condition: &str, fx: &dyn FeatureExtractor) -> Result<f64> {
    require_frames(seq, 1, "text-video consistency")?;
    let frames: Vec<&[f64]> = text_video_frame_indices(seq.len())
        .into_iter()
        .map(|i| seq.frames()[i].as_slice())
        .collect();
    let video = fx.embed_video(&frames)?;
    let text = fx.embed_text(condition)?;
    cosine_similarity(&video, &text)
}

/// A named metric in a registry.
pub trait Metric: Send + Sync {
    fn evaluate(&self, seq: &FrameSequence, condition: &str) -> Result<f64>;
}

pub struct SubjectConsistency(pub Arc<dyn FeatureExtractor>);
pub struct MotionSmoothness(pub Arc<dyn Interpolator>);
pub struct DynamicDegree(pub Arc<dyn OpticalFlow>);
pub struct TextVideoConsistency(pub Arc<dyn FeatureExtractor>);
pub struct PerFrameQuality {
    pub scorer: Arc<dyn FrameScorer>,
    pub scale: f64,
}

impl Metric for SubjectConsistency {
    fn evaluate(&self, seq: &FrameSequence, _: &str) -> Result<f64> {
        subject_consistency(seq, self.0.as_ref())
    }
}

impl Metric for MotionSmoothness {
    fn evaluate(&self, seq: &FrameSequence, _: &str) -> Result<f64> {
        motion_smoothness(seq, self.0.as_ref())
    }
}

impl Metric for DynamicDegree {
    fn evaluate(&self, seq: &FrameSequence, _: &str) -> Result<f64> {
        dynamic_degree(seq, self.0.as_ref())
    }
}

impl Metric for TextVideoConsistency {
    fn evaluate(&self, seq: &FrameSequence, condition: &str) -> Result<f64> {
        text_video_consistency(seq, condition, self.0.as_ref())
    }
}

impl Metric for PerFrameQuality {
    fn evaluate(&self, seq: &FrameSequence, _: &str) -> Result<f64> {
        per_frame_quality(seq, self.scorer.as_ref(), self.scale)
    }
}

/// Metric values with their names, in registry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl MetricVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.names.iter().cloned().zip(self.values.iter().copied()).collect()
    }
}

/// An ordered list of named metrics.
#[derive(Default)]
pub struct MetricRegistry {
    entries: Vec<(String, Arc<dyn Metric>)>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, metric: Arc<dyn Metric>) -> Self {
        self.entries.push((name.into(), metric));
        self
    }

    /// The six standard metrics, sharing one feature extractor.
    pub fn standard(fx: Arc<dyn FeatureExtractor>) -> Self {
        Self::from_names(&DEFAULT_METRICS, fx).expect("default names are known")
    }

    /// A registry of standard metrics chosen by name, in the given order.
    pub fn from_names<S: AsRef<str>>(names: &[S], fx: Arc<dyn FeatureExtractor>) -> Result<Self> {
        let mut reg = Self::new();
        for name in names {
            let name = name.as_ref();
            let metric: Arc<dyn Metric> = match name {
                "subject_consistency" => Arc::new(SubjectConsistency(fx.clone())),
                "motion_smoothness" => Arc::new(MotionSmoothness(Arc::new(LinearMidpoint))),
                "dynamic_degree" => Arc::new(DynamicDegree(Arc::new(FrameDifference))),
                "aesthetic_quality" => Arc::new(PerFrameQuality {
                    scorer: Arc::new(ContrastScorer { scale: 10.0 }),
                    scale: 10.0,
                }),
                "imaging_quality" => Arc::new(PerFrameQuality {
                    scorer: Arc::new(NoiseScorer { scale: 100.0 }),
                    scale: 100.0,
                }),
                "text_video_consistency" => Arc::new(TextVideoConsistency(fx.clone())),
                other => return Err(Error::Config(format!("unknown metric `{other}`"))),
            };
            reg = reg.with(name, metric);
        }
        Ok(reg)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metric_vector(&self, seq: &FrameSequence, condition: &str) -> Result<MetricVector> {
        let values = self
            .entries
            .iter()
            .map(|(name, m)| {
                m.evaluate(seq, condition).map_err(|e| Error::Metric {
                    name: name.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricVector {
            names: self.names(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: Vec<Vec<f64>>, range: f64) -> FrameSequence {
        FrameSequence::new(frames, range).unwrap()
    }

    #[test]
    fn subject_consistency_cases() {
        let fx = IdentityNormalize::new(2, 0);
        let same = seq(vec![vec![1.0, 2.0]; 4], 1.0);
        assert!((subject_consistency(&same, &fx).unwrap() - 1.0).abs() < 1e-12);
        let s = seq(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], 1.0);
        assert!((subject_consistency(&s, &fx).unwrap() - 0.25).abs() < 1e-12);
        assert!(subject_consistency(&seq(vec![vec![1.0, 0.0]], 1.0), &fx).is_err());
        let zero = seq(vec![vec![0.0, 0.0], vec![1.0, 0.0]], 1.0);
        assert!(subject_consistency(&zero, &fx).is_err());
    }

    #[test]
    fn smoothness_cases() {
        let linear = seq((0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect(), 255.0);
        assert_eq!(motion_smoothness(&linear, &LinearMidpoint).unwrap(), 1.0);
        let s = seq(vec![vec![0.0], vec![10.0], vec![2.0]], 255.0);
        assert!((motion_smoothness(&s, &LinearMidpoint).unwrap() - (1.0 - 9.0 / 255.0)).abs() < 1e-12);
        assert!(motion_smoothness(&seq(vec![vec![0.0]; 4], 1.0), &LinearMidpoint).is_err());
    }

    #[test]
    fn dynamic_cases() {
        let still = seq(vec![vec![1.0, 1.0]; 3], 1.0);
        assert!((dynamic_degree(&still, &FrameDifference).unwrap() - 1e-8f64.ln() / 16.0).abs() < 1e-12);
        let unit = seq(vec![vec![0.0, 0.0], vec![0.0, 1.0]], 1.0);
        assert_eq!(dynamic_degree(&unit, &FrameDifference).unwrap(), 0.0);
        let s = seq(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![3.0, 5.0]], 1.0);
        assert!((dynamic_degree(&s, &FrameDifference).unwrap() - 8f64.ln() / 16.0).abs() < 1e-12);
    }

    #[test]
    fn per_frame_cases() {
        let s = seq(vec![vec![2.0], vec![4.0], vec![6.0]], 1.0);
        let first = |f: &[f64], _: f64| f[0];
        assert!((per_frame_quality(&s, &first, 10.0).unwrap() - 0.4).abs() < 1e-12);
        let constant = |_: &[f64], _: f64| 3.0;
        assert!((per_frame_quality(&s, &constant, 10.0).unwrap() - 0.3).abs() < 1e-12);
        let high = |_: &[f64], _: f64| 50.0;
        assert_eq!(per_frame_quality(&s, &high, 10.0).unwrap(), 1.0);
    }

    #[test]
    fn text_video_cases() {
        assert_eq!(text_video_frame_indices(16), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(text_video_frame_indices(5), vec![0, 1, 2, 3, 4]);
        let fx = IdentityNormalize::new(3, 4);
        let t = fx.embed_text("a red ball").unwrap();
        let s = seq(vec![t.clone(); 3], 1.0);
        assert!((text_video_consistency(&s, "a red ball", &fx).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn registry_order_and_errors() {
        let fx: Arc<dyn FeatureExtractor> = Arc::new(IdentityNormalize::new(2, 0));
        let s = seq(vec![vec![0.1, 0.2], vec![0.3, 0.1], vec![0.2, 0.4]], 1.0);
        let full = MetricRegistry::standard(fx.clone());
        assert_eq!(full.names(), DEFAULT_METRICS.map(String::from).to_vec());
        let v = full.metric_vector(&s, "c").unwrap();
        let rev: Vec<&str> = DEFAULT_METRICS.iter().rev().copied().collect();
        let w = MetricRegistry::from_names(&rev, fx.clone())
            .unwrap()
            .metric_vector(&s, "c")
            .unwrap();
        assert_eq!(v.to_map(), w.to_map());
        let single = MetricRegistry::from_names(&["dynamic_degree"], fx.clone()).unwrap();
        assert_eq!(single.metric_vector(&s, "c").unwrap().values.len(), 1);
        let even = seq(vec![vec![0.1, 0.2]; 4], 1.0);
        let err = full.metric_vector(&even, "c").unwrap_err();
        assert!(err.to_string().contains("motion_smoothness"));
        assert!(MetricRegistry::from_names(&["bogus"], fx).is_err());
    }
}
