//! Reward calibration: choose grid weights for a normalised linear combination
//! of metrics that maximises Pearson correlation with preference feedback.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{FeatureExtractor, FrameSequence, IdentityNormalize, MetricRegistry};
use crate::rng::keyed_rng;
use std::sync::Arc;

/// Default per-metric weight grid.
pub const DEFAULT_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Correlations closer than this are treated as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;
/// Default number of permutations in [`significance`].
pub const DEFAULT_RESAMPLES: usize = 10_000;

/// `sum_i w_i r_i / sum_i w_i`.
pub fn combine(row: &[f64], weights: &[f64]) -> Result<f64> {
    if row.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} metric values but {} weights",
            row.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::Domain("weights sum to zero".into()));
    }
    Ok(row.iter().zip(weights).map(|(r, w)| r * w).sum::<f64>() / total)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "pearson inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 samples, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("an input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Metric rows with their feedback scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDataset {
    pub names: Vec<String>,
    pub metrics: Vec<Vec<f64>>,
    pub feedback: Vec<f64>,
}

impl CalibrationDataset {
    pub fn new(names: Vec<String>, metrics: Vec<Vec<f64>>, feedback: Vec<f64>) -> Result<Self> {
        if metrics.len() != feedback.len() {
            return Err(Error::Shape(format!(
                "{} metric rows but {} feedback values",
                metrics.len(),
                feedback.len()
            )));
        }
        if metrics.len() < 3 {
            return Err(Error::Shape(format!(
                "calibration needs at least 3 samples, got {}",
                metrics.len()
            )));
        }
        if names.is_empty() || metrics.iter().any(|r| r.len() != names.len()) {
            return Err(Error::Shape(format!(
                "every row must have {} metric values",
                names.len()
            )));
        }
        if metrics.iter().flatten().chain(&feedback).any(|v| !v.is_finite()) {
            return Err(Error::Domain("calibration data must be finite".into()));
        }
        Ok(Self {
            names,
            metrics,
            feedback,
        })
    }

    pub fn len(&self) -> usize {
        self.feedback.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feedback.is_empty()
    }

    /// Reads a CSV whose header lists the metric names followed by `feedback`.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let Some(fb) = header.iter().position(|h| h == "feedback") else {
            return Err(Error::Config("calibration CSV is missing the `feedback` column".into()));
        };
        if fb != header.len() - 1 {
            return Err(Error::Config("the `feedback` column must come last".into()));
        }
        let names = header[..fb].to_vec();
        let mut metrics = Vec::new();
        let mut feedback = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: Vec<f64> = rec
                .iter()
                .enumerate()
                .map(|(col, v)| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::Config(format!(
                            "row {}: column `{}` is not a number: `{v}`",
                            line + 2,
                            header.get(col).map_or("?", String::as_str)
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            feedback.push(parsed[fb]);
            metrics.push(parsed[..fb].to_vec());
        }
        Self::new(names, metrics, feedback)
    }

    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.names.clone();
        header.push("feedback".into());
        w.write_record(&header)?;
        for (row, f) in self.metrics.iter().zip(&self.feedback) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(f.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn combined(&self, weights: &[f64]) -> Result<Vec<f64>> {
        self.metrics.iter().map(|r| combine(r, weights)).collect()
    }
}

/// Outcome of a grid calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: Vec<f64>,
    pub correlation: f64,
    pub grid: Vec<f64>,
    /// Weight vectors whose combination was non-degenerate.
    pub evaluated: usize,
    /// Weight vectors skipped for a zero-sum or zero-variance combination.
    pub skipped: usize,
    /// Best candidates by correlation, ties in lexicographic order.
    pub top: Vec<(Vec<f64>, f64)>,
}

fn weights_for(mut index: usize, grid: &[f64], m: usize) -> Vec<f64> {
    let g = grid.len();
    let mut w = vec![0.0; m];
    for slot in w.iter_mut().rev() {
        *slot = grid[index % g];
        index /= g;
    }
    w
}

/// Exhaustive search over `grid^M` weight vectors.
///
/// The grid is sorted and deduplicated, so enumeration order is lexicographic
/// and a sequential scan that only replaces the incumbent on a strict
/// improvement (beyond [`TIE_TOLERANCE`]) returns the lexicographically
/// smallest maximiser. `top_n` limits the audit table.
pub fn calibrate(data: &CalibrationDataset, grid: &[f64], top_n: usize) -> Result<Calibration> {
    let mut grid: Vec<f64> = grid.to_vec();
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::Config(
            "the weight grid must be nonempty, finite and nonnegative".into(),
        ));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let m = data.names.len();
    let total = (grid.len() as u128).pow(m as u32);
    if total > 50_000_000 {
        return Err(Error::Config(format!(
            "{total} weight vectors are too many to enumerate"
        )));
    }
    let total = total as usize;
    let scores: Vec<Option<f64>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let w = weights_for(idx, &grid, m);
            if w.iter().sum::<f64>() == 0.0 {
                return None;
            }
            let combined = data.combined(&w).ok()?;
            pearson(&combined, &data.feedback).ok()
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (idx, s) in scores.iter().enumerate() {
        if let Some(r) = *s {
            match best {
                Some((_, b)) if r <= b + TIE_TOLERANCE => {}
                _ => best = Some((idx, r)),
            }
        }
    }
    let evaluated = scores.iter().filter(|s| s.is_some()).count();
    let Some((idx, correlation)) = best else {
        return Err(Error::Calibration(
            "every weight vector gives a degenerate combination".into(),
        ));
    };
    let mut ranked: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|r| (i, r)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top = ranked
        .into_iter()
        .take(top_n)
        .map(|(i, r)| (weights_for(i, &grid, m), r))
        .collect();
    Ok(Calibration {
        weights: weights_for(idx, &grid, m),
        correlation,
        grid,
        evaluated,
        skipped: total - evaluated,
        top,
    })
}

/// Two-sided permutation p-value for the correlation of `x` and `y`:
/// `(1 + #{|r_perm| >= |r_obs|}) / (1 + resamples)`.
pub fn significance(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    let observed = pearson(x, y)?.abs();
    let mut rng = keyed_rng(seed, [0x5349_474e, 0, 0]);
    let mut shuffled = y.to_vec();
    let mut hits = 0usize;
    for _ in 0..resamples {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled)?.abs() >= observed - TIE_TOLERANCE {
            hits += 1;
        }
    }
    Ok((hits + 1) as f64 / (resamples + 1) as f64)
}

/// Latent traits of a synthetic video.
#[derive(Clone, Debug)]
struct VideoTraits {
    alignment: f64,
    speed: f64,
    jitter: f64,
    noise: f64,
    contrast: f64,
}

/// Frame count and size of synthetic calibration videos.
pub const SYNTHETIC_FRAMES: usize = 9;
pub const SYNTHETIC_FRAME_DIM: usize = 16;

fn synthetic_video<R: Rng>(condition_dir: &[f64], rng: &mut R) -> Result<FrameSequence> {
    let d = condition_dir.len();
    let traits = VideoTraits {
        alignment: rng.random_range(0.0..1.0),
        speed: 10f64.powf(rng.random_range(-3.0..0.0)),
        jitter: rng.random_range(0.0..0.3),
        noise: rng.random_range(0.0..0.3),
        contrast: rng.random_range(0.05..0.5),
    };
    let gauss = |rng: &mut R| -> Vec<f64> { (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let other = crate::metrics::normalize(&gauss(rng))?;
    let velocity = crate::metrics::normalize(&gauss(rng))?;
    let base: Vec<f64> = condition_dir
        .iter()
        .zip(&other)
        .map(|(u, b)| traits.contrast * (traits.alignment * u + (1.0 - traits.alignment) * b) * (d as f64).sqrt())
        .collect();
    let frames = (0..SYNTHETIC_FRAMES)
        .map(|i| {
            let shake = gauss(rng);
            let pixel = gauss(rng);
            let shift = traits.speed * i as f64 / SYNTHETIC_FRAMES as f64;
            let wobble = if i % 2 == 1 { traits.jitter } else { 0.0 };
            (0..d)
                .map(|k| {
                    base[k]
                        + shift * velocity[k]
                        + wobble * shake[k] / (d as f64).sqrt()
                        + traits.noise * pixel[k] * 0.5
                })
                .collect()
        })
        .collect();
    FrameSequence::new(frames, 1.0)
}

/// Synthetic preference data: toy videos under several text conditions, their
/// standard metric vectors, and feedback `combine(metrics, hidden) + N(0, noise_sd^2)`.
#[derive(Clone, Debug)]
pub struct SyntheticFeedback {
    pub dataset: CalibrationDataset,
    /// Noiseless hidden combination per sample.
    pub hidden_scores: Vec<f64>,
}

pub fn synthetic_feedback(
    conditions: usize,
    per_condition: usize,
    hidden: &[f64],
    noise_sd: f64,
    seed: u64,
) -> Result<SyntheticFeedback> {
    let fx = Arc::new(IdentityNormalize::new(SYNTHETIC_FRAME_DIM, seed));
    let registry = MetricRegistry::standard(fx.clone());
    if hidden.len() != registry.len() {
        return Err(Error::Shape(format!(
            "hidden weights have {} entries, the standard registry has {}",
            hidden.len(),
            registry.len()
        )));
    }
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..conditions * per_condition)
        .into_par_iter()
        .map(|n| {
            let c = n / per_condition;
            let condition = format!("condition {c}");
            let mut rng = keyed_rng(seed, [0x4645_4544, c as u64, (n % per_condition) as u64]);
            let dir = fx.embed_text(&condition)?;
            let video = synthetic_video(&dir, &mut rng)?;
            let values = registry.metric_vector(&video, &condition)?.values;
            let clean = combine(&values, hidden)?;
            let noise = if noise_sd > 0.0 {
                Normal::new(0.0, noise_sd)
                    .map_err(|e| Error::Domain(e.to_string()))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            Ok((values, clean, clean + noise))
        })
        .collect::<Result<_>>()?;
    let hidden_scores = rows.iter().map(|r| r.1).collect();
    let dataset = CalibrationDataset::new(
        registry.names(),
        rows.iter().map(|r| r.0.clone()).collect(),
        rows.iter().map(|r| r.2).collect(),
    )?;
    Ok(SyntheticFeedback { dataset, hidden_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn textbook_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine(&[0.2, 0.8, 0.5], &[0.0, 1.0, 0.0]).unwrap(), 0.8);
        assert!((combine(&[0.2, 0.8], &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        let w = [0.25, 0.5, 1.0];
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let row = [0.1, 0.7, 0.3];
        assert!((combine(&row, &w).unwrap() - combine(&row, &w2).unwrap()).abs() < 1e-15);
        assert!(combine(&row, &[0.0; 3]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        let y = [2.0, 1.0, 4.0, 5.0];
        assert!((pearson(&x, &y).unwrap() - textbook_pearson(&x, &y)).abs() < 1e-12);
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    proptest! {
        #[test]
        fn pearson_properties(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-12);
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((r - pearson(&xs, &y).unwrap()).abs() < 1e-9);
            }
        }
    }

    fn dataset(rows: Vec<Vec<f64>>, feedback: Vec<f64>) -> CalibrationDataset {
        let m = rows[0].len();
        CalibrationDataset::new((0..m).map(|i| format!("m{i}")).collect(), rows, feedback).unwrap()
    }

    #[test]
    fn single_metric_picks_smallest_weight() {
        let d = dataset(vec![vec![1.0], vec![2.0], vec![4.0]], vec![1.0, 3.0, 2.0]);
        let c = calibrate(&d, &DEFAULT_GRID, 5).unwrap();
        assert_eq!(c.weights, vec![0.25]);
        assert_eq!(c.evaluated, 4);
        assert_eq!(c.skipped, 1);
    }

    #[test]
    fn recovers_one_hot_class() {
        let mut rng = keyed_rng(3, [0, 0, 0]);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let fb: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let c = calibrate(&dataset(rows, fb), &DEFAULT_GRID, 50).unwrap();
        assert_eq!(c.weights, vec![0.0, 0.0, 0.25, 0.0, 0.0, 0.0]);
        assert_eq!(c.evaluated + c.skipped, 15625);
        assert_eq!(c.top.len(), 50);
    }

    #[test]
    fn all_degenerate_fails() {
        let d = dataset(vec![vec![1.0, 2.0]; 4], vec![1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(calibrate(&d, &DEFAULT_GRID, 1), Err(Error::Calibration(_))));
    }

    #[test]
    fn significance_examples() {
        let x: Vec<f64> = (0..50).map(f64::from).collect();
        assert!(significance(&x, &x, 2000, 1).unwrap() < 0.01);
        let a = significance(&x, &x, 500, 7).unwrap();
        let b = significance(&x, &x, 500, 7).unwrap();
        assert_eq!(a, b);
        let xs = [-1.0, 0.0, 1.0, 0.0];
        let ys = [1.0, 0.0, 1.0, 0.5];
        assert!(pearson(&xs, &ys).unwrap().abs() < 1e-15);
        assert!(significance(&xs, &ys, 500, 3).unwrap() > 0.99);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = dataset(
            vec![vec![0.1, 0.2], vec![0.3, 0.5], vec![0.9, 0.4]],
            vec![1.0, 5.0, 9.0],
        );
        d.to_csv(&path).unwrap();
        assert_eq!(CalibrationDataset::from_csv(&path).unwrap(), d);
        let bad = "a,b\n1,2\n3,4\n5,6\n";
        let err = CalibrationDataset::from_reader(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("feedback"));
    }
}
