//! Aggregation of run records: group statistics, seed-paired comparisons and
//! plot-ready tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::record::{write_atomic, write_json, RunRecord, RunStatus};
use crate::rng::keyed_rng;

/// Default number of sign flips in [`sign_flip_test`].
pub const DEFAULT_FLIPS: usize = 10_000;

/// Mean and standard error (unbiased variance); the error is 0 for one value.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One-sided paired sign-flip permutation test of `mean(diffs) > 0`:
/// `(1 + #{mean(s * d) >= mean(d)}) / (1 + resamples)` over random signs `s`.
pub fn sign_flip_test(diffs: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    let observed: f64 = diffs.iter().sum();
    let tol = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = keyed_rng(seed, [0x464c_4950, n as u64, 0]);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs.iter().map(|d| if rng.random::<bool>() { *d } else { -*d }).sum();
        if s >= observed - tol {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (resamples + 1) as f64
}

/// The value of a grouping or filter key on a record.
pub fn record_key(rec: &RunRecord, key: &str) -> Result<String> {
    Ok(match key {
        "problem" => rec.problem.clone(),
        "method" => rec.method.to_string(),
        "solver" => rec.solver.as_str().to_string(),
        "k" => rec.k.to_string(),
        "b" => rec.b.to_string(),
        "budget" => rec.budget.to_string(),
        "t_prime" => rec.t_prime.to_string(),
        "eta" => rec.eta.to_string(),
        "steps" => rec.steps.to_string(),
        "reward_kind" => rec.reward_kind.clone(),
        "seed" => rec.seed.to_string(),
        other => return Err(Error::Config(format!("unknown report key `{other}`"))),
    })
}

/// `a > b`, each side a comma-separated list of `key=value` filters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    pub a: Vec<(String, String)>,
    pub b: Vec<(String, String)>,
}

impl PairSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let (a, b) = text
            .split_once('>')
            .ok_or_else(|| Error::Config(format!("pair `{text}` must look like `method=dlbs>method=bon`")))?;
        let side = |s: &str| -> Result<Vec<(String, String)>> {
            s.split(',')
                .map(|kv| {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("filter `{kv}` in pair `{text}` needs key=value")))?;
                    Ok((k.trim().to_string(), v.trim().to_string()))
                })
                .collect()
        };
        Ok(Self {
            a: side(a)?,
            b: side(b)?,
        })
    }

    fn label(filters: &[(String, String)]) -> String {
        filters
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn matches(rec: &RunRecord, filters: &[(String, String)]) -> Result<bool> {
    for (k, v) in filters {
        if record_key(rec, k)? != *v {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub keys: BTreeMap<String, String>,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub problem: String,
    pub pairs: usize,
    pub mean_difference: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub group_by: Vec<String>,
    pub groups: Vec<GroupStats>,
    pub comparisons: Vec<Comparison>,
    pub failed_runs: usize,
}

fn paired(ok: &[&RunRecord], spec: &PairSpec, problem: &str) -> Result<Option<Vec<f64>>> {
    let side = |filters: &[(String, String)]| -> Result<BTreeMap<u64, f64>> {
        let mut by_seed = BTreeMap::new();
        for r in ok {
            if r.problem == problem && matches(r, filters)? {
                let reward = r.final_reward.expect("ok records carry a reward");
                if by_seed.insert(r.seed, reward).is_some() {
                    return Err(Error::Config(format!(
                        "pair side `{}` matches several runs with seed {} on {problem}; add filters",
                        PairSpec::label(filters),
                        r.seed
                    )));
                }
            }
        }
        Ok(by_seed)
    };
    let (a, b) = (side(&spec.a)?, side(&spec.b)?);
    if a.is_empty() && b.is_empty() {
        return Ok(None);
    }
    let seeds_a: BTreeSet<u64> = a.keys().copied().collect();
    let seeds_b: BTreeSet<u64> = b.keys().copied().collect();
    let orphans: Vec<u64> = seeds_a.symmetric_difference(&seeds_b).copied().collect();
    if !orphans.is_empty() {
        return Err(Error::Config(format!(
            "pair `{}` > `{}` on {problem} has unmatched seeds {orphans:?}",
            PairSpec::label(&spec.a),
            PairSpec::label(&spec.b)
        )));
    }
    Ok(Some(a.iter().map(|(s, ra)| ra - b[s]).collect()))
}

/// Groups successful records by `group_by` and runs the requested paired
/// comparisons separately on every problem.
pub fn aggregate(
    records: &[RunRecord],
    group_by: &[String],
    pairs: &[PairSpec],
    resamples: usize,
    seed: u64,
) -> Result<AggregateReport> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.status == RunStatus::Ok).collect();
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for r in &ok {
        let key = group_by.iter().map(|k| record_key(r, k)).collect::<Result<Vec<_>>>()?;
        groups
            .entry(key)
            .or_default()
            .push(r.final_reward.expect("ok records carry a reward"));
    }
    let groups = groups
        .into_iter()
        .map(|(key, xs)| {
            let (mean, stderr) = mean_stderr(&xs);
            GroupStats {
                keys: group_by.iter().cloned().zip(key).collect(),
                mean,
                stderr,
                count: xs.len(),
            }
        })
        .collect();
    let problems: BTreeSet<&str> = ok.iter().map(|r| r.problem.as_str()).collect();
    let mut comparisons = Vec::new();
    for spec in pairs {
        for problem in &problems {
            if let Some(diffs) = paired(&ok, spec, problem)? {
                let (mean_difference, _) = mean_stderr(&diffs);
                comparisons.push(Comparison {
                    a: PairSpec::label(&spec.a),
                    b: PairSpec::label(&spec.b),
                    problem: problem.to_string(),
                    pairs: diffs.len(),
                    mean_difference,
                    p_value: sign_flip_test(&diffs, resamples, seed),
                });
            }
        }
    }
    Ok(AggregateReport {
        group_by: group_by.to_vec(),
        groups,
        comparisons,
        failed_runs: records.len() - ok.len(),
    })
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `report.json` and one `plotdata/<series>.csv` per combination of
/// the non-`x` group keys, with columns `x_key, mean, stderr`.
pub fn write_report(report: &AggregateReport, out_dir: &Path, x_key: &str) -> Result<Vec<std::path::PathBuf>> {
    write_json(&out_dir.join("report.json"), report)?;
    let mut series: BTreeMap<String, Vec<(String, f64, f64)>> = BTreeMap::new();
    for g in &report.groups {
        let Some(x) = g.keys.get(x_key) else {
            return Err(Error::Config(format!(
                "plot axis `{x_key}` is not one of the group keys"
            )));
        };
        let label: Vec<String> = g
            .keys
            .iter()
            .filter(|(k, _)| k.as_str() != x_key)
            .map(|(k, v)| format!("{k}-{v}"))
            .collect();
        let label = if label.is_empty() {
            "all".to_string()
        } else {
            sanitize(&label.join("_"))
        };
        series.entry(label).or_default().push((x.clone(), g.mean, g.stderr));
    }
    let dir = out_dir.join("plotdata");
    let mut written = Vec::new();
    for (label, mut rows) in series {
        rows.sort_by(|a, b| match (a.0.parse::<f64>(), b.0.parse::<f64>()) {
            (Ok(x), Ok(y)) => x.total_cmp(&y),
            _ => a.0.cmp(&b.0),
        });
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([x_key, "mean", "stderr"])?;
        for (x, m, s) in rows {
            w.write_record([x, m.to_string(), s.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        let path = dir.join(format!("{label}.csv"));
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::RunConfig;
    use crate::search::Method;

    fn rec(method: Method, seed: u64, reward: f64) -> RunRecord {
        let mut cfg = RunConfig::default();
        cfg.search.method = method;
        cfg.search.seed = seed;
        if method == Method::Bon {
            cfg.search.k = 1;
        }
        let mut r = RunRecord::failed(&cfg, &Error::Config(String::new()));
        r.status = RunStatus::Ok;
        r.error = None;
        r.final_reward = Some(reward);
        r
    }

    #[test]
    fn stats_helpers() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
        assert!(sign_flip_test(&[1.0; 20], 2000, 0) < 0.01);
        assert!(sign_flip_test(&[-1.0; 20], 2000, 0) > 0.99);
        assert_eq!(
            sign_flip_test(&[0.3, -0.1, 0.2], 500, 4),
            sign_flip_test(&[0.3, -0.1, 0.2], 500, 4)
        );
    }

    #[test]
    fn groups_and_pairs() {
        let mut records: Vec<RunRecord> = (0..10).map(|s| rec(Method::Dlbs, s, 1.0 + s as f64)).collect();
        records.extend((0..10).map(|s| rec(Method::Bon, s, s as f64)));
        let pair = PairSpec::parse("method=dlbs>method=bon").unwrap();
        let rep = aggregate(&records, &["method".into()], &[pair], 2000, 1).unwrap();
        assert_eq!(rep.groups.len(), 2);
        let dl = rep.groups.iter().find(|g| g.keys["method"] == "dlbs").unwrap();
        assert_eq!(dl.mean, 5.5);
        assert_eq!(dl.count, 10);
        assert_eq!(rep.comparisons.len(), 1);
        assert_eq!(rep.comparisons[0].mean_difference, 1.0);
        assert!(rep.comparisons[0].p_value < 0.01);

        records.push(rec(Method::Dlbs, 42, 0.0));
        let pair = PairSpec::parse("method=dlbs>method=bon").unwrap();
        let err = aggregate(&records, &["method".into()], &[pair], 100, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("42"), "{err}");
    }

    #[test]
    fn plot_files() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<RunRecord> = (0..4).map(|s| rec(Method::Dlbs, s, s as f64)).collect();
        let rep = aggregate(&records, &["method".into(), "k".into()], &[], 10, 0).unwrap();
        let files = write_report(&rep, dir.path(), "k").unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("k,mean,stderr\n4,1.5,"));
        assert!(dir.path().join("report.json").exists());
        assert!(PairSpec::parse("nonsense").is_err());
    }
}
