use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dlbs::calibration::{calibrate, significance, CalibrationDataset, DEFAULT_GRID, DEFAULT_RESAMPLES};
use dlbs::harness::record::{read_records_csv, write_atomic, write_json};
use dlbs::harness::report::DEFAULT_FLIPS;
use dlbs::harness::{aggregate, run_ablation, run_single, run_sweep, write_report, PairSpec, RunConfig, OUTPUT_ENV};

#[derive(Parser)]
#[command(
    name = "dlbs",
    version,
    about = "Diffusion latent beam search experiments on analytic testbeds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $DLBS_OUT, then `output.dir`, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Added to every seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write its record.
    Search(Common),
    /// Run the configured sweep grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Skip cells whose records already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Fit metric weights to feedback from a CSV dataset.
    Calibrate {
        /// CSV with metric columns followed by `feedback`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated weight grid.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Estimator error and final reward as a function of lookahead length.
    AblateLookahead(Common),
    /// Aggregate a results table.
    Report {
        /// results.csv from a sweep.
        #[arg(long)]
        results: PathBuf,
        /// Comma-separated grouping keys.
        #[arg(long, value_delimiter = ',', default_value = "problem,method,budget,t_prime")]
        group_by: Vec<String>,
        /// Paired comparison such as `method=dlbs>method=bon`; repeatable.
        #[arg(long = "pair")]
        pairs: Vec<String>,
        /// Group key used as the x column of plot data.
        #[arg(long, default_value = "budget")]
        x: String,
        #[arg(long, default_value_t = DEFAULT_FLIPS)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<&Path>, config: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(p) = std::env::var(OUTPUT_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    config
        .and_then(|c| c.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn set_workers(workers: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn write_problem(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let problem = cfg.problem.resolve()?;
    write_json(&out.join("problem.json"), &problem)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Search(c) => {
            let mut cfg = RunConfig::load(&c.config)?;
            cfg.search.seed += c.seed_offset;
            let out = output_dir(c.out.as_deref(), Some(&cfg));
            write_problem(&out, &cfg)?;
            let rec = run_single(&cfg, c.workers, Some(&out))?;
            write_json(&out.join(rec.file_name()), &rec)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
        }
        Command::Sweep { common: c, resume } => {
            let cfg = RunConfig::load(&c.config)?;
            let out = output_dir(c.out.as_deref(), Some(&cfg));
            write_problem(&out, &cfg)?;
            let outcome = run_sweep(&cfg, &out, c.workers, c.seed_offset, resume)?;
            eprintln!(
                "{} runs ({} resumed, {} failed) -> {}",
                outcome.records.len(),
                outcome.resumed,
                outcome.failed,
                outcome.results_csv.display()
            );
        }
        Command::Calibrate {
            data,
            grid,
            resamples,
            seed,
            out,
            workers,
        } => {
            set_workers(workers)?;
            let dataset = CalibrationDataset::from_csv(&data)?;
            let grid = grid.unwrap_or_else(|| DEFAULT_GRID.to_vec());
            let cal = calibrate(&dataset, &grid, 50)?;
            let combined = dataset.combined(&cal.weights)?;
            let p_value = significance(&combined, &dataset.feedback, resamples, seed)?;
            let out = output_dir(out.as_deref(), None);
            let weights: serde_json::Map<String, serde_json::Value> = dataset
                .names
                .iter()
                .cloned()
                .zip(cal.weights.iter().map(|w| serde_json::json!(w)))
                .collect();
            let doc = serde_json::json!({
                "weights": weights,
                "correlation": cal.correlation,
                "p_value": p_value,
                "grid": cal.grid,
                "evaluated": cal.evaluated,
                "skipped": cal.skipped,
            });
            write_json(&out.join("weights.json"), &doc)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = dataset.names.clone();
            header.push("correlation".into());
            w.write_record(&header)?;
            for (ws, r) in &cal.top {
                let mut row: Vec<String> = ws.iter().map(f64::to_string).collect();
                row.push(r.to_string());
                w.write_record(&row)?;
            }
            write_atomic(&out.join("correlations.csv"), &w.into_inner()?)?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::AblateLookahead(c) => {
            set_workers(c.workers)?;
            let mut cfg = RunConfig::load(&c.config)?;
            cfg.search.seed += c.seed_offset;
            let out = output_dir(c.out.as_deref(), Some(&cfg));
            let rows = run_ablation(&cfg)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r)?;
            }
            let path = out.join("ablation.csv");
            write_atomic(&path, &w.into_inner()?)?;
            eprintln!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Report {
            results,
            group_by,
            pairs,
            x,
            resamples,
            seed,
            out,
        } => {
            let records = read_records_csv(&results)?;
            if records.is_empty() {
                bail!("{} holds no records", results.display());
            }
            let pairs = pairs
                .iter()
                .map(|p| PairSpec::parse(p))
                .collect::<Result<Vec<_>, _>>()?;
            let report = aggregate(&records, &group_by, &pairs, resamples, seed)?;
            let out = out.unwrap_or_else(|| results.parent().unwrap_or(Path::new(".")).to_path_buf());
            let files = write_report(&report, &out, &x)?;
            eprintln!("report.json and {} plot tables -> {}", files.len(), out.display());
        }
    }
    Ok(())
}
