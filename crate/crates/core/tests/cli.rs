use std::path::Path;
use std::process::{Command, Output};

use dlbs::calibration::synthetic_feedback;
use dlbs::harness::config::RunConfig;
use dlbs::harness::record::{expand_sweep, read_record, read_records_csv, RunStatus};

fn dlbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlbs"))
        .args(args)
        .env_remove("DLBS_OUT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_SWEEP: &str = r#"
[problem]
name = "bimodal-1d"

[schedule]
steps = 10

[sweep]
seed_count = 3

[sweep.axes]
method = ["bon", "dlbs"]
budget = [4]
"#;

#[test]
fn search_writes_record_and_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[search]\nmethod = \"dlbs\"\nk = 2\nb = 2\nseed = 4\n",
    );
    let out_dir = dir.path().join("out");
    let out = dlbs(&["search", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_dir.join("problem.json").exists());
    let record_file = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().ends_with("_4.json"))
        .expect("record written");
    let rec = read_record(&record_file).unwrap();
    assert_eq!(rec.status, RunStatus::Ok);
    assert_eq!(rec.nfe, Some(rec.nfe_expected));
    assert_eq!(rec.seed, 4);
}

#[test]
fn sweep_resumes_without_rerunning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SMALL_SWEEP);
    let out_dir = dir.path().join("sweep");
    let out_str = out_dir.to_str().unwrap();
    let first = dlbs(&["sweep", "--config", &cfg, "--out", out_str]);
    assert!(first.status.success(), "{}", stderr(&first));
    let rows = read_records_csv(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.status == RunStatus::Ok));

    let second = dlbs(&["sweep", "--config", &cfg, "--out", out_str, "--resume"]);
    assert!(second.status.success());
    assert!(stderr(&second).contains("6 resumed"), "{}", stderr(&second));
    let again = read_records_csv(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn unknown_sweep_axis_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[sweep]\nseed_count = 2\n[sweep.axes]\ntemperature = [1.0]\n",
    );
    let out_dir = dir.path().join("o");
    let out = dlbs(&["sweep", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("temperature"), "{}", stderr(&out));
    assert!(!out_dir.join("records").exists());
}

#[test]
fn invalid_value_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[search]\nmethod = \"dlbs\"\neta = 1.5\n");
    let out = dlbs(&["search", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("eta") && msg.contains("line 3"), "{msg}");
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "run.toml",
        "[output]\ndir = \"ignored\"\n[schedule]\nsteps = 5\n",
    );
    let env_dir = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_dlbs"))
        .args(["search", "--config", &cfg])
        .env("DLBS_OUT", &env_dir)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(env_dir.join("problem.json").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn report_writes_comparisons_and_plot_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SMALL_SWEEP);
    let out_dir = dir.path().join("sweep");
    let out_str = out_dir.to_str().unwrap();
    assert!(dlbs(&["sweep", "--config", &cfg, "--out", out_str]).status.success());
    let results = out_dir.join("results.csv");
    let report_dir = dir.path().join("report");
    let out = dlbs(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--pair",
        "method=dlbs>method=bon",
        "--resamples",
        "200",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let comparisons = report["comparisons"].as_array().unwrap();
    assert_eq!(comparisons.len(), 1);
    assert_eq!(comparisons[0]["pairs"], 3);
    assert_eq!(std::fs::read_dir(report_dir.join("plotdata")).unwrap().count(), 2);
}

#[test]
fn calibrate_recovers_weights_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let hidden = [0.0, 0.5, 0.0, 1.0, 0.0, 0.25];
    let data = synthetic_feedback(4, 16, &hidden, 0.0, 9).unwrap();
    let csv = dir.path().join("feedback.csv");
    data.dataset.to_csv(&csv).unwrap();
    let out_dir = dir.path().join("cal");
    let out = dlbs(&[
        "calibrate",
        "--data",
        csv.to_str().unwrap(),
        "--resamples",
        "200",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("weights.json")).unwrap()).unwrap();
    assert!(doc["correlation"].as_f64().unwrap() > 1.0 - 1e-9);
    assert_eq!(doc["weights"].as_object().unwrap().len(), 6);
    assert!(out_dir.join("correlations.csv").exists());
}

#[test]
fn calibrate_names_a_missing_feedback_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "bad.csv", "a,b\n1,2\n3,4\n");
    let out = dlbs(&["calibrate", "--data", &csv, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("feedback"), "{}", stderr(&out));
}

#[test]
fn lookahead_ablation_writes_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "ablate.toml",
        "[search]\nmethod = \"dlbs_la\"\nk = 2\nb = 2\n[ablation]\nt_primes = [1, 3, 6]\nlatents = 20\nentry_step = 25\nseeds = 2\n",
    );
    let out_dir = dir.path().join("abl");
    let out = dlbs(&["ablate-lookahead", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn shipped_configs_parse_and_expand() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let cells = expand_sweep(&cfg, 0).unwrap();
        assert!(cells.iter().all(|c| c.error.is_none()), "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 4);
}
