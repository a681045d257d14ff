use std::path::{Path, PathBuf};
use std::process::Command;

use countycast_cli::commands::{cmd_synth, synth_options, OutputLock};
use countycast_cli::hub::{read_hub, write_hub};
use countycast_cli::{cmd_evaluate, cmd_forecast, cmd_ingest, cmd_lag_sweep, CliError, RunConfig};
use countycast_core::evaluation::{build_truth, TruthMode};
use countycast_core::forecaster::{ForecastEntry, ForecastSet};
use countycast_core::ingest::restore;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

/// Toy fixture config with a small, fast network and a private output dir.
fn toy_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::from_file(&fixture().join("countycast.conf")).unwrap();
    c.out_dir = out.to_path_buf();
    c.lag = 3;
    c.horizons = vec![1, 2];
    c.ensemble_size = 2;
    c.epochs = 2;
    c.lstm_units = vec![4];
    c.dense_units = 3;
    c.batch_size = 8;
    c.seed = 5;
    c
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_countycast"));
    c.env("COUNTYCAST_LOG", "error");
    c
}

#[test]
fn ingest_of_toy_fixture_reproduces_bundled_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.snapshot = Some(dir.path().join("snap.ccs"));
    let out = cmd_ingest(&cfg).unwrap();
    assert_eq!(out.report.total_rejected(), 0);
    assert!(out.report_file.is_file());
    let fresh = std::fs::read(&out.snapshot).unwrap();
    assert_eq!(fresh, std::fs::read(fixture().join("snapshot.ccs")).unwrap());
    cmd_ingest(&cfg).unwrap();
    assert_eq!(fresh, std::fs::read(&out.snapshot).unwrap());
}

#[test]
fn missing_cases_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["ingest", "--config"])
        .arg(fixture().join("countycast.conf"))
        .args(["--cases", "/definitely/missing/cases.csv", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing/cases.csv"));
}

#[test]
fn usage_errors_exit_2() {
    let out = bin().args(["forecast", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["forecast", "--lag", "nine"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lag"));
}

#[test]
fn forecast_row_count_and_point_only_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out = cmd_forecast(&cfg).unwrap();
    let text = std::fs::read_to_string(&out.file).unwrap();
    // 2 horizons × 3 counties × (1 point + 7 quantiles)
    assert_eq!(text.lines().count(), 1 + 48);
    assert_eq!(read_hub(text.as_bytes(), "out").unwrap(), out.forecasts);

    let dir2 = tempfile::tempdir().unwrap();
    let cfg = RunConfig { quantiles: false, ..toy_config(dir2.path()) };
    let out = cmd_forecast(&cfg).unwrap();
    let text = std::fs::read_to_string(&out.file).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.lines().skip(1).all(|l| l.contains(",point,,")));
}

#[test]
fn forecast_reruns_reuse_cache_and_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let first = cmd_forecast(&cfg).unwrap();
    let bytes = std::fs::read(&first.file).unwrap();
    let cache: Vec<_> = std::fs::read_dir(dir.path().join("cache")).unwrap().collect();
    assert_eq!(cache.len(), 1);
    let second = cmd_forecast(&cfg).unwrap();
    assert_eq!(bytes, std::fs::read(&second.file).unwrap());
}

#[test]
fn insufficient_history_names_required_weeks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { lag: 20, ..toy_config(dir.path()) };
    match cmd_forecast(&cfg) {
        Err(CliError::Input(msg)) => assert!(msg.contains("needs 23 weeks"), "{msg}"),
        other => panic!("expected input error, got {other:?}"),
    }
}

#[test]
fn as_of_snaps_back_to_saturday() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.as_of = Some(chrono::NaiveDate::from_ymd_opt(2020, 5, 13).unwrap());
    let out = cmd_forecast(&cfg).unwrap();
    assert!(out.file.ends_with("2020-05-09-countycast.csv"), "{}", out.file.display());
}

#[test]
fn held_lock_blocks_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let lock = OutputLock::acquire(dir.path()).unwrap();
    let err = cmd_forecast(&toy_config(dir.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    drop(lock);
    cmd_forecast(&toy_config(dir.path())).unwrap();
}

/// A forecast equal to next week's observed incidence.
fn oracle_forecasts(week_offset: i64) -> ForecastSet {
    let (panel, _) = restore(&fixture().join("snapshot.ccs")).unwrap();
    let truth = build_truth(&panel, TruthMode::Raw);
    let weeks: Vec<_> = truth.weeks().into_iter().collect();
    let mut set = ForecastSet::default();
    for w in &weeks[..weeks.len() - 1] {
        for f in panel.counties.keys() {
            let v = truth.get(*f, w.offset(week_offset)).unwrap();
            set.insert(*w, *f, 1, ForecastEntry::point(v)).unwrap();
        }
    }
    set
}

fn write_set(path: &Path, set: &ForecastSet) {
    write_hub(std::fs::File::create(path).unwrap(), set).unwrap();
}

#[test]
fn evaluate_scores_each_model_and_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        truth: vec![TruthMode::Raw, TruthMode::Smoothed],
        as_of: chrono::NaiveDate::from_ymd_opt(2020, 5, 9),
        ..toy_config(dir.path())
    };
    let shifted = dir.path().join("2020-05-09-shifted.csv");
    write_set(&shifted, &oracle_forecasts(1));
    let model = cmd_forecast(&cfg).unwrap().file;
    let out = cmd_evaluate(&cfg, &[shifted, model]).unwrap();
    let labels: std::collections::BTreeSet<_> = out.report.weekly.iter().map(|s| s.model.clone()).collect();
    assert_eq!(labels.into_iter().collect::<Vec<_>>(), ["countycast", "persistence", "shifted"]);
    assert_eq!(out.report.period_average("shifted", TruthMode::Raw, 1).unwrap().mae, 0.0);
    assert!(out.report.period_average("countycast", TruthMode::Smoothed, 2).is_some());
    let csv = std::fs::read_to_string(&out.scores_file).unwrap();
    assert!(csv.contains("persistence,raw,period,1,avg_mae,"));
    assert!(csv.contains(",reference,"));
    assert!(std::fs::read_to_string(&out.national_file).unwrap().lines().count() > 1);
}

#[test]
fn evaluate_without_overlap_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let far = dir.path().join("2021-01-02-far.csv");
    let mut set = ForecastSet::default();
    let w = countycast_core::epiweek_of(chrono::NaiveDate::from_ymd_opt(2021, 1, 2).unwrap()).unwrap();
    set.insert(w, countycast_core::Fips(1001), 1, ForecastEntry::point(3.0)).unwrap();
    write_set(&far, &set);
    let out = bin()
        .args(["evaluate", "--config"])
        .arg(fixture().join("countycast.conf"))
        .arg("--out-dir")
        .arg(dir.path())
        .arg(&far)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no overlapping weeks"));
}

#[test]
fn lag_sweep_rows_follow_the_lag_list() {
    let dir = tempfile::tempdir().unwrap();
    let conf = cmd_synth(dir.path(), &synth_options(4, 5, 40, false).unwrap()).unwrap();
    let mut cfg = RunConfig::from_file(&conf).unwrap();
    cmd_ingest(&cfg).unwrap();
    cfg.horizons = vec![1];
    cfg.ensemble_size = 1;
    cfg.epochs = 1;
    cfg.lstm_units = vec![4];
    cfg.dense_units = 3;
    cfg.eval_weeks = 2;
    let out = cmd_lag_sweep(&cfg).unwrap();
    assert_eq!(out.rows.iter().map(|r| r.lag).collect::<Vec<_>>(), (5..=10).collect::<Vec<_>>());
    let text = std::fs::read_to_string(&out.file).unwrap();
    assert_eq!(text.lines().next(), Some("lag,avg_mae"));
    assert_eq!(text.lines().count(), 7);

    cfg.lags = vec![9];
    assert_eq!(cmd_lag_sweep(&cfg).unwrap().rows.len(), 1);
}

#[test]
fn binary_end_to_end_on_toy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let conf = fixture().join("countycast.conf");
    let common = |c: &mut Command| {
        c.arg("--config").arg(&conf).arg("--out-dir").arg(dir.path());
        c.args(["--lag", "3", "--horizons", "1", "--ensemble-size", "1", "--epochs", "1", "--lstm-units", "4"]);
        c.args(["--dense-units", "3", "--quantiles", "false", "--as-of", "2020-05-09"]);
    };
    let mut f = bin();
    f.arg("forecast");
    common(&mut f);
    let out = f.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let file = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let mut e = bin();
    e.arg("evaluate");
    common(&mut e);
    let out = e.arg(&file).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("persistence raw h1"));
}
