use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use countycast_core::codec::sha256_hex;
use countycast_core::evaluation::{
    aggregate_national, build_truth, panel_populations, reference_scores, top_k_by_population, EvalReport,
    GroundTruth, TruthMode,
};
use countycast_core::features::{build_feature_table, FeatureOptions, FeatureTable};
use countycast_core::forecaster::{
    forecast_with, lag_sweep, persistence_baseline, train_models, Ensemble, ForecastSet, HorizonModels, LagSweepRow,
};
use countycast_core::ingest::{
    ingest_all, restore_bytes, snapshot, ConnectednessGraph, CountyPanel, IngestReport, SourcePaths,
};
use countycast_core::synthetic::{generate, ReportingArtifacts, SyntheticOptions};
use countycast_core::EpiWeek;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::hub::{read_hub, write_hub};

/// Held while a command writes into the output directory.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(".countycast.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is in use by another run (lock file {}); remove the lock if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w)?;
    w.flush().map_err(|e| CliError::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let p = p.as_deref().ok_or_else(|| CliError::Usage(format!("config key `{key}` is required")))?;
    if !p.is_file() {
        return Err(CliError::Input(format!("{}: file not found ({key})", p.display())));
    }
    Ok(p)
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub snapshot: PathBuf,
    pub report_file: PathBuf,
    pub report: IngestReport,
}

/// Loads the five sources and writes a validated snapshot plus a report.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestOutcome, CliError> {
    cfg.validate()?;
    let paths = SourcePaths {
        cases: require(&cfg.cases, "cases")?,
        mobility: require(&cfg.mobility, "mobility")?,
        sci: require(&cfg.sci, "sci")?,
        statics: require(&cfg.statics, "static")?,
        weather: require(&cfg.weather, "weather")?,
    };
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let (panel, graph, report) = ingest_all(&paths)?;
    panel.validate().map_err(|e| CliError::Input(format!("assembled panel is invalid: {e}")))?;
    let snap = cfg.snapshot_path();
    if let Some(dir) = snap.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    snapshot(&panel, &graph, &snap).map_err(|e| CliError::Internal(e.to_string()))?;
    let report_file = cfg.out_dir.join("ingest_report.txt");
    write_atomic(&report_file, |w| write!(w, "{report}").map_err(|e| CliError::io(&report_file, e)))?;
    log::info!("snapshot with {} counties over {} days written to {}", panel.counties.len(), panel.days, snap.display());
    Ok(IngestOutcome { snapshot: snap, report_file, report })
}

struct Loaded {
    panel: CountyPanel,
    table: FeatureTable,
    digest: String,
}

fn load_snapshot(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let path = cfg.snapshot_path();
    let bytes = fs::read(&path).map_err(|e| {
        CliError::Input(format!("{}: cannot read snapshot ({e}); run `countycast ingest` first", path.display()))
    })?;
    let (panel, graph): (CountyPanel, ConnectednessGraph) =
        restore_bytes(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let table = build_feature_table(&panel, &graph, &FeatureOptions::default());
    Ok(Loaded { panel, table, digest: sha256_hex(&[&bytes]) })
}

/// The configured as-of week, or the last week with features.
fn resolve_as_of(cfg: &RunConfig, table: &FeatureTable) -> Result<EpiWeek, CliError> {
    let last = table
        .last_week()
        .ok_or_else(|| CliError::Input("snapshot yields no feature rows; check the inputs".into()))?;
    match cfg.as_of_week()? {
        None => Ok(last),
        Some(w) if w > last => {
            Err(CliError::Input(format!("as_of {} is after the last week with features ({})", w.end, last.end)))
        }
        Some(w) => Ok(w),
    }
}

fn check_history(cfg: &RunConfig, table: &FeatureTable, as_of: EpiWeek) -> Result<(), CliError> {
    let max_h = cfg.horizons.iter().copied().max().unwrap_or(1);
    let required = cfg.lag + max_h + 1;
    let months = FeatureOptions::default().months_window;
    let available = table.first_week().map_or(0, |f| f.weeks_until(&as_of) + 1).max(0) as usize;
    if available < required {
        return Err(CliError::Input(format!(
            "insufficient history: lag {} with horizon {max_h} needs {required} weeks of features \
             ({} weeks of case history) up to {}; found {available}",
            cfg.lag,
            required + months,
            as_of.end
        )));
    }
    Ok(())
}

fn ensemble_file(dir: &Path, h: usize, kind: &str) -> PathBuf {
    dir.join(format!("h{h}-{kind}.ens"))
}

fn load_cached(dir: &Path, cfg: &RunConfig) -> Option<Vec<HorizonModels>> {
    let read = |p: PathBuf| fs::read(p).ok().and_then(|b| Ensemble::from_bytes(&b).ok());
    cfg.horizons
        .iter()
        .map(|&h| {
            let point = read(ensemble_file(dir, h, "point"))?;
            let quantile = if cfg.quantiles { Some(read(ensemble_file(dir, h, "quantile"))?) } else { None };
            Some(HorizonModels { horizon: h, point, quantile })
        })
        .collect()
}

fn store_cached(dir: &Path, models: &[HorizonModels]) -> Result<(), CliError> {
    let tmp = dir.with_extension("partial");
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    for m in models {
        let p = ensemble_file(&tmp, m.horizon, "point");
        fs::write(&p, m.point.to_bytes()).map_err(|e| CliError::io(&p, e))?;
        if let Some(q) = &m.quantile {
            let p = ensemble_file(&tmp, m.horizon, "quantile");
            fs::write(&p, q.to_bytes()).map_err(|e| CliError::io(&p, e))?;
        }
    }
    let _ = fs::remove_dir_all(dir);
    fs::rename(&tmp, dir).map_err(|e| CliError::io(dir, e))
}

/// Trained ensembles keyed by the snapshot digest and training settings.
fn models_for(cfg: &RunConfig, loaded: &Loaded, as_of: EpiWeek) -> Result<Vec<HorizonModels>, CliError> {
    let key = sha256_hex(&[
        b"countycast-models-v1\n",
        loaded.digest.as_bytes(),
        cfg.training_fingerprint().as_bytes(),
        as_of.end.to_string().as_bytes(),
    ]);
    let dir = cfg.out_dir.join("cache").join(&key[..32]);
    if let Some(models) = load_cached(&dir, cfg) {
        log::info!("reusing trained models from {}", dir.display());
        return Ok(models);
    }
    let models = train_models(&loaded.table, &cfg.model_config(), as_of, &cfg.horizons, cfg.quantiles)?;
    store_cached(&dir, &models)?;
    Ok(models)
}

#[derive(Debug)]
pub struct ForecastOutcome {
    pub file: PathBuf,
    pub forecasts: ForecastSet,
}

/// Trains (or reuses) per-horizon ensembles and writes a Hub file named
/// `<forecast_date>-<model_name>.csv`.
pub fn cmd_forecast(cfg: &RunConfig) -> Result<ForecastOutcome, CliError> {
    cfg.validate()?;
    let loaded = load_snapshot(cfg)?;
    let as_of = resolve_as_of(cfg, &loaded.table)?;
    check_history(cfg, &loaded.table, as_of)?;
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let models = models_for(cfg, &loaded, as_of)?;
    let forecasts = forecast_with(&models, &loaded.table, as_of)?;
    let file = cfg.out_dir.join(format!("{}-{}.csv", as_of.end, cfg.model_name));
    write_atomic(&file, |w| write_hub(w, &forecasts))?;
    log::info!("{} forecasts for {} written to {}", forecasts.len(), as_of.end, file.display());
    Ok(ForecastOutcome { file, forecasts })
}

/// `2020-07-04-name.csv` gives `name`; other stems are used whole.
pub fn model_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let dated = stem.len() > 11
        && chrono::NaiveDate::parse_from_str(&stem[..10], "%Y-%m-%d").is_ok()
        && stem.as_bytes()[10] == b'-';
    if dated { stem[11..].to_string() } else { stem.to_string() }
}

pub const BASELINE_LABEL: &str = "persistence";

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report: EvalReport,
    pub scores_file: PathBuf,
    pub national_file: PathBuf,
}

fn baseline_for(truth: &GroundTruth, weeks: &BTreeSet<EpiWeek>, horizons: &[usize]) -> ForecastSet {
    let mut out = ForecastSet::default();
    for &w in weeks {
        match persistence_baseline(truth, w, horizons) {
            Ok(s) => {
                if let Err(e) = out.merge(s) {
                    log::warn!("baseline for {w}: {e}");
                }
            }
            Err(e) => log::warn!("no baseline for {w}: {e}"),
        }
    }
    out
}

/// Scores Hub files and the persistence baseline against each configured
/// truth variant.
pub fn cmd_evaluate(cfg: &RunConfig, files: &[PathBuf]) -> Result<EvaluateOutcome, CliError> {
    cfg.validate()?;
    if files.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one forecast file".into()));
    }
    let mut models: BTreeMap<String, ForecastSet> = BTreeMap::new();
    for f in files {
        let file = File::open(f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        let set = read_hub(file, &f.display().to_string())?;
        let label = model_label(f);
        if label == BASELINE_LABEL {
            return Err(CliError::Usage(format!("model label `{BASELINE_LABEL}` is reserved for the baseline")));
        }
        models.entry(label).or_default().merge(set)?;
    }
    let loaded = load_snapshot(cfg)?;
    let top = top_k_by_population(&panel_populations(&loaded.panel), cfg.top_k);
    let raw = build_truth(&loaded.panel, TruthMode::Raw);
    let weeks: BTreeSet<EpiWeek> = models.values().flat_map(|s| s.forecast_weeks()).collect();
    let horizons: Vec<usize> =
        models.values().flat_map(|s| s.horizons()).collect::<BTreeSet<_>>().into_iter().collect();
    let baseline = baseline_for(&raw, &weeks, &horizons);

    let mut report = EvalReport::default();
    let mut national: Vec<(String, TruthMode, usize, countycast_core::evaluation::NationalPoint)> = Vec::new();
    let mut scored = 0;
    for &mode in &cfg.truth {
        let truth = if mode == TruthMode::Raw { raw.clone() } else { build_truth(&loaded.panel, mode) };
        for (label, set) in models.iter().chain(std::iter::once((&BASELINE_LABEL.to_string(), &baseline))) {
            let cells = report.score(label, set, &truth, &top)?;
            if label != BASELINE_LABEL {
                scored += cells;
            }
            for &h in &horizons {
                for p in aggregate_national(set, &truth, h) {
                    national.push((label.clone(), mode, h, p));
                }
            }
        }
    }
    if scored == 0 {
        return Err(CliError::Input(
            "no overlapping weeks: no forecast target week is covered by the snapshot's truth".into(),
        ));
    }

    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let scores_file = cfg.out_dir.join("evaluation.csv");
    write_atomic(&scores_file, |w| Ok(report.write_long_csv(w, &reference_scores())?))?;
    let national_file = cfg.out_dir.join("national.csv");
    write_atomic(&national_file, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "truth", "horizon", "forecast_date", "target_end_date", "forecast", "observed"])?;
        for (label, mode, h, p) in &national {
            out.write_record([
                label.as_str(),
                &mode.to_string(),
                &h.to_string(),
                &p.forecast_week.end.to_string(),
                &p.target_week.end.to_string(),
                &p.forecast.to_string(),
                &p.truth.to_string(),
            ])?;
        }
        out.flush().map_err(|e| CliError::Internal(e.to_string()))
    })?;
    Ok(EvaluateOutcome { report, scores_file, national_file })
}

#[derive(Debug)]
pub struct LagSweepOutcome {
    pub rows: Vec<LagSweepRow>,
    pub file: PathBuf,
}

/// Retrains per lag over the evaluation window and writes `lag,avg_mae`.
pub fn cmd_lag_sweep(cfg: &RunConfig) -> Result<LagSweepOutcome, CliError> {
    cfg.validate()?;
    let loaded = load_snapshot(cfg)?;
    let mode = cfg.truth[0];
    let truth = build_truth(&loaded.panel, mode);
    let max_h = cfg.horizons.iter().copied().max().unwrap_or(1) as i64;
    let start = match cfg.eval_start {
        Some(d) => {
            let probe = RunConfig { as_of: Some(d), ..cfg.clone() };
            probe.as_of_week()?.expect("as_of set")
        }
        None => {
            let last = truth
                .weeks()
                .into_iter()
                .next_back()
                .ok_or_else(|| CliError::Input("snapshot has no complete truth weeks".into()))?;
            last.offset(-(max_h + cfg.eval_weeks as i64 - 1))
        }
    };
    let weeks: Vec<EpiWeek> = (0..cfg.eval_weeks as i64).map(|i| start.offset(i)).collect();
    let rows = lag_sweep(
        &loaded.table,
        &truth,
        &cfg.lags,
        &cfg.model_config(),
        &weeks,
        &cfg.horizons,
        cfg.retrain,
    )?;
    if rows.is_empty() {
        return Err(CliError::Input(format!(
            "no lag in {:?} has enough history before {}",
            cfg.lags, weeks[0].end
        )));
    }
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let file = cfg.out_dir.join("lag_sweep.csv");
    write_atomic(&file, |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lag", "avg_mae"])?;
        for r in &rows {
            out.write_record([r.lag.to_string(), r.avg_mae.to_string()])?;
        }
        out.flush().map_err(|e| CliError::Internal(e.to_string()))
    })?;
    for r in &rows {
        log::info!("lag {}: average MAE {:.2} against {mode} truth", r.lag, r.avg_mae);
    }
    Ok(LagSweepOutcome { rows, file })
}

/// Writes a synthetic source set and a config file pointing at it.
pub fn cmd_synth(dir: &Path, opts: &SyntheticOptions) -> Result<PathBuf, CliError> {
    let sources = generate(opts);
    let [cases, mobility, sci, statics, weather] = sources.write_to(dir).map_err(|e| CliError::io(dir, e))?;
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let config = dir.join("countycast.conf");
    let body = format!(
        "# synthetic epidemic, seed {}\ncases = {}\nmobility = {}\nsci = {}\nstatic = {}\nweather = {}\nout_dir = out\n",
        opts.seed,
        name(&cases),
        name(&mobility),
        name(&sci),
        name(&statics),
        name(&weather)
    );
    fs::write(&config, body).map_err(|e| CliError::io(&config, e))?;
    Ok(config)
}

/// Synthetic options from command-line values.
pub fn synth_options(seed: u64, counties: usize, weeks: usize, spikes: bool) -> Result<SyntheticOptions, CliError> {
    if counties < 2 || weeks < 2 {
        return Err(CliError::Usage("synth needs at least 2 counties and 2 weeks".into()));
    }
    Ok(SyntheticOptions {
        seed,
        counties,
        weeks,
        reporting: spikes.then(ReportingArtifacts::default),
        ..SyntheticOptions::default()
    })
}
