//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments, as is anything after a `#` that
//! follows whitespace. Lists are comma-separated. Paths in a file are taken
//! relative to that file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use countycast_core::calendar::epiweek_of;
use countycast_core::evaluation::TruthMode;
use countycast_core::forecaster::{ModelConfig, RetrainPolicy};
use countycast_core::EpiWeek;

use crate::error::CliError;

/// Every recognised key, in the order used for canonical rendering.
pub const KEYS: [&str; 26] = [
    "cases",
    "mobility",
    "sci",
    "static",
    "weather",
    "snapshot",
    "out_dir",
    "as_of",
    "lag",
    "horizons",
    "ensemble_size",
    "epochs",
    "learning_rate",
    "batch_size",
    "seed",
    "lstm_units",
    "dense_units",
    "quantiles",
    "hybrid",
    "truth",
    "model_name",
    "lags",
    "eval_start",
    "eval_weeks",
    "retrain",
    "top_k",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cases: Option<PathBuf>,
    pub mobility: Option<PathBuf>,
    pub sci: Option<PathBuf>,
    pub statics: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    /// Defaults to `snapshot.ccs` inside `out_dir`.
    pub snapshot: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub as_of: Option<NaiveDate>,
    pub lag: usize,
    pub horizons: Vec<usize>,
    pub ensemble_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lstm_units: Vec<usize>,
    pub dense_units: usize,
    pub quantiles: bool,
    pub hybrid: bool,
    pub truth: Vec<TruthMode>,
    pub model_name: String,
    pub lags: Vec<usize>,
    pub eval_start: Option<NaiveDate>,
    pub eval_weeks: usize,
    pub retrain: RetrainPolicy,
    /// Counties scored by MAPE, largest populations first.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            cases: None,
            mobility: None,
            sci: None,
            statics: None,
            weather: None,
            snapshot: None,
            out_dir: PathBuf::from("countycast-out"),
            as_of: None,
            lag: m.lag,
            horizons: vec![1, 2, 3, 4],
            ensemble_size: m.ensemble_size,
            epochs: m.epochs,
            learning_rate: m.learning_rate,
            batch_size: m.batch_size,
            seed: m.seed,
            lstm_units: m.lstm_units,
            dense_units: m.dense_units,
            quantiles: true,
            hybrid: false,
            truth: vec![TruthMode::Raw],
            model_name: "countycast".into(),
            lags: (5..=10).collect(),
            eval_start: None,
            eval_weeks: 10,
            retrain: RetrainPolicy::Once,
            top_k: 50,
        }
    }
}

fn usage(key: &str, value: &str, what: &str) -> CliError {
    CliError::Usage(format!("config key `{key}`: cannot parse `{value}` as {what}"))
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| usage(key, value, what))
}

fn parse_list<T: FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| usage(key, value, what)))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(usage(key, value, "a boolean")),
    }
}

fn parse_date(key: &str, value: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(value.trim(), "%Y-%m-%d").map_err(|_| usage(key, value, "a YYYY-MM-DD date"))
}

fn resolve(base: Option<&Path>, value: &str) -> PathBuf {
    let p = PathBuf::from(value.trim());
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

/// The Saturday ending the epi-week that contains `d`, or the preceding
/// Saturday when `d` is not one. The flag is true when the date moved.
pub fn snap_to_saturday(d: NaiveDate) -> (NaiveDate, bool) {
    let back = (d.weekday().num_days_from_sunday() + 1) % 7;
    (d - Duration::days(back as i64), back != 0)
}

impl RunConfig {
    /// Sets one key. Paths are resolved against `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "cases" => self.cases = Some(resolve(base, v)),
            "mobility" => self.mobility = Some(resolve(base, v)),
            "sci" => self.sci = Some(resolve(base, v)),
            "static" => self.statics = Some(resolve(base, v)),
            "weather" => self.weather = Some(resolve(base, v)),
            "snapshot" => self.snapshot = Some(resolve(base, v)),
            "out_dir" => self.out_dir = resolve(base, v),
            "as_of" => self.as_of = Some(parse_date(key, v)?),
            "lag" => self.lag = parse(key, v, "an integer")?,
            "horizons" => self.horizons = parse_list(key, v, "a list of integers")?,
            "ensemble_size" => self.ensemble_size = parse(key, v, "an integer")?,
            "epochs" => self.epochs = parse(key, v, "an integer")?,
            "learning_rate" => self.learning_rate = parse(key, v, "a number")?,
            "batch_size" => self.batch_size = parse(key, v, "an integer")?,
            "seed" => self.seed = parse(key, v, "an integer")?,
            "lstm_units" => self.lstm_units = parse_list(key, v, "a list of integers")?,
            "dense_units" => self.dense_units = parse(key, v, "an integer")?,
            "quantiles" => self.quantiles = parse_bool(key, v)?,
            "hybrid" => self.hybrid = parse_bool(key, v)?,
            "truth" => {
                self.truth = match v.to_ascii_lowercase().as_str() {
                    "both" => vec![TruthMode::Raw, TruthMode::Smoothed],
                    _ => parse_list(key, v, "raw, smoothed or both")?,
                }
            }
            "model_name" => {
                if v.is_empty() || !v.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                    return Err(usage(key, v, "a name of letters, digits, `-` and `_`"));
                }
                self.model_name = v.to_string();
            }
            "lags" => self.lags = parse_list(key, v, "a list of integers")?,
            "eval_start" => self.eval_start = Some(parse_date(key, v)?),
            "eval_weeks" => self.eval_weeks = parse(key, v, "an integer")?,
            "retrain" => {
                self.retrain = match v.to_ascii_lowercase().as_str() {
                    "once" => RetrainPolicy::Once,
                    "weekly" | "each_week" => RetrainPolicy::EachWeek,
                    _ => return Err(usage(key, v, "`once` or `weekly`")),
                }
            }
            "top_k" => self.top_k = parse(key, v, "an integer")?,
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies the lines of a config file body.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v, base)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: cannot read config: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path.parent())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("lag", self.lag),
            ("ensemble_size", self.ensemble_size),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("dense_units", self.dense_units),
            ("eval_weeks", self.eval_weeks),
            ("top_k", self.top_k),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(CliError::Usage(format!("config key `{k}` must be positive")));
            }
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !(1..=4).contains(h)) {
            return Err(CliError::Usage("horizons must be a non-empty list drawn from 1..4".into()));
        }
        if self.lags.is_empty() || self.lags.contains(&0) {
            return Err(CliError::Usage("lags must be a non-empty list of positive integers".into()));
        }
        if self.truth.is_empty() {
            return Err(CliError::Usage("truth must name at least one variant".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.snapshot.clone().unwrap_or_else(|| self.out_dir.join("snapshot.ccs"))
    }

    /// Model settings shared by every horizon.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lstm_units: self.lstm_units.clone(),
            dense_units: self.dense_units,
            lag: self.lag,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            ensemble_size: self.ensemble_size,
            batch_size: self.batch_size,
            seed: self.seed,
            hybrid: self.hybrid,
            static_dim: if self.hybrid { countycast_core::ingest::STATIC_ATTRIBUTES.len() } else { 0 },
            ..ModelConfig::default()
        }
    }

    /// The as-of epi-week, snapped back to a Saturday with a warning.
    pub fn as_of_week(&self) -> Result<Option<EpiWeek>, CliError> {
        let Some(d) = self.as_of else { return Ok(None) };
        let (sat, moved) = snap_to_saturday(d);
        if moved {
            log::warn!("as_of {d} is not a Saturday; using {sat}");
        }
        epiweek_of(sat).map(Some).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Settings that determine trained weights, one `key=value` per line.
    pub fn training_fingerprint(&self) -> String {
        format!(
            "lag={}\nhorizons={:?}\nensemble_size={}\nepochs={}\nlearning_rate={:?}\nbatch_size={}\nseed={}\n\
             lstm_units={:?}\ndense_units={}\nquantiles={}\nhybrid={}\n",
            self.lag,
            self.horizons,
            self.ensemble_size,
            self.epochs,
            self.learning_rate,
            self.batch_size,
            self.seed,
            self.lstm_units,
            self.dense_units,
            self.quantiles,
            self.hybrid,
        )
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &line[..i];
        }
    }
    line
}
