use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

use crate::calendar::EpiWeek;
use crate::fips::Fips;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalendarError {
    #[error("date {0} is outside the supported range 1900-2100")]
    OutOfRange(NaiveDate),
    #[error("no epi-week {week} in {year}")]
    InvalidWeek { year: i32, week: u32 },
    #[error("rolling window must be at least one day")]
    ZeroWindow,
    #[error("missing value on {date} in epi-week {week}")]
    MissingData { week: EpiWeek, date: NaiveDate },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate FIPS {0} in cases file")]
    DuplicateFips(Fips),
    #[error("duplicate row for county {fips} on {date}")]
    DuplicateRow { fips: Fips, date: NaiveDate },
    #[error("date columns are not contiguous: {0} follows {1}")]
    NonContiguousDates(NaiveDate, NaiveDate),
    #[error("conflicting connectedness values for {a}-{b}: {first} vs {second}")]
    ConflictingSci {
        a: Fips,
        b: Fips,
        first: u64,
        second: u64,
    },
    #[error("county {fips} has non-positive population {value}")]
    NonPositivePopulation { fips: Fips, value: String },
    #[error("snapshot format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("snapshot checksum mismatch")]
    ChecksumMismatch,
    #[error("snapshot is malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("county {0} is not known")]
    UnknownCounty(Fips),
    #[error("missing incidence for county {fips} in {week}")]
    MissingIncidence { fips: Fips, week: EpiWeek },
    #[error("invalid connectedness inputs: {0}")]
    Domain(String),
    #[error("county {0} has no connected counties with a defined rate")]
    IsolatedCounty(Fips),
    #[error("horizon must be in 1..=4, got {0}")]
    BadHorizon(usize),
    #[error("need at least two training instances to fit a normalizer, got {0}")]
    TooFewInstances(usize),
    #[error("feature `{0}` is constant over the training rows")]
    ConstantFeature(String),
    #[error("window has {found} columns, expected {expected}")]
    WidthMismatch { found: usize, expected: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Usage(String),
    #[error("invalid quantile set: {0}")]
    Quantiles(String),
    #[error("weight snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("no training instances")]
    NoInstances,
    #[error("training diverged in epoch {epoch} (member seed {seed})")]
    Diverged { epoch: usize, seed: u64 },
    #[error("missing current-week incidence for county {fips} in {week}")]
    MissingCurrent { fips: Fips, week: EpiWeek },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("ensemble snapshot: {0}")]
    Snapshot(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no truth for counties {counties:?} in {week}")]
    MissingTruth { week: EpiWeek, counties: Vec<Fips> },
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("no forecasts for {0}")]
    Empty(String),
}
