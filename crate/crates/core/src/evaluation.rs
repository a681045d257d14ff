//! Forecast scoring: MAE, top-k MAPE, truth construction and national
//! aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use crate::calendar::{rolling_average, weekly_sum, DailySeries, EpiWeek};
use crate::error::EvalError;
use crate::features::panel_weeks;
use crate::fips::Fips;
use crate::forecaster::{ForecastSet, IncidenceSource};
use crate::ingest::CountyPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TruthMode {
    Raw,
    Smoothed,
}

impl fmt::Display for TruthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TruthMode::Raw => "raw",
            TruthMode::Smoothed => "smoothed",
        })
    }
}

impl std::str::FromStr for TruthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(TruthMode::Raw),
            "smoothed" | "rolling" => Ok(TruthMode::Smoothed),
            other => Err(format!("unknown truth mode {other:?} (expected raw or smoothed)")),
        }
    }
}

/// Weekly incidence per county.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mode: TruthMode,
    pub values: BTreeMap<(Fips, EpiWeek), f64>,
}

impl GroundTruth {
    pub fn get(&self, fips: Fips, week: EpiWeek) -> Option<f64> {
        self.values.get(&(fips, week)).copied()
    }

    pub fn weeks(&self) -> BTreeSet<EpiWeek> {
        self.values.keys().map(|(_, w)| *w).collect()
    }
}

impl IncidenceSource for GroundTruth {
    fn current_incidence(&self, fips: Fips, week: EpiWeek) -> Option<f64> {
        self.get(fips, week)
    }

    fn county_list(&self) -> Vec<Fips> {
        let set: BTreeSet<Fips> = self.values.keys().map(|(f, _)| *f).collect();
        set.into_iter().collect()
    }
}

/// Raw mode sums reported daily new cases per epi-week; smoothed mode sums
/// the trailing 7-day average. Weeks the smoothed series does not fully
/// cover are left out.
pub fn build_truth(panel: &CountyPanel, mode: TruthMode) -> GroundTruth {
    let weeks = panel_weeks(panel);
    let mut values = BTreeMap::new();
    for (&fips, county) in &panel.counties {
        let raw = DailySeries::dense(panel.start, &county.new_cases);
        let series = match mode {
            TruthMode::Raw => raw,
            TruthMode::Smoothed => rolling_average(&raw, 7).expect("window is positive"),
        };
        for w in &weeks {
            if let Ok(v) = weekly_sum(&series, w) {
                values.insert((fips, *w), v);
            }
        }
    }
    GroundTruth { mode, values }
}

fn paired(
    forecasts: &ForecastSet,
    truth: &GroundTruth,
    week: EpiWeek,
    horizon: usize,
) -> Result<Vec<(Fips, f64, f64)>, EvalError> {
    let target = week.offset(horizon as i64);
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for (fips, entry) in forecasts.at(week, horizon) {
        match truth.get(fips, target) {
            Some(y) => pairs.push((fips, entry.point, y)),
            None => missing.push(fips),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingTruth { week: target, counties: missing });
    }
    if pairs.is_empty() {
        return Err(EvalError::Empty(format!("forecast week {week}, horizon {horizon}")));
    }
    Ok(pairs)
}

/// Mean absolute error over every county forecast at `week` for `horizon`,
/// scored against truth in week `week + horizon`.
pub fn mae(forecasts: &ForecastSet, truth: &GroundTruth, week: EpiWeek, horizon: usize) -> Result<f64, EvalError> {
    let pairs = paired(forecasts, truth, week, horizon)?;
    Ok(mae_of(pairs.iter().map(|(_, p, y)| (*p, *y))))
}

pub fn mae_of(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, y) in pairs {
        sum += (p - y).abs();
        n += 1;
    }
    sum / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapeScore {
    pub value: f64,
    pub counties: usize,
    /// Filtered counties skipped because their truth was zero.
    pub zero_truth_excluded: usize,
}

/// Mean absolute percentage error over the forecast counties in `counties`.
pub fn mape(
    forecasts: &ForecastSet,
    truth: &GroundTruth,
    week: EpiWeek,
    horizon: usize,
    counties: &BTreeSet<Fips>,
) -> Result<MapeScore, EvalError> {
    let pairs = paired(forecasts, truth, week, horizon)?;
    mape_of(pairs.into_iter().filter(|(f, _, _)| counties.contains(f)).map(|(_, p, y)| (p, y)))
}

pub fn mape_of(pairs: impl Iterator<Item = (f64, f64)>) -> Result<MapeScore, EvalError> {
    let (mut sum, mut n, mut zero) = (0.0, 0usize, 0usize);
    for (p, y) in pairs {
        if y == 0.0 {
            zero += 1;
            continue;
        }
        sum += (p - y).abs() / y;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::Undefined(format!(
            "MAPE has no county with non-zero truth ({zero} excluded)"
        )));
    }
    Ok(MapeScore { value: 100.0 * sum / n as f64, counties: n, zero_truth_excluded: zero })
}

/// The `k` most populous counties; ties go to the lower FIPS.
pub fn top_k_by_population(populations: &BTreeMap<Fips, u64>, k: usize) -> BTreeSet<Fips> {
    if k > populations.len() {
        log::warn!("asked for top {k} counties but only {} exist; using all", populations.len());
    }
    let mut ranked: Vec<(&Fips, &u64)> = populations.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(f, _)| *f).collect()
}

pub fn panel_populations(panel: &CountyPanel) -> BTreeMap<Fips, u64> {
    panel.counties.iter().map(|(f, c)| (*f, c.population)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NationalPoint {
    pub forecast_week: EpiWeek,
    pub target_week: EpiWeek,
    pub forecast: f64,
    pub truth: f64,
}

/// National totals per forecast week. Both series sum over the counties that
/// have a forecast and truth for the target week.
pub fn aggregate_national(forecasts: &ForecastSet, truth: &GroundTruth, horizon: usize) -> Vec<NationalPoint> {
    forecasts
        .forecast_weeks()
        .into_iter()
        .filter_map(|week| {
            let target = week.offset(horizon as i64);
            let mut any = false;
            let (mut f, mut y) = (0.0, 0.0);
            for (fips, e) in forecasts.at(week, horizon) {
                if let Some(t) = truth.get(fips, target) {
                    f += e.point;
                    y += t;
                    any = true;
                }
            }
            any.then_some(NationalPoint { forecast_week: week, target_week: target, forecast: f, truth: y })
        })
        .collect()
}

/// Scores for one model, truth variant, forecast week and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyScore {
    pub model: String,
    pub truth: TruthMode,
    pub forecast_week: EpiWeek,
    pub horizon: usize,
    pub mae: f64,
    pub counties: usize,
    pub mape: Option<MapeScore>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub weekly: Vec<WeeklyScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodAverage {
    pub model: String,
    pub truth: TruthMode,
    pub horizon: usize,
    pub weeks: usize,
    pub mae: f64,
    /// Mean over weeks whose MAPE was defined.
    pub mape: Option<f64>,
}

impl EvalReport {
    /// Scores every (forecast week, horizon) cell of `forecasts` whose
    /// target week is covered by `truth`.
    pub fn score(
        &mut self,
        model: &str,
        forecasts: &ForecastSet,
        truth: &GroundTruth,
        top: &BTreeSet<Fips>,
    ) -> Result<usize, EvalError> {
        let truth_weeks = truth.weeks();
        let mut cells = 0;
        for (week, horizon) in forecasts.cells() {
            if !truth_weeks.contains(&week.offset(horizon as i64)) {
                continue;
            }
            let pairs = paired(forecasts, truth, week, horizon)?;
            let m = mae_of(pairs.iter().map(|(_, p, y)| (*p, *y)));
            let mp = mape_of(pairs.iter().filter(|(f, _, _)| top.contains(f)).map(|(_, p, y)| (*p, *y))).ok();
            self.weekly.push(WeeklyScore {
                model: model.to_string(),
                truth: truth.mode,
                forecast_week: week,
                horizon,
                mae: m,
                counties: pairs.len(),
                mape: mp,
            });
            cells += 1;
        }
        Ok(cells)
    }

    /// Arithmetic mean of weekly values per (model, truth, horizon).
    pub fn period_averages(&self) -> Vec<PeriodAverage> {
        let mut groups: BTreeMap<(String, TruthMode, usize), Vec<&WeeklyScore>> = BTreeMap::new();
        for s in &self.weekly {
            groups.entry((s.model.clone(), s.truth, s.horizon)).or_default().push(s);
        }
        groups
            .into_iter()
            .map(|((model, truth, horizon), v)| {
                let mapes: Vec<f64> = v.iter().filter_map(|s| s.mape.map(|m| m.value)).collect();
                PeriodAverage {
                    model,
                    truth,
                    horizon,
                    weeks: v.len(),
                    mae: v.iter().map(|s| s.mae).sum::<f64>() / v.len() as f64,
                    mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
                }
            })
            .collect()
    }

    pub fn period_average(&self, model: &str, truth: TruthMode, horizon: usize) -> Option<PeriodAverage> {
        self.period_averages()
            .into_iter()
            .find(|p| p.model == model && p.truth == truth && p.horizon == horizon)
    }

    /// Long format: model, truth, forecast_date, horizon, metric, value.
    /// Period averages use `period` as the forecast date; shipped reference
    /// scores use `reference`.
    pub fn write_long_csv<W: Write>(&self, w: W, references: &[ReferenceScore]) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model", "truth", "forecast_date", "horizon", "metric", "value"])?;
        for s in &self.weekly {
            let date = s.forecast_week.end.to_string();
            let h = s.horizon.to_string();
            let t = s.truth.to_string();
            let mut row = |metric: &str, v: String| out.write_record([&s.model, &t, &date, &h, metric, &v]);
            row("mae", s.mae.to_string())?;
            row("counties", s.counties.to_string())?;
            if let Some(m) = s.mape {
                row("mape", m.value.to_string())?;
                row("mape_counties", m.counties.to_string())?;
                row("mape_zero_truth_excluded", m.zero_truth_excluded.to_string())?;
            }
        }
        for p in self.period_averages() {
            let (h, t) = (p.horizon.to_string(), p.truth.to_string());
            out.write_record([&p.model, &t, "period", &h, "avg_mae", &p.mae.to_string()])?;
            if let Some(m) = p.mape {
                out.write_record([&p.model, &t, "period", &h, "avg_mape", &m.to_string()])?;
            }
        }
        for r in references {
            let h = r.horizon.map(|h| h.to_string()).unwrap_or_default();
            let metric = match r.lag {
                Some(l) => format!("{}_lag{l}", r.metric),
                None => r.metric.clone(),
            };
            out.write_record([&r.model, &r.truth, "reference", &h, &metric, &r.value.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// A published score shipped for side-by-side comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScore {
    pub key: String,
    pub model: String,
    pub truth: String,
    pub metric: String,
    pub horizon: Option<usize>,
    pub lag: Option<usize>,
    pub value: f64,
}

const REFERENCE_CSV: &str = include_str!("../data/reference_scores.csv");

pub fn reference_scores() -> Vec<ReferenceScore> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(REFERENCE_CSV.as_bytes());
    let opt = |s: &str| (!s.is_empty()).then(|| s.parse::<usize>().expect("bundled reference file"));
    rdr.records()
        .map(|r| {
            let r = r.expect("bundled reference file");
            ReferenceScore {
                key: r[0].to_string(),
                model: r[1].to_string(),
                truth: r[2].to_string(),
                metric: r[3].to_string(),
                horizon: opt(&r[4]),
                lag: opt(&r[5]),
                value: r[6].parse().expect("bundled reference file"),
            }
        })
        .collect()
}

/// Looks up a shipped reference value.
pub fn reference_value(model: &str, truth: &str, metric: &str, horizon: Option<usize>, lag: Option<usize>) -> Option<f64> {
    reference_scores()
        .into_iter()
        .find(|r| r.model == model && r.truth == truth && r.metric == metric && r.horizon == horizon && r.lag == lag)
        .map(|r| r.value)
}
