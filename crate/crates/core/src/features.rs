//! Weekly model features and supervised-learning windows.
//!
//! Daily case counts are smoothed with a trailing 7-day mean before being
//! aggregated to epi-weeks. Mobility slopes use the smoothed series; weekly
//! means of mobility and temperature use the raw daily values. Monthly
//! features are trailing means over `months_window` epi-weeks.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use chrono::{Datelike, Duration, Weekday};
use rayon::prelude::*;

use crate::calendar::{self, epiweek_of, DailySeries, EpiWeek};
use crate::error::FeatureError;
use crate::fips::Fips;
use crate::ingest::{ConnectednessGraph, County, CountyPanel};

pub const N_FEATURES: usize = 10;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "new_weekly_incidence",
    "monthly_mean_cumulative_incidence",
    "stay_put_mean",
    "stay_put_slope",
    "change_in_movement_mean",
    "change_in_movement_slope",
    "spc_weekly_change",
    "spc_monthly_mean",
    "temp_min_weekly",
    "temp_max_weekly",
];

/// Column indices into a [`FeatureRow`].
pub mod col {
    pub const INCIDENCE: usize = 0;
    pub const MONTHLY_CUMULATIVE: usize = 1;
    pub const STAY_PUT_MEAN: usize = 2;
    pub const STAY_PUT_SLOPE: usize = 3;
    pub const MOVEMENT_MEAN: usize = 4;
    pub const MOVEMENT_SLOPE: usize = 5;
    pub const SPC_CHANGE: usize = 6;
    pub const SPC_MONTHLY: usize = 7;
    pub const TEMP_MIN: usize = 8;
    pub const TEMP_MAX: usize = 9;
}

pub type FeatureRow = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureOptions {
    /// Trailing epi-weeks averaged by the monthly features.
    pub months_window: usize,
    /// Trailing days in the case smoothing window.
    pub smoothing_window: usize,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            months_window: 4,
            smoothing_window: 7,
        }
    }
}

/// Epi-week feature rows per county. A row exists only when all ten
/// features are defined.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: BTreeMap<Fips, BTreeMap<EpiWeek, FeatureRow>>,
    pub populations: BTreeMap<Fips, u64>,
    /// Socio-demographic attributes for the hybrid model, when loaded.
    pub statics: BTreeMap<Fips, Vec<f64>>,
}

impl FeatureTable {
    pub fn get(&self, fips: Fips, week: &EpiWeek) -> Option<&FeatureRow> {
        self.rows.get(&fips)?.get(week)
    }

    pub fn incidence(&self, fips: Fips, week: &EpiWeek) -> Option<f64> {
        self.get(fips, week).map(|r| r[col::INCIDENCE])
    }

    pub fn counties(&self) -> impl Iterator<Item = Fips> + '_ {
        self.rows.keys().copied()
    }

    pub fn row_count(&self) -> usize {
        self.rows.values().map(BTreeMap::len).sum()
    }

    /// Latest week that has at least one row.
    pub fn last_week(&self) -> Option<EpiWeek> {
        self.rows.values().filter_map(|r| r.keys().next_back()).max().copied()
    }

    pub fn first_week(&self) -> Option<EpiWeek> {
        self.rows.values().filter_map(|r| r.keys().next()).min().copied()
    }

    /// Comma-separated export, one row per (county, week).
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["fips", "epiweek_year", "epiweek_week"];
        header.extend(FEATURE_NAMES);
        out.write_record(&header)?;
        for (fips, weeks) in &self.rows {
            for (wk, row) in weeks {
                let mut rec = vec![fips.to_string(), wk.year.to_string(), wk.week.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub fn rate_per_10k(incidence: f64, population: u64) -> f64 {
    incidence * 10_000.0 / population as f64
}

/// Epi-weeks lying entirely inside the panel's date range.
pub fn panel_weeks(panel: &CountyPanel) -> Vec<EpiWeek> {
    let Some(end) = panel.end() else {
        return Vec::new();
    };
    let mut first = panel.start;
    while first.weekday() != Weekday::Sun {
        first += Duration::days(1);
    }
    let mut out = Vec::new();
    let Ok(mut w) = epiweek_of(first) else {
        return out;
    };
    while w.end <= end {
        out.push(w);
        w = w.next();
    }
    out
}

fn smoothed(series: &DailySeries, window: usize) -> DailySeries {
    calendar::rolling_average(series, window.max(1)).expect("window is positive")
}

fn new_case_series(panel: &CountyPanel, c: &County) -> DailySeries {
    DailySeries::dense(panel.start, &c.new_cases)
}

/// Smoothed new cases summed over `week`.
pub fn weekly_incidence(
    panel: &CountyPanel,
    fips: Fips,
    week: &EpiWeek,
    smoothing_window: usize,
) -> Result<f64, FeatureError> {
    let c = panel.counties.get(&fips).ok_or(FeatureError::UnknownCounty(fips))?;
    let s = smoothed(&new_case_series(panel, c), smoothing_window);
    calendar::weekly_sum(&s, week).map_err(|_| FeatureError::MissingIncidence { fips, week: *week })
}

pub fn incidence_rate_per_10k(
    panel: &CountyPanel,
    fips: Fips,
    week: &EpiWeek,
) -> Result<f64, FeatureError> {
    let inc = weekly_incidence(panel, fips, week, FeatureOptions::default().smoothing_window)?;
    let pop = panel.counties[&fips].population;
    Ok(rate_per_10k(inc, pop))
}

/// Friendship links over possible links between two counties' user bases.
pub fn social_connectedness(friendships: u64, users_i: u64, users_j: u64) -> Result<f64, FeatureError> {
    if users_i == 0 || users_j == 0 {
        return Err(FeatureError::Domain("user counts must be positive".into()));
    }
    let possible = users_i as f64 * users_j as f64;
    if friendships as f64 > possible {
        return Err(FeatureError::Domain(format!(
            "{friendships} friendships exceed {possible} possible pairs"
        )));
    }
    Ok(friendships as f64 / possible)
}

/// Connectedness-weighted mean of the other counties' incidence rates.
/// Counties without a rate are left out of both numerator and denominator.
pub fn spc(
    graph: &ConnectednessGraph,
    rates: &HashMap<Fips, f64>,
    i: Fips,
) -> Result<f64, FeatureError> {
    if !graph.contains(i) {
        return Err(FeatureError::UnknownCounty(i));
    }
    let terms = graph
        .neighbors(i)
        .filter(|(j, _)| *j != i)
        .filter_map(|(j, w)| rates.get(&j).map(|r| (*r, w)));
    weighted_mean(terms).ok_or(FeatureError::IsolatedCounty(i))
}

/// Sums deviations from the first rate so equal rates reproduce it exactly.
fn weighted_mean(terms: impl Iterator<Item = (f64, u64)>) -> Option<f64> {
    let mut base = None;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, w) in terms {
        let b = *base.get_or_insert(r);
        num += (r - b) * w as f64;
        den += w as f64;
    }
    base.filter(|_| den > 0.0).map(|b| b + num / den)
}

/// SPC for every graph node at once; `rates` is indexed like `graph.nodes()`.
pub fn spc_all(graph: &ConnectednessGraph, rates: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..graph.len())
        .into_par_iter()
        .map(|i| {
            let terms = graph
                .neighbors_by_index(i)
                .iter()
                .filter(|(j, _)| *j as usize != i)
                .filter_map(|&(j, w)| rates[j as usize].map(|r| (r, w)));
            weighted_mean(terms)
        })
        .collect()
}

/// Per-week intermediate values for one county, before monthly windows.
#[derive(Debug, Clone, Copy, Default)]
struct WeeklyRaw {
    incidence: Option<f64>,
    cumulative_mean: Option<f64>,
    stay_put_mean: Option<f64>,
    stay_put_slope: Option<f64>,
    movement_mean: Option<f64>,
    movement_slope: Option<f64>,
    temp_min: Option<f64>,
    temp_max: Option<f64>,
}

fn national_daily_mean(panel: &CountyPanel, pick: impl Fn(&County) -> &Vec<Option<f64>>) -> Vec<Option<f64>> {
    (0..panel.days)
        .map(|d| {
            let (sum, n) = panel
                .counties
                .values()
                .filter(|c| !c.mobility_imputed)
                .filter_map(|c| pick(c)[d])
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| sum / n as f64)
        })
        .collect()
}

fn impute(col: &[Option<f64>], fallback: &[Option<f64>]) -> Vec<Option<f64>> {
    col.iter().zip(fallback).map(|(v, f)| v.or(*f)).collect()
}

fn county_weekly(
    panel: &CountyPanel,
    c: &County,
    weeks: &[EpiWeek],
    national: (&[Option<f64>], &[Option<f64>]),
    opts: &FeatureOptions,
) -> Vec<WeeklyRaw> {
    let ok = |r: Result<f64, _>| r.ok();
    let new_s = smoothed(&new_case_series(panel, c), opts.smoothing_window);
    let cum: Vec<f64> = c.cumulative_cases.iter().map(|v| *v as f64).collect();
    let cum_s = smoothed(&DailySeries::dense(panel.start, &cum), opts.smoothing_window);
    let movement = DailySeries::new(panel.start, impute(&c.change_in_movement, national.0));
    let stay = DailySeries::new(panel.start, impute(&c.stay_put, national.1));
    let movement_s = smoothed(&movement, opts.smoothing_window);
    let stay_s = smoothed(&stay, opts.smoothing_window);
    let tmin = DailySeries::new(panel.start, c.temp_min.clone());
    let tmax = DailySeries::new(panel.start, c.temp_max.clone());
    weeks
        .iter()
        .map(|w| WeeklyRaw {
            incidence: ok(calendar::weekly_sum(&new_s, w)),
            cumulative_mean: ok(calendar::weekly_mean(&cum_s, w)),
            stay_put_mean: ok(calendar::weekly_mean(&stay, w)),
            stay_put_slope: ok(calendar::weekly_slope(&stay_s, w)),
            movement_mean: ok(calendar::weekly_mean(&movement, w)),
            movement_slope: ok(calendar::weekly_slope(&movement_s, w)),
            temp_min: ok(calendar::weekly_mean(&tmin, w)),
            temp_max: ok(calendar::weekly_mean(&tmax, w)),
        })
        .collect()
}

fn trailing_mean(vals: &[Option<f64>], end: usize, window: usize) -> Option<f64> {
    if end + 1 < window {
        return None;
    }
    let span = &vals[end + 1 - window..=end];
    let mut sum = 0.0;
    for v in span {
        sum += (*v)?;
    }
    Some(sum / window as f64)
}

/// Build the weekly feature table from a validated panel.
pub fn build_feature_table(
    panel: &CountyPanel,
    graph: &ConnectednessGraph,
    opts: &FeatureOptions,
) -> FeatureTable {
    let weeks = panel_weeks(panel);
    let national = (
        national_daily_mean(panel, |c| &c.change_in_movement),
        national_daily_mean(panel, |c| &c.stay_put),
    );
    let fips_list: Vec<Fips> = panel.counties.keys().copied().collect();
    let weekly: Vec<Vec<WeeklyRaw>> = fips_list
        .par_iter()
        .map(|f| county_weekly(panel, &panel.counties[f], &weeks, (&national.0, &national.1), opts))
        .collect();

    // SPC needs every county's rate for the same week.
    let graph_pos: Vec<Option<usize>> = fips_list.iter().map(|f| graph.index_of(*f)).collect();
    let mut spc_series: Vec<Vec<Option<f64>>> = vec![vec![None; weeks.len()]; fips_list.len()];
    for k in 0..weeks.len() {
        let mut rates = vec![None; graph.len()];
        for (ci, f) in fips_list.iter().enumerate() {
            if let (Some(g), Some(inc)) = (graph_pos[ci], weekly[ci][k].incidence) {
                rates[g] = Some(rate_per_10k(inc, panel.counties[f].population));
            }
        }
        let spc_k = spc_all(graph, &rates);
        for (ci, g) in graph_pos.iter().enumerate() {
            spc_series[ci][k] = g.and_then(|g| spc_k[g]);
        }
    }

    let m = opts.months_window.max(1);
    let mut table = FeatureTable::default();
    for (ci, fips) in fips_list.iter().enumerate() {
        let wk = &weekly[ci];
        let cum: Vec<Option<f64>> = wk.iter().map(|w| w.cumulative_mean).collect();
        let spc_s = &spc_series[ci];
        let mut rows = BTreeMap::new();
        for k in 0..weeks.len() {
            if k + 1 < m || k == 0 {
                continue;
            }
            let w = &wk[k];
            let spc_change = match (spc_s[k], spc_s[k - 1]) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let vals = [
                w.incidence,
                trailing_mean(&cum, k, m),
                w.stay_put_mean,
                w.stay_put_slope,
                w.movement_mean,
                w.movement_slope,
                spc_change,
                trailing_mean(spc_s, k, m),
                w.temp_min,
                w.temp_max,
            ];
            if vals.iter().all(Option::is_some) {
                let row: FeatureRow = vals.map(Option::unwrap);
                rows.insert(weeks[k], row);
            }
        }
        if !rows.is_empty() {
            table.rows.insert(*fips, rows);
        }
        let c = &panel.counties[fips];
        table.populations.insert(*fips, c.population);
        if let Some(a) = c.attributes {
            table.statics.insert(*fips, a.to_vec());
        }
    }
    table
}

// ---------------------------------------------------------------------------
// Windows

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub county: Fips,
    pub anchor_week: EpiWeek,
    /// `lag + 1` rows, oldest first, ending at `anchor_week`.
    pub window: Vec<FeatureRow>,
    pub target: f64,
    pub horizon: usize,
    pub statics: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceWindow {
    pub county: Fips,
    pub anchor_week: EpiWeek,
    pub window: Vec<FeatureRow>,
    pub statics: Option<Vec<f64>>,
}

fn window_ending(
    rows: &BTreeMap<EpiWeek, FeatureRow>,
    anchor: EpiWeek,
    lag: usize,
) -> Option<Vec<FeatureRow>> {
    (0..=lag)
        .rev()
        .map(|back| rows.get(&anchor.offset(-(back as i64))).copied())
        .collect()
}

/// Training instances and per-county inference windows as of `as_of`.
///
/// Training uses only weeks up to `as_of`, features and targets alike, and
/// skips any instance whose window or target week has zero incidence.
/// Inference windows end at `as_of` and are never filtered.
pub fn make_windows(
    table: &FeatureTable,
    lag: usize,
    horizon: usize,
    as_of: EpiWeek,
) -> Result<(Vec<TrainingInstance>, BTreeMap<Fips, InferenceWindow>), FeatureError> {
    if !(1..=4).contains(&horizon) {
        return Err(FeatureError::BadHorizon(horizon));
    }
    let mut training = Vec::new();
    let mut inference = BTreeMap::new();
    for (&fips, rows) in &table.rows {
        let statics = table.statics.get(&fips).cloned();
        for (&anchor, _) in rows.range(..=as_of.offset(-(horizon as i64))) {
            let target_week = anchor.offset(horizon as i64);
            let Some(target_row) = rows.get(&target_week) else {
                continue;
            };
            let Some(window) = window_ending(rows, anchor, lag) else {
                continue;
            };
            let target = target_row[col::INCIDENCE];
            if target == 0.0 || window.iter().any(|r| r[col::INCIDENCE] == 0.0) {
                continue;
            }
            training.push(TrainingInstance {
                county: fips,
                anchor_week: anchor,
                window,
                target,
                horizon,
                statics: statics.clone(),
            });
        }
        if let Some(window) = window_ending(rows, as_of, lag) {
            inference.insert(
                fips,
                InferenceWindow {
                    county: fips,
                    anchor_week: as_of,
                    window,
                    statics,
                },
            );
        }
    }
    Ok((training, inference))
}

// ---------------------------------------------------------------------------
// Normalization

/// Z-score statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub feature_mean: [f64; N_FEATURES],
    pub feature_sd: [f64; N_FEATURES],
    pub target_mean: f64,
    pub target_sd: f64,
    pub static_mean: Vec<f64>,
    pub static_sd: Vec<f64>,
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn check_sd(name: &str, mean: f64, sd: f64) -> Result<(), FeatureError> {
    // relative floor catches columns that are constant up to rounding
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(FeatureError::ConstantFeature(name.to_string()));
    }
    Ok(())
}

/// Fit per-column mean and population standard deviation over every window
/// row of every instance, plus the target and any static attributes.
pub fn fit_normalizer(instances: &[TrainingInstance]) -> Result<NormalizationStats, FeatureError> {
    if instances.len() < 2 {
        return Err(FeatureError::TooFewInstances(instances.len()));
    }
    let mut feature_mean = [0.0; N_FEATURES];
    let mut feature_sd = [0.0; N_FEATURES];
    for f in 0..N_FEATURES {
        let (m, s) = mean_sd(instances.iter().flat_map(|i| i.window.iter().map(move |r| r[f])));
        check_sd(FEATURE_NAMES[f], m, s)?;
        feature_mean[f] = m;
        feature_sd[f] = s;
    }
    let (target_mean, target_sd) = mean_sd(instances.iter().map(|i| i.target));
    check_sd("target", target_mean, target_sd)?;

    let static_dim = instances[0].statics.as_ref().map_or(0, Vec::len);
    let mut static_mean = Vec::with_capacity(static_dim);
    let mut static_sd = Vec::with_capacity(static_dim);
    for a in 0..static_dim {
        let (m, s) = mean_sd(
            instances
                .iter()
                .map(|i| i.statics.as_ref().and_then(|s| s.get(a).copied()).unwrap_or(f64::NAN)),
        );
        let name = crate::ingest::STATIC_ATTRIBUTES.get(a).copied().unwrap_or("static");
        if !m.is_finite() {
            return Err(FeatureError::WidthMismatch {
                found: 0,
                expected: static_dim,
            });
        }
        check_sd(name, m, s)?;
        static_mean.push(m);
        static_sd.push(s);
    }
    Ok(NormalizationStats {
        feature_mean,
        feature_sd,
        target_mean,
        target_sd,
        static_mean,
        static_sd,
    })
}

impl NormalizationStats {
    pub fn apply(&self, window: &[FeatureRow]) -> Vec<FeatureRow> {
        window
            .iter()
            .map(|r| std::array::from_fn(|f| (r[f] - self.feature_mean[f]) / self.feature_sd[f]))
            .collect()
    }

    pub fn invert(&self, window: &[FeatureRow]) -> Vec<FeatureRow> {
        window
            .iter()
            .map(|r| std::array::from_fn(|f| r[f] * self.feature_sd[f] + self.feature_mean[f]))
            .collect()
    }

    pub fn apply_statics(&self, statics: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if statics.len() != self.static_mean.len() {
            return Err(FeatureError::WidthMismatch {
                found: statics.len(),
                expected: self.static_mean.len(),
            });
        }
        Ok(statics
            .iter()
            .zip(self.static_mean.iter().zip(&self.static_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_sd
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_sd + self.target_mean
    }
}

pub fn apply_normalizer(stats: &NormalizationStats, window: &[FeatureRow]) -> Vec<FeatureRow> {
    stats.apply(window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rate_examples() {
        assert_eq!(rate_per_10k(0.0, 1000), 0.0);
        assert_eq!(rate_per_10k(50.0, 100_000), 5.0);
        assert_eq!(rate_per_10k(33.0, 10_000), 33.0);
    }

    #[test]
    fn connectedness_examples() {
        assert_eq!(social_connectedness(0, 10, 10).unwrap(), 0.0);
        assert_eq!(social_connectedness(200, 10, 20).unwrap(), 1.0);
        assert_eq!(social_connectedness(50, 100, 200).unwrap(), 0.0025);
        assert!(social_connectedness(1, 0, 5).is_err());
        assert!(social_connectedness(101, 10, 10).is_err());
    }

    fn f(n: u32) -> Fips {
        Fips(n)
    }

    #[test]
    fn spc_examples() {
        let g = ConnectednessGraph::from_edges([(f(1), f(2), 100), (f(1), f(3), 300), (f(1), f(1), 5000)]);
        let rates: HashMap<Fips, f64> = [(f(1), 99.0), (f(2), 10.0), (f(3), 2.0)].into();
        assert!((spc(&g, &rates, f(1)).unwrap() - 4.0).abs() < 1e-15);
        // single edge normalizes to that county's rate
        assert_eq!(spc(&g, &rates, f(2)).unwrap(), 99.0);
        let zeros: HashMap<Fips, f64> = [(f(1), 0.0), (f(2), 0.0), (f(3), 0.0)].into();
        assert_eq!(spc(&g, &zeros, f(1)).unwrap(), 0.0);
    }

    #[test]
    fn spc_isolated_and_missing() {
        let g = ConnectednessGraph::from_edges([(f(1), f(2), 100), (f(4), f(4), 7)]);
        let rates: HashMap<Fips, f64> = [(f(1), 1.0)].into();
        assert!(matches!(spc(&g, &rates, f(1)), Err(FeatureError::IsolatedCounty(_))));
        assert!(matches!(spc(&g, &rates, f(4)), Err(FeatureError::IsolatedCounty(_))));
        assert!(matches!(spc(&g, &rates, f(9)), Err(FeatureError::UnknownCounty(_))));
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: u32) -> ConnectednessGraph {
        let mut edges = Vec::new();
        for a in 1..=n {
            for b in a..=n {
                if rng.random_bool(0.4) {
                    edges.push((f(a), f(b), rng.random_range(1..=1_000_000_000u64)));
                }
            }
        }
        ConnectednessGraph::from_edges(edges)
    }

    #[test]
    fn spc_all_matches_per_county() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_graph(&mut rng, 20);
        let rates: Vec<Option<f64>> = g
            .nodes()
            .iter()
            .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0.0..50.0)))
            .collect();
        let map: HashMap<Fips, f64> = g
            .nodes()
            .iter()
            .zip(&rates)
            .filter_map(|(n, r)| r.map(|r| (*n, r)))
            .collect();
        let all = spc_all(&g, &rates);
        for (i, node) in g.nodes().iter().enumerate() {
            assert_eq!(all[i], spc(&g, &map, *node).ok());
        }
    }

    proptest! {
        #[test]
        fn spc_row_scale_invariant(seed in 0u64..1000, k in 1u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 8);
            let rates: HashMap<Fips, f64> =
                g.nodes().iter().map(|n| (*n, rng.random_range(0.0..100.0))).collect();
            let i = g.nodes()[0];
            let scaled = ConnectednessGraph::from_edges(g.edges().map(|(a, b, w)| {
                if a == i || b == i { (a, b, w * k) } else { (a, b, w) }
            }));
            match (spc(&g, &rates, i), spc(&scaled, &rates, i)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0)),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "scaling changed definedness"),
            }
        }

        #[test]
        fn spc_uniform_rate(seed in 0u64..1000, r in 0.0f64..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, 10);
            let rates: HashMap<Fips, f64> = g.nodes().iter().map(|n| (*n, r)).collect();
            for n in g.nodes() {
                if let Ok(v) = spc(&g, &rates, *n) {
                    prop_assert_eq!(v, r);
                }
            }
        }
    }

    // -- feature table ------------------------------------------------------

    pub(crate) fn toy_panel(days: usize, daily_new: impl Fn(usize, usize) -> u64) -> CountyPanel {
        // 2020-03-01 is a Sunday
        let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
        let mut counties = BTreeMap::new();
        for c in 0..3usize {
            let mut cum = Vec::with_capacity(days);
            let mut total = 0u64;
            for d in 0..days {
                if d > 0 {
                    total += daily_new(c, d);
                }
                cum.push(total);
            }
            let (cumulative_cases, new_cases, _) = crate::ingest::correct_cumulative(&cum);
            counties.insert(
                Fips(c as u32 + 1),
                County {
                    name: format!("c{c}"),
                    population: 10_000 * (c as u64 + 1),
                    attributes: None,
                    cumulative_cases,
                    new_cases,
                    change_in_movement: vec![Some(-0.2); days],
                    stay_put: vec![Some(0.25); days],
                    temp_min: vec![Some(3.0); days],
                    temp_max: vec![Some(12.0); days],
                    mobility_imputed: false,
                },
            );
        }
        CountyPanel { start, days, counties }
    }

    fn triangle() -> ConnectednessGraph {
        ConnectednessGraph::from_edges([(f(1), f(2), 10), (f(1), f(3), 30), (f(2), f(3), 20)])
    }

    #[test]
    fn constant_inputs_give_flat_features() {
        let panel = toy_panel(70, |_, _| 7);
        let t = build_feature_table(&panel, &triangle(), &FeatureOptions::default());
        assert!(t.row_count() > 0);
        for rows in t.rows.values() {
            for row in rows.values() {
                let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
                assert!(close(row[col::INCIDENCE], 49.0));
                assert!(close(row[col::STAY_PUT_MEAN], 0.25));
                assert!(close(row[col::MOVEMENT_MEAN], -0.2));
                assert!(close(row[col::STAY_PUT_SLOPE], 0.0));
                assert!(close(row[col::MOVEMENT_SLOPE], 0.0));
                assert!(close(row[col::SPC_CHANGE], 0.0));
                assert!(close(row[col::TEMP_MIN], 3.0));
                assert!(close(row[col::TEMP_MAX], 12.0));
            }
        }
    }

    #[test]
    fn linear_ramp_incidence_is_hand_summed() {
        // new cases on day d equal d; smoothed value at d is d - 3, so the
        // week starting at day s sums to 7s + 0 (days s..s+6 minus 3 each).
        let panel = toy_panel(84, |_, d| d as u64);
        let t = build_feature_table(&panel, &triangle(), &FeatureOptions::default());
        let rows = &t.rows[&f(1)];
        for (w, row) in rows {
            let s = (w.start - panel.start).num_days() as f64;
            let hand: f64 = (0..7).map(|k| s + k as f64 - 3.0).sum();
            assert!((row[col::INCIDENCE] - hand).abs() < 1e-9, "{w}");
        }
        // SPC of county 1 mixes counties 2 and 3 with weights 1/4, 3/4
        let w = *rows.keys().nth(2).unwrap();
        let inc = rows[&w][col::INCIDENCE];
        let rate2 = rate_per_10k(inc, 20_000);
        let rate3 = rate_per_10k(inc, 30_000);
        let spc_now = 0.25 * rate2 + 0.75 * rate3;
        let prev_inc = rows[&w.prev()][col::INCIDENCE];
        let spc_prev = 0.25 * rate_per_10k(prev_inc, 20_000) + 0.75 * rate_per_10k(prev_inc, 30_000);
        assert!((rows[&w][col::SPC_CHANGE] - (spc_now - spc_prev)).abs() < 1e-9);
    }

    #[test]
    fn early_weeks_have_no_rows() {
        let panel = toy_panel(70, |_, _| 3);
        let t = build_feature_table(&panel, &triangle(), &FeatureOptions::default());
        let weeks = panel_weeks(&panel);
        for w in &weeks[..3] {
            assert!(t.get(f(1), w).is_none());
        }
        // the first week lacks a full smoothing window as well, so rows
        // begin once four complete weekly values exist
        assert_eq!(t.first_week(), Some(weeks[4]));
    }

    #[test]
    fn counties_missing_mobility_are_imputed() {
        let mut panel = toy_panel(70, |c, _| c as u64 + 1);
        {
            let c = panel.counties.get_mut(&f(2)).unwrap();
            c.mobility_imputed = true;
            c.stay_put = vec![None; 70];
            c.change_in_movement = vec![None; 70];
        }
        let t = build_feature_table(&panel, &triangle(), &FeatureOptions::default());
        let row = t.rows[&f(2)].values().next().unwrap();
        assert!((row[col::STAY_PUT_MEAN] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn county_outside_graph_has_no_rows() {
        let panel = toy_panel(70, |_, _| 1);
        let g = ConnectednessGraph::from_edges([(f(1), f(2), 10)]);
        let t = build_feature_table(&panel, &g, &FeatureOptions::default());
        assert!(t.rows.contains_key(&f(1)));
        assert!(!t.rows.contains_key(&f(3)));
    }

    #[test]
    fn csv_export_has_header() {
        let panel = toy_panel(56, |_, _| 1);
        let t = build_feature_table(&panel, &triangle(), &FeatureOptions::default());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("fips,epiweek_year,epiweek_week,new_weekly_incidence"));
        assert_eq!(header.split(',').count(), 13);
        assert_eq!(text.lines().count(), t.row_count() + 1);
    }

    // -- windows ------------------------------------------------------------

    pub(crate) fn synthetic_table(counties: u32, weeks: usize, inc: impl Fn(u32, usize) -> f64) -> (FeatureTable, Vec<EpiWeek>) {
        let w0 = epiweek_of(NaiveDate::from_ymd_opt(2020, 5, 3).unwrap()).unwrap();
        let all: Vec<EpiWeek> = (0..weeks).map(|k| w0.offset(k as i64)).collect();
        let mut t = FeatureTable::default();
        for c in 1..=counties {
            let rows = all
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let mut r = [0.0; N_FEATURES];
                    for (j, v) in r.iter_mut().enumerate() {
                        *v = (c as f64) * 0.1 + (k * (j + 1)) as f64;
                    }
                    r[col::INCIDENCE] = inc(c, k);
                    (*w, r)
                })
                .collect();
            t.rows.insert(Fips(c), rows);
            t.populations.insert(Fips(c), 1000);
        }
        (t, all)
    }

    #[test]
    fn window_count_law() {
        let (t, weeks) = synthetic_table(3, 20, |_, k| 10.0 + k as f64);
        let as_of = *weeks.last().unwrap();
        for lag in 0..5 {
            for h in 1..=4 {
                let (train, inf) = make_windows(&t, lag, h, as_of).unwrap();
                assert_eq!(train.len(), 3 * (20 - lag - h), "lag {lag} h {h}");
                assert_eq!(inf.len(), 3);
                for inst in &train {
                    assert_eq!(inst.window.len(), lag + 1);
                    assert!(inst.anchor_week.offset(h as i64) <= as_of);
                }
            }
        }
    }

    #[test]
    fn zero_week_excluded_from_training_only() {
        let (t, weeks) = synthetic_table(1, 12, |_, k| if k == 5 { 0.0 } else { 1.0 });
        let as_of = weeks[11];
        let (train, inf) = make_windows(&t, 2, 1, as_of).unwrap();
        for inst in &train {
            assert!(inst.window.iter().all(|r| r[col::INCIDENCE] != 0.0));
            assert_ne!(inst.anchor_week.offset(1), weeks[5]);
        }
        // anchors 2..=10; those touching week 5 in window (5,6,7) or as target (4) drop out
        assert_eq!(train.len(), 9 - 4);
        assert_eq!(inf.len(), 1);

        let (t0, w0) = synthetic_table(1, 12, |_, k| if k == 11 { 0.0 } else { 1.0 });
        let (_, inf0) = make_windows(&t0, 2, 1, w0[11]).unwrap();
        assert_eq!(inf0[&Fips(1)].window[2][col::INCIDENCE], 0.0);
    }

    #[test]
    fn lag_zero_is_single_row() {
        let (t, weeks) = synthetic_table(1, 6, |_, _| 4.0);
        let (train, _) = make_windows(&t, 0, 2, weeks[5]).unwrap();
        assert_eq!(train.len(), 4);
        assert!(train.iter().all(|i| i.window.len() == 1));
        assert_eq!(train[0].window[0], t.rows[&Fips(1)][&weeks[0]]);
    }

    #[test]
    fn bad_horizon_rejected() {
        let (t, weeks) = synthetic_table(1, 6, |_, _| 4.0);
        assert!(matches!(make_windows(&t, 1, 0, weeks[5]), Err(FeatureError::BadHorizon(0))));
        assert!(make_windows(&t, 1, 5, weeks[5]).is_err());
    }

    #[test]
    fn future_weeks_do_not_leak() {
        let (t, weeks) = synthetic_table(2, 30, |c, k| (c as f64) + k as f64);
        let as_of = weeks[20];
        let (train_a, inf_a) = make_windows(&t, 4, 2, as_of).unwrap();
        let mut perturbed = t.clone();
        for rows in perturbed.rows.values_mut() {
            for (w, r) in rows.iter_mut() {
                if *w > as_of {
                    r.iter_mut().for_each(|v| *v = -1e9);
                }
            }
        }
        let (train_b, inf_b) = make_windows(&perturbed, 4, 2, as_of).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(inf_a, inf_b);
    }

    // -- normalization ------------------------------------------------------

    fn instance(row: FeatureRow, target: f64) -> TrainingInstance {
        TrainingInstance {
            county: Fips(1),
            anchor_week: epiweek_of(NaiveDate::from_ymd_opt(2020, 5, 3).unwrap()).unwrap(),
            window: vec![row],
            target,
            horizon: 1,
            statics: None,
        }
    }

    #[test]
    fn zscore_by_hand() {
        let mut a = [0.0; N_FEATURES];
        let mut b = [10.0; N_FEATURES];
        a[1] = -1.0;
        b[1] = 1.0;
        let stats = fit_normalizer(&[instance(a, 1.0), instance(b, 3.0)]).unwrap();
        assert_eq!(stats.feature_mean[0], 5.0);
        assert_eq!(stats.feature_sd[0], 5.0);
        assert_eq!(stats.apply(&[a])[0][0], -1.0);
        assert_eq!(stats.apply(&[b])[0][0], 1.0);
        // mean 0, sd 1 leaves values unchanged
        assert_eq!(stats.apply(&[a])[0][1], -1.0);
        assert_eq!(stats.normalize_target(3.0), 1.0);
    }

    #[test]
    fn constant_feature_is_named() {
        let mut a = [0.0; N_FEATURES];
        let mut b = [1.0; N_FEATURES];
        a[col::TEMP_MAX] = 20.0;
        b[col::TEMP_MAX] = 20.0;
        let err = fit_normalizer(&[instance(a, 1.0), instance(b, 2.0)]).unwrap_err();
        assert_eq!(err, FeatureError::ConstantFeature("temp_max_weekly".into()));
        assert!(matches!(fit_normalizer(&[instance(a, 1.0)]), Err(FeatureError::TooFewInstances(1))));
    }

    proptest! {
        #[test]
        fn normalize_inverts(rows in prop::collection::vec(prop::array::uniform10(-1e4f64..1e4), 3..12)) {
            let insts: Vec<_> = rows.iter().enumerate().map(|(i, r)| instance(*r, i as f64)).collect();
            if let Ok(stats) = fit_normalizer(&insts) {
                let back = stats.invert(&stats.apply(&rows));
                for (r, b) in rows.iter().zip(&back) {
                    for k in 0..N_FEATURES {
                        prop_assert!((r[k] - b[k]).abs() <= 1e-12 * r[k].abs().max(1.0));
                    }
                }
            }
        }
    }
}
