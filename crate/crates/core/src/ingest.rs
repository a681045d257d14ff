//! Parsing and validation of the raw input families into a [`CountyPanel`]
//! and a [`ConnectednessGraph`], plus the canonical snapshot container.
//!
//! Each loader returns a typed partial result and records what it read,
//! accepted and rejected in an [`IngestReport`]. [`assemble`] merges the
//! partials into the final panel and drops (and reports) counties that lack
//! a population.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{Duration, NaiveDate};

use crate::codec::{ContainerError, Decoder, Encoder};
use crate::error::IngestError;
use crate::fips::Fips;

pub const SCI_MIN: u64 = 1;
pub const SCI_MAX: u64 = 1_000_000_000;

/// Names of the optional socio-demographic columns, in vector order.
pub const STATIC_ATTRIBUTES: [&str; 8] = [
    "pop_density",
    "prop_black",
    "prop_hispanic",
    "prop_indigenous",
    "prop_over_65",
    "rural_land_prop",
    "vote_share_2016",
    "median_income",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct County {
    pub name: String,
    pub population: u64,
    pub attributes: Option<[f64; 8]>,
    /// Corrected (running-max) cumulative confirmed cases.
    pub cumulative_cases: Vec<u64>,
    /// Zero-clamped first differences of `cumulative_cases`; day 0 is 0.
    pub new_cases: Vec<f64>,
    pub change_in_movement: Vec<Option<f64>>,
    pub stay_put: Vec<Option<f64>>,
    pub temp_min: Vec<Option<f64>>,
    pub temp_max: Vec<Option<f64>>,
    /// Set when the county never appeared in the mobility source.
    pub mobility_imputed: bool,
}

/// Daily FIPS-keyed observations over a common date range.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyPanel {
    pub start: NaiveDate,
    pub days: usize,
    pub counties: BTreeMap<Fips, County>,
}

impl CountyPanel {
    pub fn empty(start: NaiveDate) -> Self {
        Self {
            start,
            days: 0,
            counties: BTreeMap::new(),
        }
    }

    pub fn end(&self) -> Option<NaiveDate> {
        (self.days > 0).then(|| self.start + Duration::days(self.days as i64 - 1))
    }

    pub fn date(&self, idx: usize) -> NaiveDate {
        self.start + Duration::days(idx as i64)
    }

    pub fn index_of(&self, d: NaiveDate) -> Option<usize> {
        let i = (d - self.start).num_days();
        (i >= 0 && (i as usize) < self.days).then_some(i as usize)
    }

    /// Check the structural invariants every downstream module assumes.
    pub fn validate(&self) -> Result<(), String> {
        for (fips, c) in &self.counties {
            if c.population == 0 {
                return Err(format!("{fips}: population must be positive"));
            }
            for col in [
                c.cumulative_cases.len(),
                c.new_cases.len(),
                c.change_in_movement.len(),
                c.stay_put.len(),
                c.temp_min.len(),
                c.temp_max.len(),
            ] {
                if col != self.days {
                    return Err(format!("{fips}: column length {col} != {}", self.days));
                }
            }
            if c.cumulative_cases.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("{fips}: cumulative cases decrease"));
            }
            if c.new_cases.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(format!("{fips}: negative or non-finite new cases"));
            }
            for (lo, hi) in c.temp_min.iter().zip(&c.temp_max) {
                if let (Some(lo), Some(hi)) = (lo, hi) {
                    if lo > hi {
                        return Err(format!("{fips}: temp_min exceeds temp_max"));
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceCounts {
    pub read: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Anomaly {
    /// Cumulative count fell; corrected to the running maximum.
    NegativeDiff { fips: Fips, date: NaiveDate, drop: u64 },
    RejectedRow { source: String, line: u64, reason: String },
    DuplicateKey { source: String, key: String },
    DroppedCounty { fips: Fips, reason: String },
    MobilityImputed { fips: Fips },
    MissingWeather { fips: Fips },
}

impl fmt::Display for Anomaly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Anomaly::NegativeDiff { fips, date, drop } => {
                write!(f, "cases {fips} {date}: cumulative fell by {drop}, clamped")
            }
            Anomaly::RejectedRow { source, line, reason } => {
                write!(f, "{source} line {line}: rejected ({reason})")
            }
            Anomaly::DuplicateKey { source, key } => write!(f, "{source}: duplicate key {key}"),
            Anomaly::DroppedCounty { fips, reason } => write!(f, "county {fips} dropped: {reason}"),
            Anomaly::MobilityImputed { fips } => {
                write!(f, "county {fips} has no mobility data; will be imputed")
            }
            Anomaly::MissingWeather { fips } => write!(f, "county {fips} has no weather data"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub sources: BTreeMap<String, SourceCounts>,
    pub anomalies: Vec<Anomaly>,
}

impl IngestReport {
    fn counts(&mut self, source: &str) -> &mut SourceCounts {
        self.sources.entry(source.to_string()).or_default()
    }

    fn read(&mut self, source: &str) {
        self.counts(source).read += 1;
    }

    fn accept(&mut self, source: &str) {
        self.counts(source).accepted += 1;
    }

    fn reject(&mut self, source: &str, line: u64, reason: impl Into<String>) {
        self.counts(source).rejected += 1;
        self.anomalies.push(Anomaly::RejectedRow {
            source: source.to_string(),
            line,
            reason: reason.into(),
        });
    }

    pub fn merge(&mut self, other: IngestReport) {
        for (k, v) in other.sources {
            let c = self.counts(&k);
            c.read += v.read;
            c.accepted += v.accepted;
            c.rejected += v.rejected;
        }
        self.anomalies.extend(other.anomalies);
    }

    pub fn total_rejected(&self) -> usize {
        self.sources.values().map(|c| c.rejected).sum()
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "source,read,accepted,rejected")?;
        for (k, c) in &self.sources {
            writeln!(f, "{k},{},{},{}", c.read, c.accepted, c.rejected)?;
        }
        writeln!(f, "anomalies: {}", self.anomalies.len())?;
        for a in &self.anomalies {
            writeln!(f, "  {a}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Helpers

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
}

fn require(headers: &csv::StringRecord, names: &[&str]) -> Result<usize, IngestError> {
    column(headers, names).ok_or_else(|| IngestError::MissingColumn(names[0].to_string()))
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%m/%d/%y"))
        .ok()
}

fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn reader<R: Read>(r: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .has_headers(true)
        .from_reader(r)
}

// ---------------------------------------------------------------------------
// Cases

#[derive(Debug, Clone, PartialEq)]
pub struct CaseSeries {
    pub name: String,
    pub cumulative: Vec<u64>,
    pub new_cases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseData {
    pub start: Option<NaiveDate>,
    pub days: usize,
    pub counties: BTreeMap<Fips, CaseSeries>,
}

/// Running-max correction of a cumulative series and its zero-clamped
/// first differences. Returns the anomalies as (day index, drop) pairs.
pub fn correct_cumulative(raw: &[u64]) -> (Vec<u64>, Vec<f64>, Vec<(usize, u64)>) {
    let mut cum = Vec::with_capacity(raw.len());
    let mut new = Vec::with_capacity(raw.len());
    let mut drops = Vec::new();
    let mut running = 0u64;
    for (i, &v) in raw.iter().enumerate() {
        if i > 0 && v < running {
            drops.push((i, running - v));
        }
        let corrected = if i == 0 { v } else { v.max(running) };
        new.push(if i == 0 { 0.0 } else { (corrected - running) as f64 });
        running = corrected;
        cum.push(corrected);
    }
    (cum, new, drops)
}

pub fn load_cases(path: &Path) -> Result<(CaseData, IngestReport), IngestError> {
    load_cases_from_reader(open(path)?)
}

/// Wide cumulative layout: one row per county, a FIPS column, optionally a
/// county name column, and one column per date (M/D/YY or YYYY-MM-DD).
pub fn load_cases_from_reader<R: Read>(r: R) -> Result<(CaseData, IngestReport), IngestError> {
    const SRC: &str = "cases";
    let mut report = IngestReport::default();
    report.counts(SRC);
    let mut rdr = reader(r, b',');
    let headers = rdr.headers()?.clone();
    let mut data = CaseData {
        start: None,
        days: 0,
        counties: BTreeMap::new(),
    };
    if headers.is_empty() {
        return Ok((data, report));
    }
    let fips_col = require(&headers, &["FIPS", "fips", "countyFIPS"])?;
    let name_col = column(&headers, &["Admin2", "county", "county_name", "name"]);
    let date_cols: Vec<(usize, NaiveDate)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| parse_date(h).map(|d| (i, d)))
        .collect();
    for pair in date_cols.windows(2) {
        if pair[1].1 != pair[0].1 + Duration::days(1) {
            return Err(IngestError::NonContiguousDates(pair[1].1, pair[0].1));
        }
    }
    data.start = date_cols.first().map(|(_, d)| *d);
    data.days = date_cols.len();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.read(SRC);
        if rec.len() != headers.len() {
            report.reject(SRC, line, format!("expected {} fields, got {}", headers.len(), rec.len()));
            continue;
        }
        let fips: Fips = match rec[fips_col].parse() {
            Ok(f) => f,
            Err(e) => {
                report.reject(SRC, line, e.to_string());
                continue;
            }
        };
        let mut raw = Vec::with_capacity(date_cols.len());
        let mut bad = None;
        for (i, d) in &date_cols {
            match parse_f64(&rec[*i]) {
                Some(v) if v >= 0.0 && v.fract() == 0.0 => raw.push(v as u64),
                _ => {
                    bad = Some(format!("bad cumulative count `{}` on {d}", &rec[*i]));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            report.reject(SRC, line, reason);
            continue;
        }
        if data.counties.contains_key(&fips) {
            return Err(IngestError::DuplicateFips(fips));
        }
        let (cumulative, new_cases, drops) = correct_cumulative(&raw);
        let start = data.start.expect("rows imply date columns or zero days");
        for (idx, drop) in drops {
            report.anomalies.push(Anomaly::NegativeDiff {
                fips,
                date: start + Duration::days(idx as i64),
                drop,
            });
        }
        report.accept(SRC);
        let name = name_col.map(|c| rec[c].trim().to_string()).unwrap_or_default();
        data.counties.insert(
            fips,
            CaseSeries {
                name,
                cumulative,
                new_cases,
            },
        );
    }
    Ok((data, report))
}

// ---------------------------------------------------------------------------
// Mobility

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MovementData {
    /// (change_in_movement, stay_put) per county per day.
    pub rows: BTreeMap<Fips, BTreeMap<NaiveDate, (f64, f64)>>,
}

pub fn load_movement(path: &Path) -> Result<(MovementData, IngestReport), IngestError> {
    load_movement_from_reader(open(path)?)
}

/// Tab-separated movement-range layout keyed by `ds` and `polygon_id`.
pub fn load_movement_from_reader<R: Read>(
    r: R,
) -> Result<(MovementData, IngestReport), IngestError> {
    const SRC: &str = "mobility";
    let mut report = IngestReport::default();
    report.counts(SRC);
    let mut rdr = reader(r, b'\t');
    let headers = rdr.headers()?.clone();
    let mut data = MovementData::default();
    if headers.is_empty() {
        return Ok((data, report));
    }
    let ds = require(&headers, &["ds"])?;
    let poly = require(&headers, &["polygon_id"])?;
    let cim = require(&headers, &["all_day_bing_tiles_visited_relative_change"])?;
    let sp = require(&headers, &["all_day_ratio_single_tile_users"])?;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.read(SRC);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let Some(date) = parse_date(field(ds)) else {
            report.reject(SRC, line, format!("unparseable date `{}`", field(ds)));
            continue;
        };
        let fips: Fips = match field(poly).parse() {
            Ok(f) => f,
            Err(e) => {
                report.reject(SRC, line, e.to_string());
                continue;
            }
        };
        let (Some(change), Some(stay)) = (parse_f64(field(cim)), parse_f64(field(sp))) else {
            report.reject(SRC, line, "unparseable mobility value");
            continue;
        };
        if !(0.0..=1.0).contains(&stay) {
            report.reject(SRC, line, format!("stay_put {stay} outside [0,1]"));
            continue;
        }
        let days = data.rows.entry(fips).or_default();
        if days.contains_key(&date) {
            report.counts(SRC).rejected += 1;
            report.anomalies.push(Anomaly::DuplicateKey {
                source: SRC.into(),
                key: format!("{fips} {date}"),
            });
            continue;
        }
        days.insert(date, (change, stay));
        report.accept(SRC);
    }
    Ok((data, report))
}

// ---------------------------------------------------------------------------
// Static attributes and weather

#[derive(Debug, Clone, PartialEq)]
pub struct CountyStatic {
    pub population: u64,
    pub attributes: Option<[f64; 8]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaticData {
    pub counties: BTreeMap<Fips, CountyStatic>,
}

pub fn load_static(path: &Path) -> Result<(StaticData, IngestReport), IngestError> {
    load_static_from_reader(open(path)?)
}

/// Comma-separated `fips,population[,<attribute columns>]`. The eight
/// attribute columns are only read when all of them are present.
pub fn load_static_from_reader<R: Read>(r: R) -> Result<(StaticData, IngestReport), IngestError> {
    const SRC: &str = "static";
    let mut report = IngestReport::default();
    report.counts(SRC);
    let mut rdr = reader(r, b',');
    let headers = rdr.headers()?.clone();
    let mut data = StaticData::default();
    if headers.is_empty() {
        return Ok((data, report));
    }
    let fips_col = require(&headers, &["fips"])?;
    let pop_col = require(&headers, &["population"])?;
    let attr_cols: Option<Vec<usize>> = STATIC_ATTRIBUTES
        .iter()
        .map(|n| column(&headers, &[n]))
        .collect();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.read(SRC);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let fips: Fips = match field(fips_col).parse() {
            Ok(f) => f,
            Err(e) => {
                report.reject(SRC, line, e.to_string());
                continue;
            }
        };
        let pop_raw = field(pop_col).trim();
        let population = match pop_raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v <= 0.0 => {
                return Err(IngestError::NonPositivePopulation {
                    fips,
                    value: pop_raw.to_string(),
                })
            }
            Ok(v) if v.is_finite() && v.fract() == 0.0 => v as u64,
            _ => {
                report.reject(SRC, line, format!("bad population `{pop_raw}`"));
                continue;
            }
        };
        let attributes = match &attr_cols {
            Some(cols) => {
                let vals: Option<Vec<f64>> = cols.iter().map(|&c| parse_f64(field(c))).collect();
                match vals {
                    Some(v) => Some(<[f64; 8]>::try_from(v).expect("eight columns")),
                    None => {
                        report.reject(SRC, line, "unparseable attribute value");
                        continue;
                    }
                }
            }
            None => None,
        };
        if data.counties.contains_key(&fips) {
            report.counts(SRC).rejected += 1;
            report.anomalies.push(Anomaly::DuplicateKey {
                source: SRC.into(),
                key: fips.to_string(),
            });
            continue;
        }
        data.counties.insert(fips, CountyStatic { population, attributes });
        report.accept(SRC);
    }
    Ok((data, report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeatherData {
    /// (temp_min, temp_max) in °C, already averaged per county.
    pub rows: BTreeMap<Fips, BTreeMap<NaiveDate, (f64, f64)>>,
}

pub fn load_weather(path: &Path) -> Result<(WeatherData, IngestReport), IngestError> {
    load_weather_from_reader(open(path)?)
}

/// Comma-separated `fips,date,tmin_c,tmax_c`.
pub fn load_weather_from_reader<R: Read>(r: R) -> Result<(WeatherData, IngestReport), IngestError> {
    const SRC: &str = "weather";
    let mut report = IngestReport::default();
    report.counts(SRC);
    let mut rdr = reader(r, b',');
    let headers = rdr.headers()?.clone();
    let mut data = WeatherData::default();
    if headers.is_empty() {
        return Ok((data, report));
    }
    let fips_col = require(&headers, &["fips"])?;
    let date_col = require(&headers, &["date"])?;
    let lo_col = require(&headers, &["tmin_c"])?;
    let hi_col = require(&headers, &["tmax_c"])?;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.read(SRC);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let fips: Fips = match field(fips_col).parse() {
            Ok(f) => f,
            Err(e) => {
                report.reject(SRC, line, e.to_string());
                continue;
            }
        };
        let Some(date) = parse_date(field(date_col)) else {
            report.reject(SRC, line, format!("unparseable date `{}`", field(date_col)));
            continue;
        };
        let (Some(lo), Some(hi)) = (parse_f64(field(lo_col)), parse_f64(field(hi_col))) else {
            report.reject(SRC, line, "unparseable temperature");
            continue;
        };
        if lo > hi {
            report.reject(SRC, line, format!("tmin {lo} exceeds tmax {hi}"));
            continue;
        }
        let days = data.rows.entry(fips).or_default();
        if days.contains_key(&date) {
            report.counts(SRC).rejected += 1;
            report.anomalies.push(Anomaly::DuplicateKey {
                source: SRC.into(),
                key: format!("{fips} {date}"),
            });
            continue;
        }
        days.insert(date, (lo, hi));
        report.accept(SRC);
    }
    Ok((data, report))
}

// ---------------------------------------------------------------------------
// Connectedness graph

/// Symmetric sparse graph of scaled social-connectedness weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConnectednessGraph {
    nodes: Vec<Fips>,
    index: HashMap<Fips, usize>,
    /// Neighbour lists sorted by node index; self-edges included.
    adj: Vec<Vec<(u32, u64)>>,
}

impl ConnectednessGraph {
    /// Build from undirected edges. Panics on conflicting duplicates; use
    /// [`load_sci`] for validated input.
    pub fn from_edges(edges: impl IntoIterator<Item = (Fips, Fips, u64)>) -> Self {
        let mut pairs: BTreeMap<(Fips, Fips), u64> = BTreeMap::new();
        for (a, b, w) in edges {
            let key = (a.min(b), a.max(b));
            if let Some(prev) = pairs.insert(key, w) {
                assert_eq!(prev, w, "conflicting weights for {a}-{b}");
            }
        }
        Self::from_pairs(&pairs)
    }

    fn from_pairs(pairs: &BTreeMap<(Fips, Fips), u64>) -> Self {
        let node_set: BTreeSet<Fips> = pairs.keys().flat_map(|(a, b)| [*a, *b]).collect();
        let nodes: Vec<Fips> = node_set.into_iter().collect();
        let index: HashMap<Fips, usize> = nodes.iter().enumerate().map(|(i, f)| (*f, i)).collect();
        let mut adj: Vec<Vec<(u32, u64)>> = vec![Vec::new(); nodes.len()];
        for (&(a, b), &w) in pairs {
            let (ia, ib) = (index[&a], index[&b]);
            adj[ia].push((ib as u32, w));
            if ia != ib {
                adj[ib].push((ia as u32, w));
            }
        }
        for row in &mut adj {
            row.sort_unstable_by_key(|(j, _)| *j);
        }
        Self { nodes, index, adj }
    }

    pub fn nodes(&self) -> &[Fips] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, f: Fips) -> bool {
        self.index.contains_key(&f)
    }

    pub fn index_of(&self, f: Fips) -> Option<usize> {
        self.index.get(&f).copied()
    }

    pub fn weight(&self, a: Fips, b: Fips) -> Option<u64> {
        let (ia, ib) = (self.index_of(a)?, self.index_of(b)? as u32);
        let row = &self.adj[ia];
        row.binary_search_by_key(&ib, |(j, _)| *j).ok().map(|k| row[k].1)
    }

    /// Neighbours of `f` (including itself if a self-edge was loaded).
    pub fn neighbors(&self, f: Fips) -> impl Iterator<Item = (Fips, u64)> + '_ {
        self.index_of(f)
            .map(|i| self.adj[i].as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|(j, w)| (self.nodes[*j as usize], *w))
    }

    /// Neighbour list by node index, for hot loops.
    pub fn neighbors_by_index(&self, i: usize) -> &[(u32, u64)] {
        &self.adj[i]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }

    /// Undirected edges with a <= b, in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = (Fips, Fips, u64)> + '_ {
        self.adj.iter().enumerate().flat_map(move |(i, row)| {
            row.iter()
                .filter(move |(j, _)| *j as usize >= i)
                .map(move |(j, w)| (self.nodes[i], self.nodes[*j as usize], *w))
        })
    }
}

pub fn load_sci(path: &Path) -> Result<(ConnectednessGraph, IngestReport), IngestError> {
    load_sci_from_reader(open(path)?)
}

/// Tab-separated `user_loc, fr_loc, scaled_sci` edge list. A pair listed in
/// only one direction is mirrored; two different values for one pair is a
/// hard error.
pub fn load_sci_from_reader<R: Read>(
    r: R,
) -> Result<(ConnectednessGraph, IngestReport), IngestError> {
    const SRC: &str = "sci";
    let mut report = IngestReport::default();
    report.counts(SRC);
    let mut rdr = reader(r, b'\t');
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok((ConnectednessGraph::default(), report));
    }
    let user = require(&headers, &["user_loc"])?;
    let friend = require(&headers, &["fr_loc"])?;
    let sci = require(&headers, &["scaled_sci"])?;
    let mut pairs: BTreeMap<(Fips, Fips), u64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        report.read(SRC);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let (a, b) = match (field(user).parse::<Fips>(), field(friend).parse::<Fips>()) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                report.reject(SRC, line, e.to_string());
                continue;
            }
        };
        let w = match field(sci).trim().parse::<u64>() {
            Ok(w) if (SCI_MIN..=SCI_MAX).contains(&w) => w,
            _ => {
                report.reject(SRC, line, format!("scaled_sci `{}` outside [1, 1e9]", field(sci)));
                continue;
            }
        };
        let key = (a.min(b), a.max(b));
        match pairs.get(&key) {
            Some(&prev) if prev != w => {
                return Err(IngestError::ConflictingSci {
                    a: key.0,
                    b: key.1,
                    first: prev,
                    second: w,
                })
            }
            _ => {
                pairs.insert(key, w);
            }
        }
        report.accept(SRC);
    }
    Ok((ConnectednessGraph::from_pairs(&pairs), report))
}

// ---------------------------------------------------------------------------
// Assembly

/// Merge the partial sources into a validated panel. Counties without a
/// population are dropped and reported.
pub fn assemble(
    cases: CaseData,
    movement: &MovementData,
    statics: &StaticData,
    weather: &WeatherData,
) -> (CountyPanel, IngestReport) {
    let mut report = IngestReport::default();
    let Some(start) = cases.start else {
        return (
            CountyPanel::empty(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()),
            report,
        );
    };
    let days = cases.days;
    let day_index = |d: &NaiveDate| {
        let i = (*d - start).num_days();
        (i >= 0 && (i as usize) < days).then_some(i as usize)
    };
    let mut counties = BTreeMap::new();
    for (fips, series) in cases.counties {
        let Some(st) = statics.counties.get(&fips) else {
            report.anomalies.push(Anomaly::DroppedCounty {
                fips,
                reason: "no population".into(),
            });
            continue;
        };
        let mut c = County {
            name: series.name,
            population: st.population,
            attributes: st.attributes,
            cumulative_cases: series.cumulative,
            new_cases: series.new_cases,
            change_in_movement: vec![None; days],
            stay_put: vec![None; days],
            temp_min: vec![None; days],
            temp_max: vec![None; days],
            mobility_imputed: false,
        };
        match movement.rows.get(&fips) {
            Some(rows) => {
                for (d, (cim, sp)) in rows {
                    if let Some(i) = day_index(d) {
                        c.change_in_movement[i] = Some(*cim);
                        c.stay_put[i] = Some(*sp);
                    }
                }
            }
            None => {
                c.mobility_imputed = true;
                report.anomalies.push(Anomaly::MobilityImputed { fips });
            }
        }
        match weather.rows.get(&fips) {
            Some(rows) => {
                for (d, (lo, hi)) in rows {
                    if let Some(i) = day_index(d) {
                        c.temp_min[i] = Some(*lo);
                        c.temp_max[i] = Some(*hi);
                    }
                }
            }
            None => report.anomalies.push(Anomaly::MissingWeather { fips }),
        }
        counties.insert(fips, c);
    }
    (CountyPanel { start, days, counties }, report)
}

/// Paths to the five raw sources.
#[derive(Debug, Clone)]
pub struct SourcePaths<'a> {
    pub cases: &'a Path,
    pub mobility: &'a Path,
    pub sci: &'a Path,
    pub statics: &'a Path,
    pub weather: &'a Path,
}

/// Load every source and assemble. Loaders run concurrently.
pub fn ingest_all(
    paths: &SourcePaths<'_>,
) -> Result<(CountyPanel, ConnectednessGraph, IngestReport), IngestError> {
    let ((cases, movement), (sci, (statics, weather))) = rayon::join(
        || rayon::join(|| load_cases(paths.cases), || load_movement(paths.mobility)),
        || {
            rayon::join(
                || load_sci(paths.sci),
                || rayon::join(|| load_static(paths.statics), || load_weather(paths.weather)),
            )
        },
    );
    let (cases, mut report) = cases?;
    let (movement, r) = movement?;
    report.merge(r);
    let (graph, r) = sci?;
    report.merge(r);
    let (statics, r) = statics?;
    report.merge(r);
    let (weather, r) = weather?;
    report.merge(r);
    let (panel, r) = assemble(cases, &movement, &statics, &weather);
    report.merge(r);
    Ok((panel, graph, report))
}

// ---------------------------------------------------------------------------
// Snapshot

const SNAPSHOT_MAGIC: &[u8; 8] = b"CCPANEL\0";
pub const SNAPSHOT_VERSION: u32 = 1;

impl From<ContainerError> for IngestError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Version { found, expected } => {
                IngestError::VersionMismatch { found, expected }
            }
            ContainerError::Checksum => IngestError::ChecksumMismatch,
            other => IngestError::Malformed(other.to_string()),
        }
    }
}

fn encode_opt_column(e: &mut Encoder, col: &[Option<f64>]) {
    e.len(col.len());
    for v in col {
        e.opt_f64(*v);
    }
}

fn decode_opt_column(d: &mut Decoder<'_>) -> Result<Vec<Option<f64>>, ContainerError> {
    let n = d.read_len()?;
    (0..n).map(|_| d.opt_f64()).collect()
}

/// Serialize a panel and graph into the canonical snapshot bytes.
pub fn snapshot_bytes(panel: &CountyPanel, graph: &ConnectednessGraph) -> Vec<u8> {
    use chrono::Datelike;
    let mut e = Encoder::new();
    e.i32(panel.start.num_days_from_ce());
    e.len(panel.days);
    e.len(panel.counties.len());
    for (fips, c) in &panel.counties {
        e.u32(fips.0);
        e.str(&c.name);
        e.u64(c.population);
        match &c.attributes {
            Some(a) => {
                e.u8(1);
                for v in a {
                    e.f64(*v);
                }
            }
            None => e.u8(0),
        }
        e.u8(u8::from(c.mobility_imputed));
        e.len(c.cumulative_cases.len());
        for v in &c.cumulative_cases {
            e.u64(*v);
        }
        e.f64s(&c.new_cases);
        encode_opt_column(&mut e, &c.change_in_movement);
        encode_opt_column(&mut e, &c.stay_put);
        encode_opt_column(&mut e, &c.temp_min);
        encode_opt_column(&mut e, &c.temp_max);
    }
    let edges: Vec<_> = graph.edges().collect();
    e.len(edges.len());
    for (a, b, w) in edges {
        e.u32(a.0);
        e.u32(b.0);
        e.u64(w);
    }
    e.finish(SNAPSHOT_MAGIC, SNAPSHOT_VERSION)
}

pub fn restore_bytes(bytes: &[u8]) -> Result<(CountyPanel, ConnectednessGraph), IngestError> {
    let mut d = Decoder::open(bytes, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
    let start = NaiveDate::from_num_days_from_ce_opt(d.i32()?)
        .ok_or_else(|| IngestError::Malformed("bad start date".into()))?;
    let days = d.read_len()?;
    let n = d.read_len()?;
    let mut counties = BTreeMap::new();
    for _ in 0..n {
        let fips = Fips(d.u32()?);
        let name = d.str()?;
        let population = d.u64()?;
        let attributes = match d.u8()? {
            0 => None,
            _ => {
                let mut a = [0.0; 8];
                for v in &mut a {
                    *v = d.f64()?;
                }
                Some(a)
            }
        };
        let mobility_imputed = d.u8()? != 0;
        let m = d.read_len()?;
        let cumulative_cases = (0..m).map(|_| d.u64()).collect::<Result<_, _>>()?;
        let new_cases = d.f64s()?;
        let change_in_movement = decode_opt_column(&mut d)?;
        let stay_put = decode_opt_column(&mut d)?;
        let temp_min = decode_opt_column(&mut d)?;
        let temp_max = decode_opt_column(&mut d)?;
        counties.insert(
            fips,
            County {
                name,
                population,
                attributes,
                cumulative_cases,
                new_cases,
                change_in_movement,
                stay_put,
                temp_min,
                temp_max,
                mobility_imputed,
            },
        );
    }
    let ne = d.read_len()?;
    let mut pairs = BTreeMap::new();
    for _ in 0..ne {
        let a = Fips(d.u32()?);
        let b = Fips(d.u32()?);
        pairs.insert((a, b), d.u64()?);
    }
    d.finish()?;
    let panel = CountyPanel { start, days, counties };
    panel.validate().map_err(IngestError::Malformed)?;
    Ok((panel, ConnectednessGraph::from_pairs(&pairs)))
}

pub fn snapshot(panel: &CountyPanel, graph: &ConnectednessGraph, path: &Path) -> Result<(), IngestError> {
    std::fs::write(path, snapshot_bytes(panel, graph)).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn restore(path: &Path) -> Result<(CountyPanel, ConnectednessGraph), IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    restore_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn first_difference() {
        let (cum, new, drops) = correct_cumulative(&[0, 0, 5, 5, 9]);
        assert_eq!(cum, vec![0, 0, 5, 5, 9]);
        assert_eq!(new, vec![0.0, 0.0, 5.0, 0.0, 4.0]);
        assert!(drops.is_empty());
    }

    #[test]
    fn running_max_correction() {
        let (cum, new, drops) = correct_cumulative(&[10, 8, 12]);
        assert_eq!(cum, vec![10, 10, 12]);
        assert_eq!(new, vec![0.0, 0.0, 2.0]);
        assert_eq!(drops, vec![(1, 2)]);
    }

    #[test]
    fn cases_file_parses_jhu_layout() {
        let csv = "UID,FIPS,Admin2,Province_State,1/30/20,1/31/20,2/1/20\n\
                   1,1001.0,Autauga,Alabama,10,8,12\n\
                   2,08013,Boulder,Colorado,0,0,5\n\
                   3,,Unassigned,Colorado,0,0,0\n";
        let (data, report) = load_cases_from_reader(csv.as_bytes()).unwrap();
        assert_eq!(data.start, Some(d(2020, 1, 30)));
        assert_eq!(data.days, 3);
        let a = &data.counties[&Fips(1001)];
        assert_eq!(a.name, "Autauga");
        assert_eq!(a.cumulative, vec![10, 10, 12]);
        // [10,8,12] corrected to [10,10,12]; day 0 has no predecessor
        assert_eq!(a.new_cases, vec![0.0, 0.0, 2.0]);
        let c = report.sources["cases"];
        assert_eq!((c.read, c.accepted, c.rejected), (3, 2, 1));
        assert!(report
            .anomalies
            .iter()
            .any(|a| matches!(a, Anomaly::NegativeDiff { drop: 2, .. })));
    }

    #[test]
    fn cases_example_matches_new_case_rule() {
        // new_cases are differences of the corrected series, so the dip to 8
        // contributes nothing and the total stays 12 - 10.
        let csv = "FIPS,1/1/21,1/2/21,1/3/21\n1,10,8,12\n";
        let (data, report) = load_cases_from_reader(csv.as_bytes()).unwrap();
        assert_eq!(data.counties[&Fips(1)].cumulative, vec![10, 10, 12]);
        assert_eq!(data.counties[&Fips(1)].new_cases, vec![0.0, 0.0, 2.0]);
        assert_eq!(report.anomalies.len(), 1);
    }

    #[test]
    fn duplicate_fips_is_hard_error() {
        let csv = "FIPS,1/1/21\n1,1\n01,2\n";
        assert!(matches!(
            load_cases_from_reader(csv.as_bytes()),
            Err(IngestError::DuplicateFips(Fips(1)))
        ));
    }

    #[test]
    fn empty_cases_file() {
        let (data, report) = load_cases_from_reader("".as_bytes()).unwrap();
        assert!(data.counties.is_empty());
        assert_eq!(report.sources["cases"].read, 0);
    }

    #[test]
    fn malformed_count_rejected() {
        let csv = "FIPS,1/1/21,1/2/21\n1,1,x\n2,1,-3\n3,1,2\n";
        let (data, report) = load_cases_from_reader(csv.as_bytes()).unwrap();
        assert_eq!(data.counties.len(), 1);
        assert_eq!(report.sources["cases"].rejected, 2);
    }

    #[test]
    fn non_contiguous_dates_rejected() {
        let csv = "FIPS,1/1/21,1/3/21\n1,1,2\n";
        assert!(matches!(
            load_cases_from_reader(csv.as_bytes()),
            Err(IngestError::NonContiguousDates(..))
        ));
    }

    const MOBILITY_HEADER: &str =
        "ds\tpolygon_id\tall_day_bing_tiles_visited_relative_change\tall_day_ratio_single_tile_users\n";

    #[test]
    fn mobility_passthrough_and_bounds() {
        let tsv = format!(
            "{MOBILITY_HEADER}2020-05-01\t08013\t-0.31\t0.27\n2020-05-02\t08013\t0.1\t1.7\nnot-a-date\t08013\t0\t0.2\n"
        );
        let (data, report) = load_movement_from_reader(tsv.as_bytes()).unwrap();
        assert_eq!(data.rows[&Fips(8013)][&d(2020, 5, 1)], (-0.31, 0.27));
        let c = report.sources["mobility"];
        assert_eq!((c.read, c.accepted, c.rejected), (3, 1, 2));
    }

    #[test]
    fn county_absent_from_mobility_is_flagged() {
        let (cases, _) =
            load_cases_from_reader("FIPS,1/1/21,1/2/21\n1,0,1\n2,0,1\n".as_bytes()).unwrap();
        let tsv = format!("{MOBILITY_HEADER}2021-01-01\t1\t0\t0.5\n");
        let (mv, _) = load_movement_from_reader(tsv.as_bytes()).unwrap();
        let (st, _) = load_static_from_reader("fips,population\n1,100\n2,200\n".as_bytes()).unwrap();
        let (panel, report) = assemble(cases, &mv, &st, &WeatherData::default());
        assert!(!panel.counties[&Fips(1)].mobility_imputed);
        assert!(panel.counties[&Fips(2)].mobility_imputed);
        assert!(report
            .anomalies
            .contains(&Anomaly::MobilityImputed { fips: Fips(2) }));
        panel.validate().unwrap();
    }

    #[test]
    fn county_without_population_dropped() {
        let (cases, _) =
            load_cases_from_reader("FIPS,1/1/21\n1,0\n2,0\n".as_bytes()).unwrap();
        let (st, _) = load_static_from_reader("fips,population\n1,100\n".as_bytes()).unwrap();
        let (panel, report) = assemble(cases, &MovementData::default(), &st, &WeatherData::default());
        assert_eq!(panel.counties.keys().copied().collect::<Vec<_>>(), vec![Fips(1)]);
        assert!(report.anomalies.iter().any(|a| matches!(a, Anomaly::DroppedCounty { fips: Fips(2), .. })));
    }

    #[test]
    fn sci_symmetry_and_mirroring() {
        let (g, _) = load_sci_from_reader(
            "user_loc\tfr_loc\tscaled_sci\n1\t2\t100\n2\t1\t100\n1\t3\t50\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(g.weight(Fips(1), Fips(2)), Some(100));
        assert_eq!(g.weight(Fips(2), Fips(1)), Some(100));
        assert_eq!(g.weight(Fips(3), Fips(1)), Some(50));
        assert_eq!(g.edges().count(), 2);
    }

    #[test]
    fn sci_conflict_is_hard_error() {
        let r = load_sci_from_reader(
            "user_loc\tfr_loc\tscaled_sci\n1\t2\t100\n2\t1\t200\n".as_bytes(),
        );
        assert!(matches!(r, Err(IngestError::ConflictingSci { .. })));
    }

    #[test]
    fn sci_out_of_range_rejected() {
        let (g, report) = load_sci_from_reader(
            "user_loc\tfr_loc\tscaled_sci\n1\t2\t0\n1\t3\t1000000001\n1\t4\t7\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(report.sources["sci"].rejected, 2);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn static_and_weather() {
        let (st, _) = load_static_from_reader("fips,population\n08013,330758\n".as_bytes()).unwrap();
        assert_eq!(st.counties[&Fips(8013)].population, 330758);
        assert!(st.counties[&Fips(8013)].attributes.is_none());
        assert!(matches!(
            load_static_from_reader("fips,population\n1,0\n".as_bytes()),
            Err(IngestError::NonPositivePopulation { .. })
        ));

        let (w, report) = load_weather_from_reader(
            "fips,date,tmin_c,tmax_c\n08013,2020-07-01,12.0,31.5\n08013,2020-07-02,20,15\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(w.rows[&Fips(8013)][&d(2020, 7, 1)], (12.0, 31.5));
        assert_eq!(report.sources["weather"].rejected, 1);
    }

    #[test]
    fn static_attributes_read_when_all_present() {
        let header = format!("fips,population,{}\n", STATIC_ATTRIBUTES.join(","));
        let csv = format!("{header}1,1000,1,2,3,4,5,6,7,8\n");
        let (st, _) = load_static_from_reader(csv.as_bytes()).unwrap();
        assert_eq!(
            st.counties[&Fips(1)].attributes,
            Some([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        );
    }

    fn toy_panel() -> (CountyPanel, ConnectednessGraph) {
        let (cases, _) = load_cases_from_reader(
            "FIPS,Admin2,1/1/21,1/2/21,1/3/21\n1,A,0,3,9\n2,B,1,1,2\n".as_bytes(),
        )
        .unwrap();
        let tsv = format!("{MOBILITY_HEADER}2021-01-02\t1\t-0.25\t0.3\n");
        let (mv, _) = load_movement_from_reader(tsv.as_bytes()).unwrap();
        let (st, _) = load_static_from_reader("fips,population\n1,100\n2,200\n".as_bytes()).unwrap();
        let (w, _) = load_weather_from_reader("fips,date,tmin_c,tmax_c\n2,2021-01-03,-1.5,4\n".as_bytes()).unwrap();
        let (panel, _) = assemble(cases, &mv, &st, &w);
        let g = ConnectednessGraph::from_edges([(Fips(1), Fips(2), 10), (Fips(1), Fips(1), 99)]);
        (panel, g)
    }

    #[test]
    fn snapshot_round_trip_and_corruption() {
        let (panel, g) = toy_panel();
        let bytes = snapshot_bytes(&panel, &g);
        let (p2, g2) = restore_bytes(&bytes).unwrap();
        assert_eq!(p2, panel);
        assert_eq!(g2, g);
        assert_eq!(snapshot_bytes(&p2, &g2), bytes);

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(restore_bytes(&bad), Err(IngestError::ChecksumMismatch)));

        let mut wrong_version = bytes;
        wrong_version[8] = 99;
        assert!(matches!(
            restore_bytes(&wrong_version),
            Err(IngestError::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn snapshot_of_empty_panel() {
        let panel = CountyPanel::empty(d(2020, 4, 1));
        let g = ConnectednessGraph::default();
        let (p2, g2) = restore_bytes(&snapshot_bytes(&panel, &g)).unwrap();
        assert_eq!(p2, panel);
        assert!(g2.is_empty());
    }

    #[test]
    fn snapshot_file_round_trip() {
        let (panel, g) = toy_panel();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.snap");
        snapshot(&panel, &g, &path).unwrap();
        assert_eq!(restore(&path).unwrap(), (panel, g));
    }

    proptest! {
        #[test]
        fn corrected_cumulative_is_monotone(raw in prop::collection::vec(0u64..1000, 1..60)) {
            let (cum, new, _) = correct_cumulative(&raw);
            prop_assert!(cum.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(new.iter().all(|v| *v >= 0.0));
            let total: f64 = new.iter().sum();
            prop_assert_eq!(total as u64, cum[cum.len() - 1] - cum[0]);
        }

        #[test]
        fn snapshot_is_exact(vals in prop::collection::vec(prop::option::of(-1e9f64..1e9), 3)) {
            let (mut panel, g) = toy_panel();
            panel.counties.get_mut(&Fips(1)).unwrap().change_in_movement = vals;
            let (p2, _) = restore_bytes(&snapshot_bytes(&panel, &g)).unwrap();
            prop_assert_eq!(p2, panel);
        }

        #[test]
        fn graph_is_symmetric(edges in prop::collection::btree_map((1u32..20, 1u32..20), 1u64..1000, 0..40)) {
            let canon: BTreeMap<(Fips, Fips), u64> = edges
                .into_iter()
                .map(|((a, b), w)| ((Fips(a.min(b)), Fips(a.max(b))), w))
                .collect();
            let g = ConnectednessGraph::from_pairs(&canon);
            for &a in g.nodes() {
                for (b, w) in g.neighbors(a) {
                    prop_assert_eq!(g.weight(b, a), Some(w));
                }
            }
        }
    }
}
