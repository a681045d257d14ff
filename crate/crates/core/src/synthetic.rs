//! Synthetic county epidemics in the raw source formats.
//!
//! Weekly log-incidence follows a spatially coupled AR(2) process
//!
//! ```text
//! y[i,t] = 1.6 y[i,t-1] − 0.8 y[i,t-2] + κ (Σ_j w̄_ij y[j,t-1] − y[i,t-1]) + ε
//! ```
//!
//! with w̄ the row-normalized connectedness weights. Daily counts are Poisson
//! draws around a log-linear interpolation of the weekly rates.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::IngestError;
use crate::fips::Fips;
use crate::ingest::{
    assemble, load_cases_from_reader, load_movement_from_reader, load_sci_from_reader, load_static_from_reader,
    load_weather_from_reader, ConnectednessGraph, CountyPanel, IngestReport, STATIC_ATTRIBUTES,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    pub counties: usize,
    pub weeks: usize,
    pub seed: u64,
    /// Spatial coupling κ.
    pub coupling: f64,
    /// Innovation sd of the weekly log-rate.
    pub noise_sd: f64,
    /// Random extra neighbours per county on top of a ring.
    pub extra_edges: usize,
    /// Must be a Sunday.
    pub start: NaiveDate,
    pub reporting: Option<ReportingArtifacts>,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            counties: 100,
            weeks: 60,
            seed: 1,
            coupling: 0.3,
            noise_sd: 0.15,
            extra_edges: 5,
            start: NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date"),
            reporting: None,
        }
    }
}

/// Reporting delays layered over true daily counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportingArtifacts {
    /// Share of weekend cases reported on the day; the rest lands on Monday.
    pub weekend_share: f64,
    /// Weekly chance that a county withholds reports and then dumps them.
    pub dump_probability: f64,
    /// Withholding lasts this many days at most.
    pub max_backlog_days: usize,
}

impl Default for ReportingArtifacts {
    fn default() -> Self {
        Self { weekend_share: 0.3, dump_probability: 0.15, max_backlog_days: 10 }
    }
}

/// Raw source files as text.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSources {
    pub cases_csv: String,
    pub mobility_tsv: String,
    pub sci_tsv: String,
    pub static_csv: String,
    pub weather_csv: String,
}

pub const CASES_FILE: &str = "cases.csv";
pub const MOBILITY_FILE: &str = "mobility.tsv";
pub const SCI_FILE: &str = "sci.tsv";
pub const STATIC_FILE: &str = "static.csv";
pub const WEATHER_FILE: &str = "weather.csv";

impl SyntheticSources {
    /// Writes the five files into `dir` and returns their paths in the order
    /// cases, mobility, sci, static, weather.
    pub fn write_to(&self, dir: &Path) -> io::Result<[PathBuf; 5]> {
        std::fs::create_dir_all(dir)?;
        let files = [
            (CASES_FILE, &self.cases_csv),
            (MOBILITY_FILE, &self.mobility_tsv),
            (SCI_FILE, &self.sci_tsv),
            (STATIC_FILE, &self.static_csv),
            (WEATHER_FILE, &self.weather_csv),
        ];
        let mut out: [PathBuf; 5] = Default::default();
        for (slot, (name, body)) in out.iter_mut().zip(files) {
            *slot = dir.join(name);
            std::fs::write(&*slot, body)?;
        }
        Ok(out)
    }

    /// Parses the sources through the regular loaders.
    pub fn ingest(&self) -> Result<(CountyPanel, ConnectednessGraph, IngestReport), IngestError> {
        let (cases, mut report) = load_cases_from_reader(self.cases_csv.as_bytes())?;
        let (movement, r) = load_movement_from_reader(self.mobility_tsv.as_bytes())?;
        report.merge(r);
        let (graph, r) = load_sci_from_reader(self.sci_tsv.as_bytes())?;
        report.merge(r);
        let (statics, r) = load_static_from_reader(self.static_csv.as_bytes())?;
        report.merge(r);
        let (weather, r) = load_weather_from_reader(self.weather_csv.as_bytes())?;
        report.merge(r);
        let (panel, r) = assemble(cases, &movement, &statics, &weather);
        report.merge(r);
        Ok((panel, graph, report))
    }
}

fn fips_of(i: usize) -> Fips {
    Fips(1001 + 2 * i as u32)
}

const BURN_IN_WEEKS: usize = 30;

/// Weekly log-rate deviations `[county][week]` of the coupled AR(2) process.
pub fn coupled_ar2_paths(
    weights: &[Vec<(usize, f64)>],
    weeks: usize,
    coupling: f64,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let n = weights.len();
    let noise = Normal::new(0.0, noise_sd).expect("finite sd");
    let init = Normal::new(0.0, 0.3).expect("finite sd");
    let total = weeks + BURN_IN_WEEKS;
    let mut y: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0; total]).collect();
    for row in y.iter_mut() {
        row[0] = init.sample(rng);
        row[1] = row[0] + init.sample(rng) * 0.3;
    }
    for t in 2..total {
        for i in 0..n {
            let wsum: f64 = weights[i].iter().map(|(_, w)| w).sum();
            let neigh: f64 = weights[i].iter().map(|(j, w)| w * y[*j][t - 1]).sum::<f64>() / wsum;
            let v = 1.6 * y[i][t - 1] - 0.8 * y[i][t - 2] + coupling * (neigh - y[i][t - 1]) + noise.sample(rng);
            y[i][t] = v;
        }
    }
    y.into_iter().map(|row| row[BURN_IN_WEEKS..].to_vec()).collect()
}

fn jhu_date(d: NaiveDate) -> String {
    format!("{}/{}/{:02}", d.month(), d.day(), d.year() % 100)
}

/// Moves weekend reports to Monday and adds occasional backlog dumps. The
/// total count is preserved except for cases still withheld at the end.
fn apply_reporting(daily: &[u64], start: NaiveDate, art: &ReportingArtifacts, rng: &mut impl Rng) -> Vec<u64> {
    let n = daily.len();
    let mut out = vec![0u64; n];
    let mut carry = 0u64;
    let mut withhold_until = 0usize;
    for d in 0..n {
        let day = start + Duration::days(d as i64);
        if day.weekday() == Weekday::Sun && d >= withhold_until && rng.random_bool(art.dump_probability) {
            withhold_until = d + rng.random_range(3..=art.max_backlog_days.max(3));
        }
        let today = daily[d] + carry;
        if d < withhold_until {
            carry = today;
            continue;
        }
        match day.weekday() {
            Weekday::Sat | Weekday::Sun => {
                let shown = (today as f64 * art.weekend_share).round() as u64;
                out[d] = shown;
                carry = today - shown;
            }
            _ => {
                out[d] = today;
                carry = 0;
            }
        }
    }
    out
}

/// Generates the five raw sources for a synthetic epidemic.
pub fn generate(opts: &SyntheticOptions) -> SyntheticSources {
    assert_eq!(opts.start.weekday(), Weekday::Sun, "synthetic panels start on a Sunday");
    assert!(opts.counties >= 2, "need at least two counties");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.counties;
    let days = opts.weeks * 7;

    // ring plus random chords, symmetric
    let mut edges: std::collections::BTreeMap<(usize, usize), u64> = std::collections::BTreeMap::new();
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            edges.insert((i.min(j), i.max(j)), rng.random_range(1_000..1_000_000));
        }
        for _ in 0..opts.extra_edges {
            let j = rng.random_range(0..n);
            if j != i {
                let w = rng.random_range(1_000..1_000_000);
                edges.entry((i.min(j), i.max(j))).or_insert(w);
            }
        }
    }
    let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(a, b), &w) in &edges {
        weights[a].push((b, w as f64));
        weights[b].push((a, w as f64));
    }

    let populations: Vec<u64> = (0..n).map(|_| (10f64.powf(rng.random_range(4.3..6.3))).round() as u64).collect();
    let base_rate: Vec<f64> = (0..n).map(|_| 15.0 * (rng.random_range(-0.4..0.4f64)).exp()).collect();
    let latitude: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
    let paths = coupled_ar2_paths(&weights, opts.weeks + 1, opts.coupling, opts.noise_sd, &mut rng);

    let dates: Vec<NaiveDate> = (0..days).map(|d| opts.start + Duration::days(d as i64)).collect();
    let mut cases_csv = String::from("FIPS,Admin2");
    for d in &dates {
        write!(cases_csv, ",{}", jhu_date(*d)).unwrap();
    }
    cases_csv.push('\n');
    let mut mobility_tsv = String::from(
        "ds\tpolygon_id\tall_day_bing_tiles_visited_relative_change\tall_day_ratio_single_tile_users\n",
    );
    let mut weather_csv = String::from("fips,date,tmin_c,tmax_c\n");
    let mut static_csv = String::from("fips,population");
    for a in STATIC_ATTRIBUTES {
        write!(static_csv, ",{a}").unwrap();
    }
    static_csv.push('\n');

    let small = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n {
        let f = fips_of(i);
        let pop = populations[i];
        // log expected daily cases, anchored at each week's Wednesday
        let weekly_log: Vec<f64> =
            paths[i].iter().map(|y| (pop as f64 / 10_000.0 * base_rate[i] / 7.0).ln() + y).collect();
        let mut daily = Vec::with_capacity(days);
        for d in 0..days {
            let pos = (d as f64 - 3.0) / 7.0;
            let k = pos.floor().max(0.0) as usize;
            let frac = (pos - k as f64).clamp(0.0, 1.0);
            let lo = weekly_log[k.min(weekly_log.len() - 1)];
            let hi = weekly_log[(k + 1).min(weekly_log.len() - 1)];
            let lambda = (lo + (hi - lo) * frac).exp();
            daily.push(Poisson::new(lambda).map_or(0, |p| p.sample(&mut rng) as u64));
        }
        let reported = match &opts.reporting {
            Some(art) => apply_reporting(&daily, opts.start, art, &mut rng),
            None => daily.clone(),
        };
        let mut cum = (pop / 2_000).max(1);
        write!(cases_csv, "{f},County {i}").unwrap();
        for r in &reported {
            cum += r;
            write!(cases_csv, ",{cum}").unwrap();
        }
        cases_csv.push('\n');

        for (d, date) in dates.iter().enumerate() {
            let y = paths[i][(d / 7).min(paths[i].len() - 1)];
            let stay = (0.22 + 0.04 * y + 0.01 * small.sample(&mut rng)).clamp(0.0, 1.0);
            let change = -0.05 - 0.08 * y + 0.02 * small.sample(&mut rng);
            writeln!(mobility_tsv, "{date}\t{f}\t{change:.5}\t{stay:.5}").unwrap();
            let season = (2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 15.0) / 365.25).cos();
            let tmin = 8.0 + latitude[i] - 11.0 * season + 2.0 * small.sample(&mut rng);
            let tmax = tmin + 8.0 + (2.0 * small.sample(&mut rng)).abs();
            writeln!(weather_csv, "{f},{date},{tmin:.2},{tmax:.2}").unwrap();
        }

        let attrs = [
            pop as f64 / rng.random_range(500.0..5_000.0),
            rng.random_range(0.0..0.4),
            rng.random_range(0.0..0.5),
            rng.random_range(0.0..0.1),
            rng.random_range(0.1..0.3),
            rng.random_range(0.0..1.0),
            rng.random_range(0.2..0.8),
            rng.random_range(35_000.0..110_000.0),
        ];
        write!(static_csv, "{f},{pop}").unwrap();
        for a in attrs {
            write!(static_csv, ",{a:.4}").unwrap();
        }
        static_csv.push('\n');
    }

    let mut sci_tsv = String::from("user_loc\tfr_loc\tscaled_sci\n");
    for (&(a, b), &w) in &edges {
        writeln!(sci_tsv, "{}\t{}\t{w}", fips_of(a), fips_of(b)).unwrap();
    }

    SyntheticSources { cases_csv, mobility_tsv, sci_tsv, static_csv, weather_csv }
}

/// The coupled AR(2) epidemic with weekend under-reporting and backlog
/// dumps in the reported counts.
pub fn spike_suite(seed: u64) -> SyntheticSources {
    generate(&SyntheticOptions { seed, reporting: Some(ReportingArtifacts::default()), ..Default::default() })
}
