//! Forecast Hub submission layout.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use countycast_core::calendar::epiweek_of;
use countycast_core::forecaster::{ForecastEntry, ForecastSet, QUANTILES};
use countycast_core::{EpiWeek, Fips};

use crate::error::CliError;

pub const HEADER: [&str; 7] = ["forecast_date", "target", "target_end_date", "location", "type", "quantile", "value"];

pub fn target_label(horizon: usize) -> String {
    format!("{horizon} wk ahead inc case")
}

fn parse_target(s: &str) -> Option<usize> {
    let h = s.strip_suffix(" wk ahead inc case")?;
    h.parse().ok().filter(|h| *h >= 1)
}

/// One point row and, when present, seven quantile rows per entry. The
/// forecast date is the Saturday ending the as-of week.
pub fn write_hub<W: Write>(w: W, set: &ForecastSet) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HEADER)?;
    for (&(week, fips, h), e) in set.iter() {
        let date = week.end.to_string();
        let target = target_label(h);
        let end = week.offset(h as i64).end.to_string();
        let loc = fips.to_string();
        out.write_record([&date, &target, &end, &loc, "point", "", &e.point.to_string()])?;
        if let Some(q) = &e.quantiles {
            for (level, v) in QUANTILES.iter().zip(q) {
                out.write_record([&date, &target, &end, &loc, "quantile", &level.to_string(), &v.to_string()])?;
            }
        }
    }
    out.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    Ok(())
}

#[derive(Default)]
struct Pending {
    point: Option<f64>,
    quantiles: [Option<f64>; 7],
}

/// Parses a Hub file. Quantile levels outside the published seven are
/// ignored; an entry without a point row takes its median as the point.
pub fn read_hub<R: Read>(r: R, source: &str) -> Result<ForecastSet, CliError> {
    let bad = |line: u64, msg: String| CliError::Input(format!("{source}: line {line}: {msg}"));
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(|e| CliError::Input(format!("{source}: {e}")))?.clone();
    let idx = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Input(format!("{source}: missing column `{name}`")))
    };
    let cols: Vec<usize> = HEADER.iter().map(|h| idx(h)).collect::<Result<_, _>>()?;
    let mut pending: BTreeMap<(EpiWeek, Fips, usize), Pending> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{source}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(cols[i]).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d")
            .map_err(|_| bad(line, format!("bad forecast_date `{}`", field(0))))?;
        let week = epiweek_of(date).map_err(|e| bad(line, e.to_string()))?;
        let h = parse_target(field(1)).ok_or_else(|| bad(line, format!("unsupported target `{}`", field(1))))?;
        let end = NaiveDate::parse_from_str(field(2), "%Y-%m-%d")
            .map_err(|_| bad(line, format!("bad target_end_date `{}`", field(2))))?;
        if end != week.offset(h as i64).end {
            return Err(bad(line, format!("target_end_date {end} does not match `{}` from {date}", field(1))));
        }
        let fips: Fips = field(3).parse().map_err(|_| bad(line, format!("bad location `{}`", field(3))))?;
        let value: f64 = field(6).parse().map_err(|_| bad(line, format!("bad value `{}`", field(6))))?;
        let slot = pending.entry((week, fips, h)).or_default();
        match field(4) {
            "point" => slot.point = Some(value),
            "quantile" => {
                let q: f64 = field(5).parse().map_err(|_| bad(line, format!("bad quantile `{}`", field(5))))?;
                if let Some(k) = QUANTILES.iter().position(|l| (l - q).abs() < 1e-9) {
                    slot.quantiles[k] = Some(value);
                }
            }
            other => return Err(bad(line, format!("unknown type `{other}`"))),
        }
    }
    let mut set = ForecastSet::default();
    for ((week, fips, h), p) in pending {
        let quantiles = p.quantiles.iter().all(Option::is_some).then(|| p.quantiles.map(|v| v.unwrap_or_default()));
        let point = match (p.point, &quantiles) {
            (Some(v), _) => v,
            (None, Some(q)) => q[3],
            (None, None) => continue,
        };
        set.insert(week, fips, h, ForecastEntry { point, quantiles })
            .map_err(|e| CliError::Input(format!("{source}: {fips} {week} h{h}: {e}")))?;
    }
    Ok(set)
}
