//! MMWR epi-week arithmetic and daily-series smoothing.
//!
//! Epi-weeks run Sunday through Saturday. Week 1 of a year is the first
//! week that has at least four days in that year, i.e. the week containing
//! January 4th. A few years therefore have 53 weeks.

use std::fmt;

use chrono::{Datelike, Duration, NaiveDate, Weekday};

use crate::error::CalendarError;

const MIN_YEAR: i32 = 1900;
const MAX_YEAR: i32 = 2100;

/// One MMWR week. Ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EpiWeek {
    pub year: i32,
    pub week: u32,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl EpiWeek {
    /// The week following this one.
    pub fn next(&self) -> EpiWeek {
        self.offset(1)
    }

    pub fn prev(&self) -> EpiWeek {
        self.offset(-1)
    }

    /// Shift by a whole number of weeks. Panics only if the result leaves
    /// chrono's representable range, which no caller can reach from 1900–2100.
    pub fn offset(&self, weeks: i64) -> EpiWeek {
        let start = self.start + Duration::weeks(weeks);
        week_from_sunday(start)
    }

    /// Signed number of weeks from `self` to `other`.
    pub fn weeks_until(&self, other: &EpiWeek) -> i64 {
        (other.start - self.start).num_days() / 7
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        let start = self.start;
        (0..7).map(move |i| start + Duration::days(i))
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

impl fmt::Display for EpiWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

fn days_since_sunday(d: NaiveDate) -> i64 {
    i64::from(d.weekday().num_days_from_sunday())
}

/// Sunday that starts week 1 of `year`.
fn first_week_start(year: i32) -> NaiveDate {
    let jan4 = NaiveDate::from_ymd_opt(year, 1, 4).expect("January 4th exists");
    jan4 - Duration::days(days_since_sunday(jan4))
}

fn week_from_sunday(start: NaiveDate) -> EpiWeek {
    debug_assert_eq!(start.weekday(), Weekday::Sun);
    let mut year = start.year();
    if start >= first_week_start(year + 1) {
        year += 1;
    } else if start < first_week_start(year) {
        year -= 1;
    }
    let week = ((start - first_week_start(year)).num_days() / 7 + 1) as u32;
    EpiWeek {
        year,
        week,
        start,
        end: start + Duration::days(6),
    }
}

/// The epi-week containing `d`.
pub fn epiweek_of(d: NaiveDate) -> Result<EpiWeek, CalendarError> {
    if !(MIN_YEAR..=MAX_YEAR).contains(&d.year()) {
        return Err(CalendarError::OutOfRange(d));
    }
    Ok(week_from_sunday(d - Duration::days(days_since_sunday(d))))
}

/// Look up an epi-week by its (year, week) label.
pub fn epiweek_from_label(year: i32, week: u32) -> Result<EpiWeek, CalendarError> {
    if !(MIN_YEAR..=MAX_YEAR).contains(&year) || week == 0 {
        return Err(CalendarError::InvalidWeek { year, week });
    }
    let start = first_week_start(year) + Duration::weeks(i64::from(week) - 1);
    let w = week_from_sunday(start);
    if w.year != year {
        return Err(CalendarError::InvalidWeek { year, week });
    }
    Ok(w)
}

/// A contiguous run of daily values; `None` marks a missing day.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub start_date: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn new(start_date: NaiveDate, values: Vec<Option<f64>>) -> Self {
        Self { start_date, values }
    }

    /// A series with no missing days.
    pub fn dense(start_date: NaiveDate, values: &[f64]) -> Self {
        Self::new(start_date, values.iter().copied().map(Some).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_date(&self) -> Option<NaiveDate> {
        (!self.is_empty()).then(|| self.start_date + Duration::days(self.len() as i64 - 1))
    }

    pub fn get(&self, d: NaiveDate) -> Option<f64> {
        let idx = (d - self.start_date).num_days();
        if idx < 0 {
            return None;
        }
        self.values.get(idx as usize).copied().flatten()
    }

    /// The seven values of `w`, or a missing-data error naming the week.
    pub fn week_values(&self, w: &EpiWeek) -> Result<[f64; 7], CalendarError> {
        let mut out = [0.0; 7];
        for (slot, d) in out.iter_mut().zip(w.days()) {
            *slot = self.get(d).ok_or(CalendarError::MissingData { week: *w, date: d })?;
        }
        Ok(out)
    }
}

/// Trailing mean over `window` days. The first `window - 1` outputs are
/// missing, as is any output whose window touches a missing input.
pub fn rolling_average(s: &DailySeries, window: usize) -> Result<DailySeries, CalendarError> {
    if window == 0 {
        return Err(CalendarError::ZeroWindow);
    }
    let mut out = vec![None; s.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        if i + 1 < window {
            continue;
        }
        let span = &s.values[i + 1 - window..=i];
        if span.iter().all(Option::is_some) {
            let sum: f64 = span.iter().map(|v| v.unwrap()).sum();
            *slot = Some(sum / window as f64);
        }
    }
    Ok(DailySeries::new(s.start_date, out))
}

pub fn weekly_mean(s: &DailySeries, w: &EpiWeek) -> Result<f64, CalendarError> {
    let v = s.week_values(w)?;
    Ok(v.iter().sum::<f64>() / 7.0)
}

pub fn weekly_sum(s: &DailySeries, w: &EpiWeek) -> Result<f64, CalendarError> {
    Ok(s.week_values(w)?.iter().sum())
}

/// Least-squares slope of the week's values against day index 0..6.
pub fn weekly_slope(s: &DailySeries, w: &EpiWeek) -> Result<f64, CalendarError> {
    let v = s.week_values(w)?;
    Ok(ols_slope(&v))
}

fn ols_slope(y: &[f64; 7]) -> f64 {
    // x = 0..6, x̄ = 3, Σ(x-x̄)² = 28
    let mean_y = y.iter().sum::<f64>() / 7.0;
    let num: f64 = y
        .iter()
        .enumerate()
        .map(|(i, yi)| (i as f64 - 3.0) * (yi - mean_y))
        .sum();
    num / 28.0
}
