//! County-level incidence forecasting.
//!
//! The pipeline runs raw daily sources through [`ingest`] into a
//! [`ingest::CountyPanel`], derives weekly model features in [`features`],
//! trains LSTM ensembles from [`nn`] via [`forecaster`], and scores the
//! resulting forecasts with [`evaluation`].

pub mod calendar;
pub mod codec;
pub mod features;
pub mod error;
pub mod evaluation;
pub mod fips;
pub mod forecaster;
pub mod ingest;
pub mod nn;
pub mod synthetic;

pub use calendar::{epiweek_of, DailySeries, EpiWeek};
pub use fips::Fips;
