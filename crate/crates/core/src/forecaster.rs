//! LSTM ensembles, median combination, quantile heads and the persistence
//! baseline.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calendar::EpiWeek;
use crate::codec::{Decoder, Encoder};
use crate::error::{ForecastError, NnError};
use crate::evaluation::{mae, GroundTruth};
use crate::features::{
    col, fit_normalizer, make_windows, FeatureTable, InferenceWindow, NormalizationStats, TrainingInstance,
    N_FEATURES,
};
use crate::fips::Fips;
use crate::nn::{mse_loss, pinball_loss_batch, Network, NetworkSpec, SequenceBatch, HUB_QUANTILES};

pub const QUANTILES: [f64; 7] = HUB_QUANTILES;

const ENSEMBLE_MAGIC: &[u8; 8] = b"CCENSMBL";
const ENSEMBLE_VERSION: u32 = 1;
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub lstm_units: Vec<usize>,
    pub dense_units: usize,
    /// 1 for a point head, 7 for the quantile head.
    pub output_dim: usize,
    pub lag: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub ensemble_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hybrid: bool,
    pub static_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: N_FEATURES,
            lstm_units: vec![64, 64],
            dense_units: 32,
            output_dim: 1,
            lag: 9,
            horizon: 1,
            epochs: 15,
            learning_rate: 0.001,
            ensemble_size: 10,
            batch_size: 32,
            seed: 0,
            hybrid: false,
            static_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.output_dim != 1 && self.output_dim != QUANTILES.len() {
            return bad(format!("output_dim must be 1 or {}, got {}", QUANTILES.len(), self.output_dim));
        }
        if self.input_channels == 0
            || self.lstm_units.is_empty()
            || self.lstm_units.contains(&0)
            || self.dense_units == 0
            || self.epochs == 0
            || self.ensemble_size == 0
            || self.batch_size == 0
        {
            return bad(format!("all layer sizes and counts must be positive: {self:?}"));
        }
        if !(1..=4).contains(&self.horizon) {
            return bad(format!("horizon {} outside 1..=4", self.horizon));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.hybrid != (self.static_dim > 0) {
            return bad(format!(
                "hybrid={} requires static_dim > 0 exactly when set (static_dim={})",
                self.hybrid, self.static_dim
            ));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.input_channels,
            lstm_units: self.lstm_units.clone(),
            dense_units: self.dense_units,
            output_dim: self.output_dim,
            static_dim: self.static_dim,
        }
    }

    pub fn is_quantile(&self) -> bool {
        self.output_dim == QUANTILES.len()
    }
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Network, ForecastError> {
    config.validate()?;
    Ok(Network::new(config.network_spec(), &mut ChaCha8Rng::seed_from_u64(seed))?)
}

/// Normalized, flattened training windows.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub n: usize,
    pub steps: usize,
    pub dim: usize,
    pub x: Vec<f64>,
    pub statics: Option<Vec<f64>>,
    pub static_dim: usize,
    pub y: Vec<f64>,
}

impl TrainingData {
    pub fn prepare(
        instances: &[TrainingInstance],
        stats: &NormalizationStats,
        config: &ModelConfig,
    ) -> Result<Self, ForecastError> {
        if instances.is_empty() {
            return Err(ForecastError::NoInstances);
        }
        let steps = config.lag + 1;
        let mut x = Vec::with_capacity(instances.len() * steps * N_FEATURES);
        let mut statics = config.hybrid.then(Vec::new);
        let mut y = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.window.len() != steps {
                return Err(ForecastError::Config(format!(
                    "window of {} weeks for lag {}",
                    inst.window.len(),
                    config.lag
                )));
            }
            for row in stats.apply(&inst.window) {
                x.extend_from_slice(&row);
            }
            if let Some(buf) = statics.as_mut() {
                let s = inst.statics.as_deref().ok_or_else(|| {
                    ForecastError::Config(format!("hybrid model needs static attributes for county {}", inst.county))
                })?;
                buf.extend(stats.apply_statics(s)?);
            }
            y.push(stats.normalize_target(inst.target));
        }
        Ok(Self {
            n: instances.len(),
            steps,
            dim: N_FEATURES,
            x,
            statics,
            static_dim: config.static_dim,
            y,
        })
    }

    fn batch(&self, idx: &[usize]) -> (SequenceBatch, Vec<f64>) {
        let w = self.steps * self.dim;
        let mut data = Vec::with_capacity(idx.len() * w);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x[i * w..(i + 1) * w]);
            y.push(self.y[i]);
        }
        let mut b = SequenceBatch::new(idx.len(), self.steps, self.dim, data).expect("consistent widths");
        if let Some(st) = &self.statics {
            let s = self.static_dim;
            b = b.with_statics(idx.iter().flat_map(|&i| st[i * s..(i + 1) * s].iter().copied()).collect());
        }
        (b, y)
    }
}

fn batch_loss(output_dim: usize, out: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>), NnError> {
    if output_dim == 1 {
        mse_loss(out, y)
    } else {
        pinball_loss_batch(out, y, &QUANTILES)
    }
}

/// Mean per-instance loss over the whole set.
pub fn full_loss(net: &Network, data: &TrainingData) -> Result<f64, NnError> {
    let idx: Vec<usize> = (0..data.n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(PREDICT_CHUNK) {
        let (b, y) = data.batch(chunk);
        let out = net.predict(&b)?;
        total += batch_loss(net.spec.output_dim, &out, &y)?.0 * chunk.len() as f64;
    }
    Ok(total / data.n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub network: Network,
    pub seed: u64,
    /// 1-based epoch of the kept checkpoint.
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch Adam for `config.epochs` epochs; keeps the checkpoint with the
/// lowest full-set loss (earliest on ties).
pub fn train_member(data: &TrainingData, config: &ModelConfig, seed: u64) -> Result<Member, ForecastError> {
    config.validate()?;
    if data.n == 0 {
        return Err(ForecastError::NoInstances);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(config.network_spec(), &mut rng)?;
    let mut adam = net.adam_state();
    let diverged = |epoch: usize| move |e: NnError| match e {
        NnError::NonFinite(_) => ForecastError::Diverged { epoch, seed },
        other => ForecastError::Nn(other),
    };
    let initial_loss = full_loss(&net, data).map_err(diverged(0))?;
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (b, y) = data.batch(chunk);
            let (out, mut tape) = net.forward(&b).map_err(diverged(epoch))?;
            let (_, g) = batch_loss(config.output_dim, &out, &y).map_err(diverged(epoch))?;
            let grads = net.backward(&mut tape, &g).map_err(diverged(epoch))?;
            net.apply_adam(&grads, &mut adam, config.learning_rate).map_err(diverged(epoch))?;
        }
        let loss = full_loss(&net, data).map_err(diverged(epoch))?;
        if !loss.is_finite() {
            return Err(ForecastError::Diverged { epoch, seed });
        }
        log::debug!("member seed {seed}: epoch {epoch} loss {loss:.6}");
        epoch_losses.push(loss);
        if best.as_ref().is_none_or(|(l, _, _)| loss < *l) {
            best = Some((loss, epoch, net.clone()));
        }
    }
    let (_, best_epoch, network) = best.expect("at least one epoch");
    Ok(Member { network, seed, best_epoch, initial_loss, epoch_losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub config: ModelConfig,
    pub stats: NormalizationStats,
}

/// Drops statics for non-hybrid models and checks widths for hybrid ones.
fn conform_statics(instances: &[TrainingInstance], config: &ModelConfig) -> Result<Vec<TrainingInstance>, ForecastError> {
    instances
        .iter()
        .map(|i| {
            let mut i = i.clone();
            if !config.hybrid {
                i.statics = None;
            } else {
                match &i.statics {
                    Some(s) if s.len() == config.static_dim => {}
                    other => {
                        return Err(ForecastError::Config(format!(
                            "county {} has {} static attributes, model expects {}",
                            i.county,
                            other.as_ref().map_or(0, Vec::len),
                            config.static_dim
                        )))
                    }
                }
            }
            Ok(i)
        })
        .collect()
}

/// Members are trained concurrently with seeds `seed + k`.
pub fn train_ensemble(instances: &[TrainingInstance], config: &ModelConfig) -> Result<Ensemble, ForecastError> {
    config.validate()?;
    if instances.is_empty() {
        return Err(ForecastError::NoInstances);
    }
    let instances = conform_statics(instances, config)?;
    let stats = fit_normalizer(&instances)?;
    let data = TrainingData::prepare(&instances, &stats, config)?;
    let members = (0..config.ensemble_size as u64)
        .into_par_iter()
        .map(|k| train_member(&data, config, config.seed + k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Ensemble { members, config: config.clone(), stats })
}

/// Median; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median across members, clamped at zero.
pub fn combine_point(member_outputs: &[f64]) -> f64 {
    median(member_outputs).max(0.0)
}

/// Per-quantile median across members, sorted to remove crossings, clamped
/// at zero.
pub fn combine_quantiles(member_outputs: &[Vec<f64>]) -> Result<[f64; 7], ForecastError> {
    if member_outputs.is_empty() || member_outputs.iter().any(|m| m.len() != QUANTILES.len()) {
        return Err(ForecastError::Nn(NnError::Shape(format!(
            "expected {} quantile outputs from each of {} members",
            QUANTILES.len(),
            member_outputs.len()
        ))));
    }
    let mut q: [f64; 7] = std::array::from_fn(|j| {
        let col: Vec<f64> = member_outputs.iter().map(|m| m[j]).collect();
        median(&col)
    });
    q.sort_by(f64::total_cmp);
    for v in &mut q {
        *v = v.max(0.0);
    }
    Ok(q)
}

impl Ensemble {
    /// Denormalized outputs indexed `[window][member][output]`.
    pub fn member_outputs(&self, windows: &[&InferenceWindow]) -> Result<Vec<Vec<Vec<f64>>>, ForecastError> {
        let cfg = &self.config;
        let steps = cfg.lag + 1;
        let mut x = Vec::with_capacity(windows.len() * steps * N_FEATURES);
        let mut statics = cfg.hybrid.then(Vec::new);
        for w in windows {
            if w.window.len() != steps {
                return Err(ForecastError::Nn(NnError::Shape(format!(
                    "county {} window has {} weeks, model expects {steps}",
                    w.county,
                    w.window.len()
                ))));
            }
            for row in self.stats.apply(&w.window) {
                x.extend_from_slice(&row);
            }
            if let Some(buf) = statics.as_mut() {
                let s = w.statics.as_deref().ok_or_else(|| {
                    ForecastError::Config(format!("hybrid model needs static attributes for county {}", w.county))
                })?;
                buf.extend(self.stats.apply_statics(s)?);
            }
        }
        let data = TrainingData {
            n: windows.len(),
            steps,
            dim: N_FEATURES,
            x,
            statics,
            static_dim: cfg.static_dim,
            y: vec![0.0; windows.len()],
        };
        let per_member: Vec<Vec<f64>> = self
            .members
            .par_iter()
            .map(|m| {
                let idx: Vec<usize> = (0..data.n).collect();
                let mut out = Vec::with_capacity(data.n * cfg.output_dim);
                for chunk in idx.chunks(PREDICT_CHUNK) {
                    out.extend(m.network.predict(&data.batch(chunk).0)?);
                }
                Ok(out)
            })
            .collect::<Result<_, NnError>>()?;
        let o = cfg.output_dim;
        Ok((0..windows.len())
            .map(|i| {
                per_member
                    .iter()
                    .map(|out| out[i * o..(i + 1) * o].iter().map(|z| self.stats.denormalize_target(*z)).collect())
                    .collect()
            })
            .collect())
    }

    pub fn predict_point(&self, windows: &BTreeMap<Fips, InferenceWindow>) -> Result<BTreeMap<Fips, f64>, ForecastError> {
        if self.config.output_dim != 1 {
            return Err(ForecastError::Config("point prediction needs a point-head ensemble".into()));
        }
        let ws: Vec<&InferenceWindow> = windows.values().collect();
        let outs = self.member_outputs(&ws)?;
        Ok(ws
            .iter()
            .zip(outs)
            .map(|(w, o)| (w.county, combine_point(&o.iter().map(|m| m[0]).collect::<Vec<_>>())))
            .collect())
    }

    pub fn predict_quantiles(
        &self,
        windows: &BTreeMap<Fips, InferenceWindow>,
    ) -> Result<BTreeMap<Fips, [f64; 7]>, ForecastError> {
        if !self.config.is_quantile() {
            return Err(ForecastError::Config("quantile prediction needs a quantile-head ensemble".into()));
        }
        let ws: Vec<&InferenceWindow> = windows.values().collect();
        let outs = self.member_outputs(&ws)?;
        ws.iter().zip(outs).map(|(w, o)| Ok((w.county, combine_quantiles(&o)?))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        encode_config(&mut e, &self.config);
        let s = &self.stats;
        e.f64s(&s.feature_mean);
        e.f64s(&s.feature_sd);
        e.f64(s.target_mean);
        e.f64(s.target_sd);
        e.f64s(&s.static_mean);
        e.f64s(&s.static_sd);
        e.len(self.members.len());
        for m in &self.members {
            e.u64(m.seed);
            e.len(m.best_epoch);
            e.f64(m.initial_loss);
            e.f64s(&m.epoch_losses);
            m.network.encode(&mut e);
        }
        e.finish(ENSEMBLE_MAGIC, ENSEMBLE_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForecastError> {
        let snap = |e: crate::codec::ContainerError| ForecastError::Snapshot(e.to_string());
        let mut d = Decoder::open(bytes, ENSEMBLE_MAGIC, ENSEMBLE_VERSION).map_err(snap)?;
        let config = decode_config(&mut d).map_err(snap)?;
        config.validate().map_err(|e| ForecastError::Snapshot(e.to_string()))?;
        let arr = |v: Vec<f64>| -> Result<[f64; N_FEATURES], ForecastError> {
            v.try_into().map_err(|_| ForecastError::Snapshot("normalizer width".into()))
        };
        let stats = NormalizationStats {
            feature_mean: arr(d.f64s().map_err(snap)?)?,
            feature_sd: arr(d.f64s().map_err(snap)?)?,
            target_mean: d.f64().map_err(snap)?,
            target_sd: d.f64().map_err(snap)?,
            static_mean: d.f64s().map_err(snap)?,
            static_sd: d.f64s().map_err(snap)?,
        };
        let n = d.read_len().map_err(snap)?;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let seed = d.u64().map_err(snap)?;
            let best_epoch = d.read_len().map_err(snap)?;
            let initial_loss = d.f64().map_err(snap)?;
            let epoch_losses = d.f64s().map_err(snap)?;
            let network = Network::decode(&mut d).map_err(|e| ForecastError::Snapshot(e.to_string()))?;
            if network.spec != config.network_spec() {
                return Err(ForecastError::Snapshot("member architecture differs from config".into()));
            }
            members.push(Member { network, seed, best_epoch, initial_loss, epoch_losses });
        }
        d.finish().map_err(snap)?;
        if members.len() != config.ensemble_size {
            return Err(ForecastError::Snapshot(format!(
                "{} members for ensemble size {}",
                members.len(),
                config.ensemble_size
            )));
        }
        Ok(Ensemble { members, config, stats })
    }
}

fn encode_config(e: &mut Encoder, c: &ModelConfig) {
    e.len(c.input_channels);
    e.len(c.lstm_units.len());
    for &u in &c.lstm_units {
        e.len(u);
    }
    for v in [c.dense_units, c.output_dim, c.lag, c.horizon, c.epochs] {
        e.len(v);
    }
    e.f64(c.learning_rate);
    e.len(c.ensemble_size);
    e.len(c.batch_size);
    e.u64(c.seed);
    e.u8(c.hybrid as u8);
    e.len(c.static_dim);
}

fn decode_config(d: &mut Decoder<'_>) -> Result<ModelConfig, crate::codec::ContainerError> {
    let input_channels = d.read_len()?;
    let n = d.read_len()?;
    let lstm_units = (0..n).map(|_| d.read_len()).collect::<Result<_, _>>()?;
    Ok(ModelConfig {
        input_channels,
        lstm_units,
        dense_units: d.read_len()?,
        output_dim: d.read_len()?,
        lag: d.read_len()?,
        horizon: d.read_len()?,
        epochs: d.read_len()?,
        learning_rate: d.f64()?,
        ensemble_size: d.read_len()?,
        batch_size: d.read_len()?,
        seed: d.u64()?,
        hybrid: d.u8()? != 0,
        static_dim: d.read_len()?,
    })
}

// ---------------------------------------------------------------------------
// Forecast sets

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastEntry {
    pub point: f64,
    pub quantiles: Option<[f64; 7]>,
}

impl ForecastEntry {
    pub fn point(point: f64) -> Self {
        Self { point, quantiles: None }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.point.is_finite() && self.point >= 0.0) {
            return Err(format!("point forecast {} is not a finite non-negative value", self.point));
        }
        if let Some(q) = &self.quantiles {
            if q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(format!("quantiles {q:?} contain negative or non-finite values"));
            }
            if q.windows(2).any(|w| w[0] > w[1]) {
                return Err(format!("quantiles {q:?} are not sorted"));
            }
        }
        Ok(())
    }
}

/// Forecasts keyed by (forecast week, county, horizon).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastSet {
    entries: BTreeMap<(EpiWeek, Fips, usize), ForecastEntry>,
}

impl ForecastSet {
    pub fn insert(&mut self, week: EpiWeek, fips: Fips, horizon: usize, entry: ForecastEntry) -> Result<(), ForecastError> {
        entry
            .validate()
            .map_err(|m| ForecastError::Config(format!("forecast for {fips} at {week} h={horizon}: {m}")))?;
        self.entries.insert((week, fips, horizon), entry);
        Ok(())
    }

    pub fn get(&self, week: EpiWeek, fips: Fips, horizon: usize) -> Option<&ForecastEntry> {
        self.entries.get(&(week, fips, horizon))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(EpiWeek, Fips, usize), &ForecastEntry)> {
        self.entries.iter()
    }

    /// Entries for one forecast week and horizon, by county.
    pub fn at(&self, week: EpiWeek, horizon: usize) -> impl Iterator<Item = (Fips, &ForecastEntry)> + '_ {
        self.entries
            .range((week, Fips(0), 0)..=(week, Fips(u32::MAX), usize::MAX))
            .filter(move |((_, _, h), _)| *h == horizon)
            .map(|((_, f, _), e)| (*f, e))
    }

    pub fn forecast_weeks(&self) -> Vec<EpiWeek> {
        let set: BTreeSet<EpiWeek> = self.entries.keys().map(|k| k.0).collect();
        set.into_iter().collect()
    }

    pub fn horizons(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.entries.keys().map(|k| k.2).collect();
        set.into_iter().collect()
    }

    /// Distinct (forecast week, horizon) pairs.
    pub fn cells(&self) -> Vec<(EpiWeek, usize)> {
        let set: BTreeSet<(EpiWeek, usize)> = self.entries.keys().map(|k| (k.0, k.2)).collect();
        set.into_iter().collect()
    }

    pub fn merge(&mut self, other: ForecastSet) -> Result<(), ForecastError> {
        for ((w, f, h), e) in other.entries {
            self.insert(w, f, h, e)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.entries.values().try_for_each(ForecastEntry::validate)
    }
}

// ---------------------------------------------------------------------------
// Persistence baseline

/// Weekly incidence lookup shared by feature tables and truth stores.
pub trait IncidenceSource {
    fn current_incidence(&self, fips: Fips, week: EpiWeek) -> Option<f64>;
    fn county_list(&self) -> Vec<Fips>;
}

impl IncidenceSource for FeatureTable {
    fn current_incidence(&self, fips: Fips, week: EpiWeek) -> Option<f64> {
        self.get(fips, &week).map(|r| r[col::INCIDENCE])
    }

    fn county_list(&self) -> Vec<Fips> {
        self.counties().collect()
    }
}

/// Every horizon repeats the incidence of week `as_of`; all quantiles equal
/// the point value.
pub fn persistence_baseline<S: IncidenceSource + ?Sized>(
    source: &S,
    as_of: EpiWeek,
    horizons: &[usize],
) -> Result<ForecastSet, ForecastError> {
    let mut out = ForecastSet::default();
    for fips in source.county_list() {
        let v = source
            .current_incidence(fips, as_of)
            .ok_or(ForecastError::MissingCurrent { fips, week: as_of })?;
        let v = v.max(0.0);
        for &h in horizons {
            out.insert(as_of, fips, h, ForecastEntry { point: v, quantiles: Some([v; 7]) })?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// End-to-end forecasting

/// Ensembles trained for one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonModels {
    pub horizon: usize,
    pub point: Ensemble,
    pub quantile: Option<Ensemble>,
}

/// Trains point (and optionally quantile) ensembles per horizon on data up
/// to `as_of`.
pub fn train_models(
    table: &FeatureTable,
    base: &ModelConfig,
    as_of: EpiWeek,
    horizons: &[usize],
    quantiles: bool,
) -> Result<Vec<HorizonModels>, ForecastError> {
    horizons
        .iter()
        .map(|&h| {
            let (instances, _) = make_windows(table, base.lag, h, as_of)?;
            if instances.is_empty() {
                return Err(ForecastError::NoInstances);
            }
            let mut cfg = ModelConfig { horizon: h, output_dim: 1, ..base.clone() };
            let point = train_ensemble(&instances, &cfg)?;
            let quantile = if quantiles {
                cfg.output_dim = QUANTILES.len();
                Some(train_ensemble(&instances, &cfg)?)
            } else {
                None
            };
            log::info!("trained horizon {h} on {} instances as of {as_of}", instances.len());
            Ok(HorizonModels { horizon: h, point, quantile })
        })
        .collect()
}

/// Forecasts for every county with a complete window ending at `as_of`.
pub fn forecast_with(models: &[HorizonModels], table: &FeatureTable, as_of: EpiWeek) -> Result<ForecastSet, ForecastError> {
    let mut out = ForecastSet::default();
    for m in models {
        let (_, mut windows) = make_windows(table, m.point.config.lag, m.horizon, as_of)?;
        if m.point.config.hybrid {
            windows.retain(|f, w| {
                let ok = w.statics.is_some();
                if !ok {
                    log::warn!("county {f} has no static attributes; skipped by the hybrid model");
                }
                ok
            });
        }
        let points = m.point.predict_point(&windows)?;
        let qs = match &m.quantile {
            Some(e) => Some(e.predict_quantiles(&windows)?),
            None => None,
        };
        for (fips, p) in points {
            let quantiles = qs.as_ref().and_then(|q| q.get(&fips).copied());
            out.insert(as_of, fips, m.horizon, ForecastEntry { point: p, quantiles })?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainPolicy {
    /// Train at the first forecast week and roll inference forward.
    Once,
    /// Retrain at every forecast week.
    EachWeek,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagSweepRow {
    pub lag: usize,
    /// Mean over horizons of the period-average MAE.
    pub avg_mae: f64,
    pub horizon_mae: Vec<(usize, f64)>,
}

/// Point forecasts over `forecast_weeks` for all horizons.
pub fn rolling_forecasts(
    table: &FeatureTable,
    base: &ModelConfig,
    forecast_weeks: &[EpiWeek],
    horizons: &[usize],
    policy: RetrainPolicy,
    quantiles: bool,
) -> Result<ForecastSet, ForecastError> {
    let mut out = ForecastSet::default();
    let mut models: Option<Vec<HorizonModels>> = None;
    for &week in forecast_weeks {
        if policy == RetrainPolicy::EachWeek || models.is_none() {
            models = Some(train_models(table, base, week, horizons, quantiles)?);
        }
        out.merge(forecast_with(models.as_deref().unwrap_or_default(), table, week)?)?;
    }
    Ok(out)
}

/// Retrains and scores one model per lag. Lags without enough history are
/// skipped with a warning.
pub fn lag_sweep(
    table: &FeatureTable,
    truth: &GroundTruth,
    lags: &[usize],
    base: &ModelConfig,
    forecast_weeks: &[EpiWeek],
    horizons: &[usize],
    policy: RetrainPolicy,
) -> Result<Vec<LagSweepRow>, ForecastError> {
    let first = *forecast_weeks
        .iter()
        .min()
        .ok_or_else(|| ForecastError::Config("lag sweep needs at least one forecast week".into()))?;
    let mut rows = Vec::new();
    for &lag in lags {
        let cfg = ModelConfig { lag, ..base.clone() };
        let enough = horizons.iter().all(|&h| {
            make_windows(table, lag, h, first).is_ok_and(|(inst, w)| inst.len() >= 2 && !w.is_empty())
        });
        if !enough {
            log::warn!("lag {lag}: not enough history before {first}; skipped");
            continue;
        }
        let fs = rolling_forecasts(table, &cfg, forecast_weeks, horizons, policy, false)?;
        let mut horizon_mae = Vec::new();
        for &h in horizons {
            let weekly = forecast_weeks
                .iter()
                .map(|&w| mae(&fs, truth, w, h))
                .collect::<Result<Vec<_>, _>>()?;
            horizon_mae.push((h, weekly.iter().sum::<f64>() / weekly.len() as f64));
        }
        let avg_mae = horizon_mae.iter().map(|(_, m)| m).sum::<f64>() / horizon_mae.len() as f64;
        rows.push(LagSweepRow { lag, avg_mae, horizon_mae });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::epiweek_of;
    use crate::features::FeatureRow;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;

    fn week0() -> EpiWeek {
        epiweek_of(NaiveDate::from_ymd_opt(2020, 6, 6).unwrap()).unwrap()
    }

    fn tiny(output_dim: usize) -> ModelConfig {
        ModelConfig {
            lstm_units: vec![6],
            dense_units: 4,
            output_dim,
            lag: 3,
            epochs: 4,
            ensemble_size: 2,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 7,
            ..Default::default()
        }
    }

    /// Instances whose target is a linear function of the last window row.
    fn linear_teacher(n: usize, lag: usize, seed: u64) -> Vec<TrainingInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let window: Vec<FeatureRow> =
                    (0..=lag).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
                let last = window[lag];
                let target = 50.0 + 10.0 * last[0] - 5.0 * last[1] + 3.0 * last[2];
                TrainingInstance {
                    county: Fips(1000 + (i % 20) as u32),
                    anchor_week: week0(),
                    window,
                    target,
                    horizon: 1,
                    statics: None,
                }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        assert!(ModelConfig { output_dim: 3, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { horizon: 5, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { hybrid: true, ..Default::default() }.validate().is_err());
        ModelConfig { hybrid: true, static_dim: 8, ..Default::default() }.validate().unwrap();
    }

    #[test]
    fn model_shapes() {
        let net = build_model(&ModelConfig::default(), 1).unwrap();
        let oracle = 4 * 64 * (10 + 64 + 1) + 4 * 64 * (64 + 64 + 1) + 32 * (64 + 1) + (32 + 1);
        assert_eq!(net.param_count(), oracle);
        let q = build_model(&ModelConfig { output_dim: 7, ..Default::default() }, 1).unwrap();
        assert_eq!(q.head.output(), 7);
        let h = build_model(&ModelConfig { hybrid: true, static_dim: 8, ..Default::default() }, 1).unwrap();
        assert_eq!(h.dense.input(), 72);
    }

    #[test]
    fn median_rules() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(median(&v), 5.5);
        assert_eq!(combine_point(&[-3.0; 10]), 0.0);
        let mut outlier = v.clone();
        outlier[9] = 1e6;
        assert_eq!(median(&outlier), 5.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn quantile_repair() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 6.0, 5.0, 7.0];
        assert_eq!(combine_quantiles(&[v.clone(), v.clone()]).unwrap(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let neg = vec![-2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(combine_quantiles(&[neg]).unwrap(), [0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(combine_quantiles(&[vec![1.0; 3]]).is_err());
    }

    #[test]
    fn training_is_deterministic_and_converges() {
        let inst = linear_teacher(200, 3, 1);
        let cfg = ModelConfig { epochs: 15, ensemble_size: 1, ..tiny(1) };
        let a = train_ensemble(&inst, &cfg).unwrap();
        let b = train_ensemble(&inst, &cfg).unwrap();
        assert_eq!(a, b);
        let m = &a.members[0];
        let best = m.epoch_losses[m.best_epoch - 1];
        assert!(best < 0.1 * m.initial_loss, "{} vs {}", best, m.initial_loss);
        assert_eq!(best, m.epoch_losses.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn single_epoch_returns_first_checkpoint() {
        let inst = linear_teacher(40, 3, 2);
        let e = train_ensemble(&inst, &ModelConfig { epochs: 1, ensemble_size: 1, ..tiny(1) }).unwrap();
        assert_eq!(e.members[0].best_epoch, 1);
        assert_eq!(e.members[0].epoch_losses.len(), 1);
    }

    #[test]
    fn members_are_independent_of_schedule() {
        let inst = linear_teacher(60, 3, 3);
        let cfg = ModelConfig { ensemble_size: 3, ..tiny(1) };
        let e = train_ensemble(&inst, &cfg).unwrap();
        let stats = fit_normalizer(&inst).unwrap();
        let data = TrainingData::prepare(&inst, &stats, &cfg).unwrap();
        for (k, m) in e.members.iter().enumerate().rev() {
            let solo = train_member(&data, &cfg, cfg.seed + k as u64).unwrap();
            assert_eq!(&solo, m);
        }
        assert_ne!(e.members[0].network, e.members[1].network);
    }

    #[test]
    fn single_member_ensemble_predicts_member_output() {
        let inst = linear_teacher(60, 3, 4);
        let e = train_ensemble(&inst, &ModelConfig { ensemble_size: 1, ..tiny(1) }).unwrap();
        let windows: BTreeMap<Fips, InferenceWindow> = inst[..5]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (Fips(i as u32 + 1), InferenceWindow {
                    county: Fips(i as u32 + 1),
                    anchor_week: week0(),
                    window: t.window.clone(),
                    statics: None,
                })
            })
            .collect();
        let pts = e.predict_point(&windows).unwrap();
        for (f, w) in &windows {
            let data = TrainingData::prepare(
                &[TrainingInstance { county: *f, anchor_week: week0(), window: w.window.clone(), target: 0.0, horizon: 1, statics: None }],
                &e.stats,
                &e.config,
            )
            .unwrap();
            let z = e.members[0].network.predict(&data.batch(&[0]).0).unwrap()[0];
            assert_eq!(pts[f], e.stats.denormalize_target(z).max(0.0));
        }
    }

    #[test]
    fn ensemble_snapshot_round_trip() {
        let inst = linear_teacher(40, 3, 5);
        let e = train_ensemble(&inst, &ModelConfig { epochs: 2, ..tiny(7) }).unwrap();
        let bytes = e.to_bytes();
        let back = Ensemble::from_bytes(&bytes).unwrap();
        assert_eq!(back, e);
        let mut bad = bytes.clone();
        bad[20] ^= 0xff;
        assert!(Ensemble::from_bytes(&bad).is_err());
    }

    struct Fixed(BTreeMap<Fips, f64>);

    impl IncidenceSource for Fixed {
        fn current_incidence(&self, fips: Fips, _: EpiWeek) -> Option<f64> {
            self.0.get(&fips).copied()
        }
        fn county_list(&self) -> Vec<Fips> {
            self.0.keys().copied().collect()
        }
    }

    #[test]
    fn persistence_repeats_current_week() {
        let src = Fixed([(Fips(1), 100.0), (Fips(2), 0.0)].into());
        let fs = persistence_baseline(&src, week0(), &[1, 2, 3, 4]).unwrap();
        assert_eq!(fs.len(), 8);
        for h in 1..=4 {
            assert_eq!(fs.get(week0(), Fips(1), h).unwrap().point, 100.0);
            assert_eq!(fs.get(week0(), Fips(1), h).unwrap().quantiles, Some([100.0; 7]));
            assert_eq!(fs.get(week0(), Fips(2), h).unwrap().point, 0.0);
            let national: f64 = fs.at(week0(), h).map(|(_, e)| e.point).sum();
            assert_eq!(national, 100.0);
        }
    }

    #[test]
    fn persistence_missing_week_errors() {
        struct Gappy;
        impl IncidenceSource for Gappy {
            fn current_incidence(&self, _: Fips, _: EpiWeek) -> Option<f64> {
                None
            }
            fn county_list(&self) -> Vec<Fips> {
                vec![Fips(42)]
            }
        }
        assert!(matches!(
            persistence_baseline(&Gappy, week0(), &[1]),
            Err(ForecastError::MissingCurrent { fips: Fips(42), .. })
        ));
    }

    #[test]
    fn forecast_set_rejects_bad_entries() {
        let mut fs = ForecastSet::default();
        assert!(fs.insert(week0(), Fips(1), 1, ForecastEntry::point(-1.0)).is_err());
        let crossed = ForecastEntry { point: 1.0, quantiles: Some([0.0, 2.0, 1.0, 3.0, 4.0, 5.0, 6.0]) };
        assert!(fs.insert(week0(), Fips(1), 1, crossed).is_err());
        assert!(fs.is_empty());
    }

    proptest! {
        #[test]
        fn median_permutation_invariant(mut v in proptest::collection::vec(-1e6f64..1e6, 1..12), seed in any::<u64>()) {
            let m = median(&v);
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(median(&v), m);
        }

        #[test]
        fn combined_outputs_are_valid(
            members in proptest::collection::vec(proptest::collection::vec(-1e4f64..1e4, 7), 1..11)
        ) {
            let q = combine_quantiles(&members).unwrap();
            let p = combine_point(&members.iter().map(|m| m[3]).collect::<Vec<_>>());
            let e = ForecastEntry { point: p, quantiles: Some(q) };
            prop_assert!(e.validate().is_ok());
        }
    }
}
