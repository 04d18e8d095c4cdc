//! Epoch preprocessing: band-pass filtering, exponential moving
//! standardization, integer decimation and channel selection.
//!
//! Every operation returns a new dataset with the same epoch count and labels.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::filter::butterworth_bandpass;
use crate::data::io::{EmsRecord, PreprocessingRecord};
use crate::data::SubjectDataset;
use crate::error::{Error, Result};

pub const BUTTERWORTH_ORDER: usize = 4;
pub const EMS_FACTOR_NEW: f64 = 0.001;
pub const EMS_INIT_BLOCK: usize = 1000;
pub const EMS_EPS: f64 = 1e-4;

/// Zero-phase Butterworth band-pass applied to every channel of every epoch.
pub fn bandpass(ds: &SubjectDataset, low_hz: f64, high_hz: f64) -> Result<SubjectDataset> {
    let filter = butterworth_bandpass(BUTTERWORTH_ORDER, low_hz, high_hz, ds.sample_rate_hz())?;
    ds.map_series(ds.times(), ds.sample_rate_hz(), |x| Ok(filter.filtfilt(x)))
}

/// Exponential moving standardization of one series.
///
/// Running mean `m_t = (1-λ) m_{t-1} + λ x_t` and variance
/// `v_t = (1-λ) v_{t-1} + λ (x_t - m_t)^2`, started from `m = x_0, v = 0`.
/// The first `init_block` samples are instead z-scored with the block's own
/// mean and (population) standard deviation.
pub fn ems_signal(x: &[f64], factor_new: f64, init_block: usize) -> Result<Vec<f64>> {
    if !(factor_new > 0.0 && factor_new < 1.0) {
        return Err(Error::InvalidFactor(factor_new));
    }
    if init_block == 0 {
        return Err(Error::BadConfig("init_block must be at least 1".into()));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let keep = 1.0 - factor_new;
    let mut m = x[0];
    let mut v = 0.0;
    let mut out: Vec<f64> = x
        .iter()
        .map(|&xt| {
            m = keep * m + factor_new * xt;
            let d = xt - m;
            v = keep * v + factor_new * d * d;
            d / v.sqrt().max(EMS_EPS)
        })
        .collect();
    let block = init_block.min(x.len());
    let n = block as f64;
    let mean = x[..block].iter().sum::<f64>() / n;
    let std = (x[..block].iter().map(|&xt| (xt - mean).powi(2)).sum::<f64>() / n).sqrt();
    for (o, &xt) in out[..block].iter_mut().zip(x) {
        *o = (xt - mean) / std.max(EMS_EPS);
    }
    Ok(out)
}

pub fn ems(ds: &SubjectDataset, factor_new: f64, init_block: usize) -> Result<SubjectDataset> {
    if !(factor_new > 0.0 && factor_new < 1.0) {
        return Err(Error::InvalidFactor(factor_new));
    }
    ds.map_series(ds.times(), ds.sample_rate_hz(), |x| ems_signal(x, factor_new, init_block))
}

fn decimation_factor(from_hz: f64, to_hz: f64) -> Result<usize> {
    let ratio = from_hz / to_hz;
    let r = ratio.round();
    if !(to_hz > 0.0 && ratio.is_finite() && r >= 1.0 && (ratio - r).abs() < 1e-9) {
        return Err(Error::NonIntegerFactor { from: from_hz, to: to_hz });
    }
    Ok(r as usize)
}

/// Keeps every `(from/to)`-th sample. Content above `to_hz / 2` must already
/// have been removed.
pub fn downsample(ds: &SubjectDataset, to_hz: f64) -> Result<SubjectDataset> {
    let factor = decimation_factor(ds.sample_rate_hz(), to_hz)?;
    let new_times = ds.times() / factor;
    if new_times == 0 {
        return Err(Error::InsufficientData("epoch shorter than one decimated sample".into()));
    }
    ds.map_series(new_times, to_hz, |x| Ok((0..new_times).map(|i| x[i * factor]).collect()))
}

/// Reorders and subsets channels; `names` labels the dataset's current channels.
pub fn select_channels(ds: &SubjectDataset, names: &[String], keep: &[String]) -> Result<SubjectDataset> {
    if names.len() != ds.channels() {
        return Err(Error::ShapeMismatch(format!("{} channel names for {} channels", names.len(), ds.channels())));
    }
    let mut seen = HashSet::new();
    let mut picks = Vec::with_capacity(keep.len());
    for name in keep {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateChannel(name.clone()));
        }
        let idx = names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownChannel(name.clone()))?;
        picks.push(idx);
    }
    if picks.is_empty() {
        return Err(Error::BadConfig("no channels selected".into()));
    }
    ds.with_channels(&picks)
}

/// Ingestion pipeline: channel selection, band-pass at the recording rate,
/// decimation, then moving standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub keep_channels: Option<Vec<String>>,
    pub band_hz: Option<[f64; 2]>,
    pub target_rate_hz: Option<f64>,
    pub ems_factor_new: Option<f64>,
    pub ems_init_block: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            keep_channels: None,
            band_hz: Some([4.0, 38.0]),
            target_rate_hz: None,
            ems_factor_new: Some(EMS_FACTOR_NEW),
            ems_init_block: Some(EMS_INIT_BLOCK),
        }
    }
}

pub fn preprocess(
    ds: &SubjectDataset,
    channel_names: &[String],
    cfg: &PreprocessConfig,
) -> Result<(SubjectDataset, PreprocessingRecord)> {
    let mut out = ds.clone();
    let mut channels = channel_names.to_vec();
    if let Some(keep) = &cfg.keep_channels {
        out = select_channels(&out, channel_names, keep)?;
        channels = keep.clone();
    }
    let original_rate = out.sample_rate_hz();
    if let Some([lo, hi]) = cfg.band_hz {
        out = bandpass(&out, lo, hi)?;
    }
    let mut resampled_from_hz = None;
    if let Some(to) = cfg.target_rate_hz {
        if (to - original_rate).abs() > 0.0 {
            out = downsample(&out, to)?;
            resampled_from_hz = Some(original_rate);
        }
    }
    let mut ems_record = None;
    if let Some(factor) = cfg.ems_factor_new {
        let block = cfg.ems_init_block.unwrap_or(EMS_INIT_BLOCK);
        out = ems(&out, factor, block)?;
        ems_record = Some(EmsRecord { factor_new: factor, init_block: block, eps: EMS_EPS });
    }
    let record = PreprocessingRecord {
        band_hz: cfg.band_hz,
        filter_order: cfg.band_hz.map(|_| BUTTERWORTH_ORDER),
        ems: ems_record,
        resampled_from_hz,
        channels,
    };
    Ok((out, record))
}
