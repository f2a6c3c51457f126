//! Signal conditioning applied to every recording before chunking:
//! notch → bandpass → linear detrend → channel-wise normalization → resample.

pub mod iir;
mod resample;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Recording;
use crate::error::{Error, Result};

pub use resample::{rational_ratio, resample_poly};

/// Stage names in application order.
pub const PIPELINE_STAGES: [&str; 5] = ["notch", "bandpass", "detrend", "normalize", "resample"];

/// SHA-256 over the stage names joined by `>`; changes whenever the stage
/// order does.
pub fn pipeline_fingerprint() -> String {
    hex::encode(Sha256::digest(PIPELINE_STAGES.join(">").as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub band: (f64, f64),
    pub target_fs: f64,
    pub highpass_order: usize,
    pub lowpass_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            notch_hz: 60.0,
            notch_q: 30.0,
            band: (0.5, 50.0),
            target_fs: 250.0,
            highpass_order: 4,
            lowpass_order: 10,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.band;
        if !(lo > 0.0 && lo < hi && hi < self.target_fs / 2.0) {
            return Err(Error::param(format!(
                "band ({lo}, {hi}) must satisfy 0 < low < high < {}",
                self.target_fs / 2.0
            )));
        }
        if !(self.notch_q > 0.0 && self.notch_hz > 0.0) {
            return Err(Error::param("notch frequency and quality factor must be positive"));
        }
        for order in [self.highpass_order, self.lowpass_order] {
            if order == 0 || order % 2 != 0 {
                return Err(Error::param(format!("filter order must be even and positive, got {order}")));
            }
        }
        Ok(())
    }
}

/// Applies `f` to every channel in `f64` and stores the result back as `f32`.
fn map_channels(
    rec: &Recording,
    fs_out: f64,
    mut f: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<Recording> {
    let mut rows = Vec::with_capacity(rec.n_channels());
    for (c, row) in rec.data.rows().into_iter().enumerate() {
        let x: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        rows.push(f(c, &x)?);
    }
    let n_out = rows.first().map_or_else(
        || {
            let (up, down) = rational_ratio(rec.fs, fs_out);
            ((rec.n_samples() * up) as f64 / down as f64).round() as usize
        },
        Vec::len,
    );
    let mut data = Array2::<f32>::zeros((rec.n_channels(), n_out));
    for (c, row) in rows.iter().enumerate() {
        for (dst, &v) in data.row_mut(c).iter_mut().zip(row) {
            *dst = v as f32;
        }
    }
    Ok(rec.with_data(data, fs_out))
}

pub fn notch(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    if !(rec.fs > 2.0 * cfg.notch_hz) {
        return Err(Error::param(format!(
            "sampling rate {} Hz cannot carry a {} Hz notch",
            rec.fs, cfg.notch_hz
        )));
    }
    let sos = [iir::notch(cfg.notch_hz, cfg.notch_q, rec.fs)];
    map_channels(rec, rec.fs, |_, x| Ok(iir::sosfiltfilt(&sos, x)))
}

pub fn bandpass(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    let (lo, hi) = cfg.band;
    if !(lo > 0.0 && lo < hi && hi < rec.fs / 2.0) {
        return Err(Error::param(format!(
            "band ({lo}, {hi}) is invalid for {} Hz",
            rec.fs
        )));
    }
    let mut sos = iir::butter_highpass(cfg.highpass_order, lo, rec.fs);
    sos.extend(iir::butter_lowpass(cfg.lowpass_order, hi, rec.fs));
    map_channels(rec, rec.fs, |_, x| Ok(iir::sosfiltfilt(&sos, x)))
}

/// Removes the least-squares line `a + b·t` from `x`.
pub fn detrend_slice(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &v) in x.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(t, &v)| v - x_mean - slope * (t as f64 - t_mean))
        .collect()
}

pub fn detrend_linear(rec: &Recording) -> Result<Recording> {
    map_channels(rec, rec.fs, |_, x| Ok(detrend_slice(x)))
}

/// Smallest standard deviation treated as a live channel.
const MIN_CHANNEL_STD: f64 = 1e-10;

pub fn normalize_channels(rec: &Recording) -> Result<Recording> {
    map_channels(rec, rec.fs, |c, x| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > MIN_CHANNEL_STD) {
            return Err(Error::DegenerateChannel(rec.channels[c].clone()));
        }
        Ok(x.iter().map(|v| (v - mean) / std).collect())
    })
}

pub fn resample(rec: &Recording, target_fs: f64) -> Result<Recording> {
    if !(target_fs > 0.0) {
        return Err(Error::param("target rate must be positive"));
    }
    if rec.fs == target_fs {
        return Ok(rec.clone());
    }
    let (up, down) = rational_ratio(rec.fs, target_fs);
    let out = map_channels(rec, target_fs, |_, x| Ok(resample_poly(x, up, down)))?;
    if out.n_samples() == 0 {
        return Err(Error::Data("recording too short to resample".into()));
    }
    Ok(out)
}

pub fn preprocess_pipeline(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    cfg.validate()?;
    let mut out = rec.clone();
    for stage in PIPELINE_STAGES {
        out = match stage {
            "notch" => notch(&out, cfg)?,
            "bandpass" => bandpass(&out, cfg)?,
            "detrend" => detrend_linear(&out)?,
            "normalize" => normalize_channels(&out)?,
            "resample" => resample(&out, cfg.target_fs)?,
            _ => unreachable!("unknown stage {stage}"),
        };
    }
    Ok(out)
}
