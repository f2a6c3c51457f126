//! Ground-truth band power: the regression target of the knowledge objective.
//!
//! Each chunk is cut into non-overlapping 1024-sample windows (4.096 s at
//! 250 Hz, exactly 16 encoder embeddings). Per window and channel a
//! Hann-windowed periodogram is integrated over each band and stored as
//! `ln(eps + power)`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array3, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WINDOW_SAMPLES: usize = 1024;
pub const WINDOWS_PER_CHUNK: usize = 15;
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
}

/// Ordered, non-overlapping frequency bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub bands: Vec<Band>,
}

impl Default for BandDefinition {
    fn default() -> Self {
        let b = |name: &str, low_hz, high_hz| Band {
            name: name.into(),
            low_hz,
            high_hz,
        };
        BandDefinition {
            bands: vec![
                b("delta", 0.5, 4.0),
                b("theta", 4.0, 8.0),
                b("alpha", 8.0, 13.0),
                b("beta", 14.0, 30.0),
                b("gamma", 30.0, 50.0),
            ],
        }
    }
}

impl BandDefinition {
    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.low_hz >= 0.0 && b.low_hz < b.high_hz) {
                return Err(Error::param(format!("band {} has low >= high", b.name)));
            }
            if let Some(next) = self.bands.get(i + 1) {
                if next.low_hz < b.high_hz {
                    return Err(Error::param(format!("bands {} and {} overlap", b.name, next.name)));
                }
            }
        }
        Ok(())
    }
}

/// One-sided Hann periodogram with density scaling. Reusable across windows
/// of a fixed length.
pub struct Periodogram {
    len: usize,
    fs: f64,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Periodogram {
    pub fn new(len: usize, fs: f64) -> Self {
        // Periodic Hann, as used for spectral estimation.
        let window: Vec<f64> = (0..len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(len);
        Periodogram {
            len,
            fs,
            window,
            window_power,
            fft,
        }
    }

    pub fn resolution(&self) -> f64 {
        self.fs / self.len as f64
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..=self.len / 2).map(|k| k as f64 * self.resolution()).collect()
    }

    /// PSD in units²/Hz; `sum(psd) * resolution` equals the window-weighted
    /// mean power `Σ(w·x)² / Σw²`.
    pub fn psd(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len {
            return Err(Error::shape(format!(
                "periodogram expects {} samples, got {}",
                self.len,
                x.len()
            )));
        }
        let mut buf: Vec<Complex64> = x
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex64::new(v * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let scale = 1.0 / (self.fs * self.window_power);
        let half = self.len / 2;
        Ok((0..=half)
            .map(|k| {
                let p = buf[k].norm_sqr() * scale;
                if k == 0 || (self.len % 2 == 0 && k == half) {
                    p
                } else {
                    2.0 * p
                }
            })
            .collect())
    }
}

/// Periodogram of a single 1024-sample window.
pub fn periodogram(window: &[f64], fs: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if window.len() != WINDOW_SAMPLES {
        return Err(Error::shape(format!(
            "periodogram window must be {WINDOW_SAMPLES} samples, got {}",
            window.len()
        )));
    }
    let p = Periodogram::new(WINDOW_SAMPLES, fs);
    let psd = p.psd(window)?;
    Ok((p.freqs(), psd))
}

/// Log band power of one chunk, shaped `[channels × bands × windows]`.
/// Bins are assigned to a band by centre frequency on `[low, high)`.
pub fn band_power(
    chunk: ArrayView2<f64>,
    bands: &BandDefinition,
    fs: f64,
    window_samples: usize,
    eps: f64,
) -> Result<Array3<f64>> {
    let (n_ch, n_t) = chunk.dim();
    if window_samples == 0 || n_t % window_samples != 0 || n_t == 0 {
        return Err(Error::shape(format!(
            "chunk length {n_t} is not a positive multiple of {window_samples}"
        )));
    }
    let n_win = n_t / window_samples;
    let pg = Periodogram::new(window_samples, fs);
    let df = pg.resolution();
    let freqs = pg.freqs();
    let bins: Vec<Vec<usize>> = bands
        .bands
        .iter()
        .map(|b| {
            freqs
                .iter()
                .enumerate()
                .filter(|(_, &f)| f >= b.low_hz && f < b.high_hz)
                .map(|(k, _)| k)
                .collect()
        })
        .collect();

    let mut out = Array3::<f64>::zeros((n_ch, bands.len(), n_win));
    let mut buf = vec![0.0; window_samples];
    for c in 0..n_ch {
        for w in 0..n_win {
            for (dst, &v) in buf
                .iter_mut()
                .zip(chunk.row(c).iter().skip(w * window_samples))
            {
                *dst = v;
            }
            let psd = pg.psd(&buf)?;
            for (j, idx) in bins.iter().enumerate() {
                let power: f64 = idx.iter().map(|&k| psd[k]).sum::<f64>() * df;
                out[[c, j, w]] = (eps + power).ln();
            }
        }
    }
    Ok(out)
}

/// [`band_power`] with the default bands, 250 Hz, 1024-sample windows and ε = 1e-8.
pub fn chunk_band_power(chunk: ArrayView2<f64>) -> Result<Array3<f64>> {
    band_power(chunk, &BandDefinition::default(), 250.0, WINDOW_SAMPLES, LOG_EPS)
}
