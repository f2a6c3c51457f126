use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Recording;
use crate::error::{Error, Result};

/// One synthetic channel: its label and the sinusoids `(freq_hz, amplitude)` it carries.
pub type ChannelSpec = (String, Vec<(f64, f64)>);

/// Sum-of-sinusoids channels with random phases plus white Gaussian noise.
/// Fully determined by `seed`.
pub fn synth_recording(
    spec: &[ChannelSpec],
    noise_std: f64,
    duration_s: f64,
    fs: f64,
    seed: u64,
) -> Result<Recording> {
    if !(fs > 0.0) {
        return Err(Error::param("sampling rate must be positive"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::param("noise std must be non-negative"));
    }
    let n = (duration_s * fs).round() as usize;
    if n == 0 {
        return Err(Error::param("duration yields no samples"));
    }
    for (label, tones) in spec {
        for &(f, _) in tones {
            if !(f >= 0.0 && f < fs / 2.0) {
                return Err(Error::param(format!(
                    "channel {label}: {f} Hz is not below Nyquist ({} Hz)",
                    fs / 2.0
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::param(e.to_string()))?;
    let mut data = Array2::<f32>::zeros((spec.len(), n));
    for (c, (_, tones)) in spec.iter().enumerate() {
        let phases: Vec<f64> = tones.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut row = data.row_mut(c);
        for t in 0..n {
            let time = t as f64 / fs;
            let mut v: f64 = tones
                .iter()
                .zip(&phases)
                .map(|(&(f, a), &ph)| a * (2.0 * PI * f * time + ph).sin())
                .sum();
            if noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            row[t] = v as f32;
        }
    }
    Recording::new(
        spec.iter().map(|(l, _)| l.clone()).collect(),
        fs,
        data,
        format!("synth-{seed}"),
    )
}
