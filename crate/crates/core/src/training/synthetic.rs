//! Band-dominant synthetic EEG for pre-training and downstream tasks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::finetune::{TaskDataset, Trial};
use crate::corpus::{pretrain_channels, synth_recording, ChannelSpec, TARGET_FS};
use crate::nn::mix_seed;
use crate::preprocess::normalize_channels;
use crate::{Error, Result};

/// Frequency ranges (Hz) inside delta, theta, alpha, beta and gamma.
pub const BAND_TONE_RANGES: [(f64, f64); 5] = [(1.0, 3.5), (4.5, 7.5), (8.5, 12.5), (15.0, 28.0), (32.0, 45.0)];
pub const ALPHA: usize = 2;
pub const BETA: usize = 3;

fn labels(channels: usize) -> Vec<String> {
    if channels == 19 {
        pretrain_channels()
    } else {
        (0..channels).map(|i| format!("ch{i}")).collect()
    }
}

/// One normalized `[channels × len]` chunk whose power is concentrated in
/// band `dominant`.
pub fn band_dominant_chunk(channels: usize, len: usize, dominant: usize, seed: u64) -> Result<Array2<f32>> {
    if dominant >= BAND_TONE_RANGES.len() {
        return Err(Error::Parameter(format!("no band {dominant}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec: Vec<ChannelSpec> = labels(channels)
        .into_iter()
        .map(|label| {
            let mut tones = Vec::new();
            for (b, &(lo, hi)) in BAND_TONE_RANGES.iter().enumerate() {
                if b == dominant {
                    // Two tones at least 1 Hz apart so they cannot beat within a window.
                    let amp = rng.gen_range(1.0..2.0);
                    let mid = 0.5 * (lo + hi);
                    tones.push((rng.gen_range(lo..mid - 0.5), amp));
                    tones.push((rng.gen_range(mid + 0.5..hi), amp));
                } else {
                    tones.push((rng.gen_range(lo..hi), rng.gen_range(0.1..0.3)));
                }
            }
            (label, tones)
        })
        .collect();
    let rec = synth_recording(&spec, 0.3, len as f64 / TARGET_FS, TARGET_FS, rng.gen())?;
    Ok(normalize_channels(&rec)?.data)
}

/// `n_chunks` chunks from `n_subjects` subjects; subject `s` is dominated by
/// band `s mod 5`. Returns `(subject, chunk)` pairs.
pub fn synthetic_corpus(
    n_chunks: usize,
    n_subjects: usize,
    channels: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<(String, Array2<f32>)>> {
    if n_subjects == 0 {
        return Err(Error::Parameter("need at least one subject".into()));
    }
    (0..n_chunks)
        .into_par_iter()
        .map(|i| {
            let s = i % n_subjects;
            let chunk = band_dominant_chunk(channels, len, s % BAND_TONE_RANGES.len(), mix_seed(&[seed, 31, i as u64]))?;
            Ok((format!("synth-{s:02}"), chunk))
        })
        .collect()
}

/// Two-class task: class 0 trials are alpha-dominant, class 1 beta-dominant.
/// With `shuffle_labels` the labels are permuted and carry no signal.
pub fn alpha_beta_task(
    n_subjects: usize,
    trials_per_class: usize,
    channels: usize,
    len: usize,
    shuffle_labels: bool,
    seed: u64,
) -> Result<TaskDataset> {
    let cells: Vec<(usize, usize, usize)> = (0..n_subjects)
        .flat_map(|s| (0..2).flat_map(move |c| (0..trials_per_class).map(move |k| (s, c, k))))
        .collect();
    let mut trials: Vec<Trial> = cells
        .par_iter()
        .map(|&(s, c, k)| {
            let band = if c == 0 { ALPHA } else { BETA };
            let data = band_dominant_chunk(channels, len, band, mix_seed(&[seed, 32, s as u64, c as u64, k as u64]))?;
            Ok(Trial { subject: format!("subject-{s:02}"), label: c, data })
        })
        .collect::<Result<_>>()?;
    if shuffle_labels {
        let mut labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 33])));
        for (t, l) in trials.iter_mut().zip(labels) {
            t.label = l;
        }
    }
    let name = if shuffle_labels { "synthetic-shuffled" } else { "synthetic-alpha-beta" };
    Ok(TaskDataset { name: name.into(), n_classes: 2, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandpower::chunk_band_power;

    #[test]
    fn dominant_band_has_most_power() {
        for band in 0..5 {
            let c = band_dominant_chunk(19, 15360, band, band as u64).unwrap();
            let p = chunk_band_power(c.mapv(f64::from).view()).unwrap();
            for ch in 0..19 {
                for w in 0..15 {
                    let best = (0..5).max_by(|&a, &b| p[[ch, a, w]].total_cmp(&p[[ch, b, w]])).unwrap();
                    assert_eq!(best, band, "channel {ch} window {w}");
                }
            }
        }
    }

    #[test]
    fn task_is_balanced_and_seeded() {
        let t = alpha_beta_task(3, 2, 2, 256, false, 5).unwrap();
        assert_eq!(t.trials.len(), 12);
        assert_eq!(t.trials.iter().filter(|x| x.label == 0).count(), 6);
        assert_eq!(t.subjects().len(), 3);
        assert_eq!(t, alpha_beta_task(3, 2, 2, 256, false, 5).unwrap());
        let s = alpha_beta_task(3, 2, 2, 256, true, 5).unwrap();
        assert_eq!(s.trials.iter().filter(|x| x.label == 0).count(), 6);
    }

    #[test]
    fn corpus_cycles_subjects() {
        let c = synthetic_corpus(7, 3, 2, 256, 1).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(c[3].0, "synth-00");
        assert!(synthetic_corpus(1, 0, 2, 256, 1).is_err());
    }
}
