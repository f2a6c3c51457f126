//! Recording ingestion, channel handling, chunking, splits and synthetic data.

mod erf;
mod montage;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use erf::{load_recording, read_recording, write_recording, write_recording_to, ERF_MAGIC};
pub use montage::{canonical_label, MontageTable};
pub use split::{make_split, subset_fraction, SplitPlan, SplitScheme};
pub use synth::{synth_recording, ChannelSpec};

/// Model input length in samples (61.44 s at 250 Hz).
pub const CHUNK_SAMPLES: usize = 15360;

/// Sampling rate every model input is brought to.
pub const TARGET_FS: f64 = 250.0;

/// The 19 electrodes used for pre-training, in canonical order.
pub const PRETRAIN_CHANNELS: [&str; 19] = [
    "Fp1", "F7", "F3", "Fz", "F4", "F8", "Fp2", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

/// Electrodes of the 22-channel BCI Competition IV 2a montage.
pub const BCI_IV_2A_CHANNELS: [&str; 22] = [
    "Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP3",
    "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz",
];

/// Electrodes of the 64-channel motor movement/imagery montage, as labelled in the
/// PhysioNet distribution (mixed case, trailing dots).
pub const MMI_CHANNELS: [&str; 64] = [
    "Fc5.", "Fc3.", "Fc1.", "Fcz.", "Fc2.", "Fc4.", "Fc6.", "C5..", "C3..", "C1..", "Cz..",
    "C2..", "C4..", "C6..", "Cp5.", "Cp3.", "Cp1.", "Cpz.", "Cp2.", "Cp4.", "Cp6.", "Fp1.",
    "Fpz.", "Fp2.", "Af7.", "Af3.", "Afz.", "Af4.", "Af8.", "F7..", "F5..", "F3..", "F1..",
    "Fz..", "F2..", "F4..", "F6..", "F8..", "Ft7.", "Ft8.", "T7..", "T8..", "T9..", "T10.",
    "Tp7.", "Tp8.", "P7..", "P5..", "P3..", "P1..", "Pz..", "P2..", "P4..", "P6..", "P8..",
    "Po7.", "Po3.", "Poz.", "Po4.", "Po8.", "O1..", "Oz..", "O2..", "Iz..",
];

pub fn pretrain_channels() -> Vec<String> {
    PRETRAIN_CHANNELS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub label: String,
}

/// A multichannel EEG recording. Samples are stored as `f32` microvolts,
/// one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub channels: Vec<String>,
    pub fs: f64,
    pub data: Array2<f32>,
    pub subject_id: String,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn new(
        channels: Vec<String>,
        fs: f64,
        data: Array2<f32>,
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let rec = Recording {
            channels,
            fs,
            data,
            subject_id: subject_id.into(),
            annotations: Vec::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_annotations(mut self, annotations: Vec<Annotation>) -> Self {
        self.annotations = annotations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.nrows() != self.channels.len() {
            return Err(Error::Integrity(format!(
                "{} data rows for {} channel labels",
                self.data.nrows(),
                self.channels.len()
            )));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::param(format!("sampling rate must be positive, got {}", self.fs)));
        }
        if self.data.ncols() == 0 {
            return Err(Error::Integrity("recording has no samples".into()));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.as_str()) {
                return Err(Error::Integrity(format!("duplicate channel label `{ch}`")));
            }
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    /// Same metadata, new sample matrix (and possibly new rate).
    pub(crate) fn with_data(&self, data: Array2<f32>, fs: f64) -> Recording {
        Recording {
            channels: self.channels.clone(),
            fs,
            data,
            subject_id: self.subject_id.clone(),
            annotations: self.annotations.clone(),
        }
    }

    fn find_channel(&self, wanted: &str) -> Option<usize> {
        if let Some(i) = self.channels.iter().position(|c| c == wanted) {
            return Some(i);
        }
        let key = canonical_label(wanted);
        self.channels.iter().position(|c| canonical_label(c) == key)
    }
}

/// Keeps exactly the `wanted` channels, in that order. Labels are matched
/// exactly first, then through [`canonical_label`] (case, trailing dots and
/// the T3/T4/T5/T6 aliases).
pub fn select_channels(rec: &Recording, wanted: &[String]) -> Result<Recording> {
    let mut rows = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for w in wanted {
        match rec.find_channel(w) {
            Some(i) => rows.push(i),
            None => missing.push(w.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingChannels(missing));
    }
    let mut data = Array2::<f32>::zeros((wanted.len(), rec.n_samples()));
    for (dst, &src) in rows.iter().enumerate() {
        data.row_mut(dst).assign(&rec.data.row(src));
    }
    let mut out = rec.with_data(data, rec.fs);
    out.channels = wanted.to_vec();
    out.validate()?;
    Ok(out)
}

/// Target label → chosen source label, with the distance between them.
pub type ChannelMapping = BTreeMap<String, (String, f64)>;

/// Builds each `target` channel from the spatially nearest source electrode.
/// Ties are broken by the lexicographically smallest source label.
pub fn map_channels_by_proximity(
    rec: &Recording,
    target: &[String],
    montage: &MontageTable,
) -> Result<(Recording, ChannelMapping)> {
    let sources: Vec<(String, [f64; 3], usize)> = rec
        .channels
        .iter()
        .enumerate()
        .map(|(i, c)| {
            montage
                .position(c)
                .map(|p| (c.clone(), p, i))
                .ok_or_else(|| Error::Montage(c.clone()))
        })
        .collect::<Result<_>>()?;
    if sources.is_empty() {
        return Err(Error::Data("recording has no channels to map from".into()));
    }

    let mut mapping = ChannelMapping::new();
    let mut data = Array2::<f32>::zeros((target.len(), rec.n_samples()));
    for (row, t) in target.iter().enumerate() {
        let tp = montage.position(t).ok_or_else(|| Error::Montage(t.clone()))?;
        let mut best: Option<(&str, f64, usize)> = None;
        for (label, p, idx) in &sources {
            let d = euclidean(&tp, p);
            best = match best {
                None => Some((label, d, *idx)),
                Some((bl, bd, bi)) => {
                    if d < bd || (d == bd && label.as_str() < bl) {
                        Some((label, d, *idx))
                    } else {
                        Some((bl, bd, bi))
                    }
                }
            };
        }
        let (label, dist, idx) = best.expect("non-empty sources");
        data.row_mut(row).assign(&rec.data.row(idx));
        mapping.insert(t.clone(), (label.to_string(), dist));
    }
    let mut out = rec.with_data(data, rec.fs);
    out.channels = target.to_vec();
    out.validate()?;
    Ok((out, mapping))
}

fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Splits a recording into consecutive non-overlapping windows of `length`
/// samples. Recordings shorter than one window give an empty list. When
/// `drop_last` is false a trailing partial window is zero-padded.
pub fn chunk(rec: &Recording, length: usize, drop_last: bool) -> Result<Vec<Array2<f32>>> {
    if length == 0 {
        return Err(Error::param("chunk length must be positive"));
    }
    if (rec.fs - TARGET_FS).abs() > 1e-9 {
        return Err(Error::param(format!(
            "chunking expects {TARGET_FS} Hz input, got {} Hz",
            rec.fs
        )));
    }
    let n = rec.n_samples();
    if n < length {
        return Ok(Vec::new());
    }
    let full = n / length;
    let mut out: Vec<Array2<f32>> = (0..full)
        .map(|i| rec.data.slice(s![.., i * length..(i + 1) * length]).to_owned())
        .collect();
    let tail = n - full * length;
    if !drop_last && tail > 0 {
        let mut last = Array2::<f32>::zeros((rec.n_channels(), length));
        last.slice_mut(s![.., ..tail]).assign(&rec.data.slice(s![.., full * length..]));
        out.push(last);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_recording(n_ch: usize, n: usize) -> Recording {
        let data = Array2::from_shape_fn((n_ch, n), |(c, t)| (c * 100_000 + t) as f32);
        let channels = (0..n_ch).map(|c| format!("ch{c}")).collect();
        Recording::new(channels, 250.0, data, "s01").unwrap()
    }

    #[test]
    fn invariants_rejected() {
        let data = Array2::<f32>::zeros((2, 10));
        assert!(Recording::new(vec!["a".into()], 250.0, data.clone(), "s").is_err());
        assert!(Recording::new(vec!["a".into(), "a".into()], 250.0, data.clone(), "s").is_err());
        assert!(Recording::new(vec!["a".into(), "b".into()], 0.0, data, "s").is_err());
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk(&ramp_recording(1, 46080), CHUNK_SAMPLES, true).unwrap().len(), 3);
        assert_eq!(chunk(&ramp_recording(1, 46100), CHUNK_SAMPLES, true).unwrap().len(), 3);
        assert_eq!(chunk(&ramp_recording(1, 46100), CHUNK_SAMPLES, false).unwrap().len(), 4);
        assert!(chunk(&ramp_recording(1, 15359), CHUNK_SAMPLES, true).unwrap().is_empty());
    }

    #[test]
    fn chunks_concatenate_to_prefix() {
        let rec = ramp_recording(2, 1000);
        let chunks = chunk(&rec, 300, true).unwrap();
        let joined: Vec<f32> = (0..2)
            .flat_map(|c| chunks.iter().flat_map(move |ch| ch.row(c).to_vec()))
            .collect();
        let prefix: Vec<f32> = (0..2)
            .flat_map(|c| rec.data.slice(s![c, ..900]).to_vec())
            .collect();
        assert_eq!(joined, prefix);
    }

    #[test]
    fn padded_tail_is_zero() {
        let rec = ramp_recording(1, 350);
        let chunks = chunk(&rec, 300, false).unwrap();
        assert_eq!(chunks[1][[0, 49]], 349.0);
        assert_eq!(chunks[1][[0, 50]], 0.0);
    }

    #[test]
    fn chunk_requires_target_rate() {
        let mut rec = ramp_recording(1, 1000);
        rec.fs = 160.0;
        assert!(matches!(chunk(&rec, 100, true), Err(Error::Parameter(_))));
    }

    #[test]
    fn select_identity_and_missing() {
        let rec = ramp_recording(3, 20);
        assert_eq!(select_channels(&rec, &rec.channels).unwrap(), rec);
        let err = select_channels(&rec, &["ch1".into(), "Oz".into()]).unwrap_err();
        match err {
            Error::MissingChannels(m) => assert_eq!(m, vec!["Oz".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_pretrain_from_mmi_labels() {
        let n = 16;
        let data = Array2::from_shape_fn((64, n), |(c, _)| c as f32);
        let channels = MMI_CHANNELS.iter().map(|s| s.to_string()).collect();
        let rec = Recording::new(channels, 160.0, data, "S001").unwrap();
        let out = select_channels(&rec, &pretrain_channels()).unwrap();
        assert_eq!(out.n_channels(), 19);
        assert_eq!(out.channels, pretrain_channels());
        // T3 is T7 in the newer nomenclature, which sits at index 40 of the MMI list.
        assert_eq!(out.data[[7, 0]], 40.0);
        assert_eq!(out.data[[0, 0]], 21.0);
    }

    #[test]
    fn proximity_maps_identical_label_to_itself() {
        let montage = MontageTable::standard();
        let data = Array2::from_shape_fn((22, 8), |(c, _)| c as f32);
        let channels: Vec<String> = BCI_IV_2A_CHANNELS.iter().map(|s| s.to_string()).collect();
        let rec = Recording::new(channels, 250.0, data, "A01").unwrap();
        let (out, map) = map_channels_by_proximity(&rec, &pretrain_channels(), &montage).unwrap();
        assert_eq!(out.n_channels(), 19);
        assert_eq!(map.len(), 19);
        assert_eq!(map["C3"], ("C3".to_string(), 0.0));
        assert_eq!(map["Cz"].0, "Cz");
        assert_eq!(out.data[[8, 0]], 7.0);
        let (_, again) = map_channels_by_proximity(&rec, &pretrain_channels(), &montage).unwrap();
        assert_eq!(map, again);
    }

    #[test]
    fn proximity_unknown_label_is_montage_error() {
        let montage = MontageTable::standard();
        let rec = Recording::new(vec!["XYZ".into()], 250.0, Array2::zeros((1, 4)), "s").unwrap();
        assert!(matches!(
            map_channels_by_proximity(&rec, &["Cz".into()], &montage),
            Err(Error::Montage(l)) if l == "XYZ"
        ));
    }
}
