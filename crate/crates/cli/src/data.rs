//! ERF directories in, chunks and task datasets out.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kgs4::corpus::{
    chunk, load_recording, map_channels_by_proximity, pretrain_channels, select_channels, Annotation, MontageTable,
    Recording, TARGET_FS,
};
use kgs4::network::ModelConfig;
use kgs4::training::finetune::{TaskDataset, Trial};
use kgs4::Error;
use ndarray::{concatenate, s, Array2, Axis};

use crate::config::TaskConfig;
use crate::UsageError;

/// Every `*.erf` file directly under `dir`, sorted by name.
pub fn erf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "erf"))
        .collect();
    files.sort();
    Ok(files)
}

/// The first `n` pre-training channel labels.
pub fn channel_labels(n: usize) -> Result<Vec<String>> {
    let all = pretrain_channels();
    if n > all.len() {
        return Err(UsageError(format!("models take at most {} named channels, config asks for {n}", all.len())).into());
    }
    Ok(all[..n].to_vec())
}

/// Selects `wanted` by label, falling back to nearest-electrode mapping.
pub fn fit_channels(rec: &Recording, wanted: &[String]) -> Result<Recording> {
    match select_channels(rec, wanted) {
        Ok(r) => Ok(r),
        Err(Error::MissingChannels(_)) => Ok(map_channels_by_proximity(rec, wanted, &MontageTable::standard())?.0),
        Err(e) => Err(e.into()),
    }
}

fn model_recording(path: &Path, model: &ModelConfig) -> Result<Recording> {
    let rec = load_recording(path).with_context(|| format!("loading {}", path.display()))?;
    if (rec.fs - TARGET_FS).abs() > 1e-9 {
        return Err(Error::Data(format!("{} is sampled at {} Hz; run `kgs4 preprocess` first", path.display(), rec.fs)).into());
    }
    fit_channels(&rec, &channel_labels(model.in_channels)?).with_context(|| format!("fitting channels of {}", path.display()))
}

/// All full-length chunks of every recording in `dir`.
pub fn load_chunks(dir: &Path, model: &ModelConfig) -> Result<Vec<Array2<f32>>> {
    let mut chunks = Vec::new();
    for path in erf_files(dir)? {
        chunks.extend(chunk(&model_recording(&path, model)?, model.chunk_len, true)?);
    }
    if chunks.is_empty() {
        return Err(Error::Data(format!("no chunks of {} samples in {}", model.chunk_len, dir.display())).into());
    }
    Ok(chunks)
}

/// One trial per annotation whose label is a class: the annotated span,
/// truncated or zero-padded to the model input length.
pub fn load_task(dir: &Path, model: &ModelConfig, task: &TaskConfig) -> Result<TaskDataset> {
    let mut trials = Vec::new();
    for path in erf_files(dir)? {
        let rec = model_recording(&path, model)?;
        for a in &rec.annotations {
            let Some(label) = task.classes.iter().position(|c| *c == a.label) else { continue };
            let start = ((a.onset_s * rec.fs).round() as usize).min(rec.n_samples());
            let end = (start + ((a.duration_s * rec.fs).round() as usize).min(model.chunk_len)).min(rec.n_samples());
            let mut data = Array2::<f32>::zeros((rec.n_channels(), model.chunk_len));
            data.slice_mut(s![.., ..end - start]).assign(&rec.data.slice(s![.., start..end]));
            trials.push(Trial { subject: rec.subject_id.clone(), label, data });
        }
    }
    if trials.is_empty() {
        return Err(Error::Data(format!("no trials labelled {:?} in {}", task.classes, dir.display())).into());
    }
    let data = TaskDataset { name: task.name.clone(), n_classes: task.classes.len(), trials };
    data.validate()?;
    Ok(data)
}

/// Concatenates `chunks` into one 250 Hz recording of `subject`.
pub fn concat_recording(subject: &str, channels: Vec<String>, chunks: &[&Array2<f32>]) -> Result<Recording> {
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let data = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Recording::new(channels, TARGET_FS, data, subject)?)
}

/// Annotations marking consecutive trials of `len` samples with `labels`.
pub fn trial_annotations(labels: &[String], len: usize) -> Vec<Annotation> {
    let dur = len as f64 / TARGET_FS;
    labels
        .iter()
        .enumerate()
        .map(|(k, l)| Annotation { onset_s: k as f64 * dur, duration_s: dur, label: l.clone() })
        .collect()
}
