use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::optim::{Adam, AdamConfig};
use super::step::pretext_gradients;
use super::{Mode, TrainConfig};
use crate::bandpower::{band_power, BandDefinition, LOG_EPS};
use crate::corpus::{subset_fraction, TARGET_FS};
use crate::network::{grid_to_power, Model, ModelConfig};
use crate::nn::{mix_seed, Trainable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub cos_sim_loss: f64,
    pub knowledge_loss: f64,
    pub combined: f64,
    pub wall_time_s: f64,
}

/// Optional on-disk artifacts of a pre-training run.
#[derive(Debug, Clone, Default)]
pub struct PretrainPaths {
    pub cache_dir: Option<PathBuf>,
    pub log_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Ground-truth log band powers keyed by a hash of the chunk contents.
#[derive(Debug, Clone)]
pub struct BandPowerCache {
    dir: Option<PathBuf>,
    bands: BandDefinition,
    windows: usize,
}

impl BandPowerCache {
    pub fn new(dir: Option<PathBuf>, bands: BandDefinition, windows: usize) -> Result<Self> {
        bands.validate()?;
        if let Some(d) = &dir {
            fs::create_dir_all(d)?;
        }
        Ok(BandPowerCache { dir, bands, windows })
    }

    pub fn key(&self, chunk: &Array2<f32>) -> String {
        let mut h = Sha256::new();
        h.update((chunk.nrows() as u64).to_le_bytes());
        h.update((self.windows as u64).to_le_bytes());
        for b in &self.bands.bands {
            h.update(b.low_hz.to_le_bytes());
            h.update(b.high_hz.to_le_bytes());
        }
        for v in chunk.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn compute(&self, chunk: &Array2<f32>) -> Result<Array2<f64>> {
        let x = chunk.mapv(f64::from);
        let grid = band_power(x.view(), &self.bands, TARGET_FS, chunk.ncols() / self.windows, LOG_EPS)?;
        Ok(grid_to_power(&grid))
    }

    /// Band powers as `[channels·bands × windows]`, read from disk when cached.
    pub fn get(&self, chunk: &Array2<f32>) -> Result<Array2<f64>> {
        let Some(dir) = &self.dir else { return self.compute(chunk) };
        let rows = chunk.nrows() * self.bands.len();
        let path = dir.join(format!("{}.bp", self.key(chunk)));
        if let Ok(bytes) = fs::read(&path) {
            if bytes.len() == rows * self.windows * 8 {
                let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                return Array2::from_shape_vec((rows, self.windows), v).map_err(|e| Error::shape(e.to_string()));
            }
        }
        let p = self.compute(chunk)?;
        let bytes: Vec<u8> = p.iter().flat_map(|v| v.to_le_bytes()).collect();
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(p)
    }
}

fn log_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Pre-trains a fresh backbone on `chunks` (`[channels × chunk_len]` each).
pub fn pretrain(
    chunks: &[Array2<f32>],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    paths: &PretrainPaths,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::Pretrain {
        return Err(Error::Parameter("pretrain requires mode = pretrain".into()));
    }
    if chunks.is_empty() {
        return Err(Error::Data("empty pre-training corpus".into()));
    }
    let bands = BandDefinition::default();
    if model_config.n_bands != bands.len() {
        return Err(Error::Parameter(format!("model predicts {} bands, targets have {}", model_config.n_bands, bands.len())));
    }
    let want = (model_config.in_channels, model_config.chunk_len);
    if let Some(c) = chunks.iter().find(|c| c.dim() != want) {
        return Err(Error::shape(format!("chunks must be {want:?}, found {:?}", c.dim())));
    }
    let chunks = subset_fraction(chunks, cfg.pretrain_fraction, mix_seed(&[cfg.seed, 11]))?;

    let cache = BandPowerCache::new(paths.cache_dir.clone(), bands, model_config.n_windows())?;
    let targets: Vec<Array2<f64>> = chunks.par_iter().map(|c| cache.get(c)).collect::<Result<_>>()?;
    let inputs: Vec<Array2<f64>> = chunks.iter().map(|c| c.mapv(f64::from)).collect();

    let mut model = Model::pretraining(model_config.clone(), cfg.seed)?;
    let trainable = Trainable::all(&model.store);
    let mut opt = Adam::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let label = cfg.objective.label().to_string();
    let lambda = cfg.lambda();
    let mut writer = paths.log_csv.as_deref().map(log_writer).transpose()?;
    if let Some(d) = &paths.checkpoint_dir {
        fs::create_dir_all(d)?;
    }

    let n = inputs.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 12, epoch])));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let xs: Vec<Array2<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
        let ts: Vec<Array2<f64>> = batch.iter().map(|&i| targets[i].clone()).collect();
        let prep = model.prepare();
        let step_seed = mix_seed(&[cfg.seed, 13, it as u64]);
        let (report, grads) = pretext_gradients(&model, &prep, &xs, &ts, lambda, &trainable, Some(step_seed))?;
        if !report.combined.is_finite() {
            return Err(Error::Divergence { iteration: it, value: report.combined });
        }
        opt.update(&mut model.store, &grads, &trainable);
        let row = LogRow {
            iteration: it,
            cos_sim_loss: report.cos_sim_loss,
            knowledge_loss: report.knowledge_loss,
            combined: report.combined,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(row)?;
        }
        log.push(row);
        if let Some(d) = &paths.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 {
                let ck = Checkpoint { label: label.clone(), iteration: it as u64, seed: cfg.seed, model: model.clone(), optimizer: Some(opt.clone()) };
                ck.save(&d.join(format!("{label}-{it:08}.ckpt")))?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let checkpoint = Checkpoint {
        label,
        iteration: cfg.iterations as u64,
        seed: cfg.seed,
        model,
        optimizer: Some(opt),
    };
    if let Some(d) = &paths.checkpoint_dir {
        checkpoint.save(&d.join(format!("{}.ckpt", checkpoint.label)))?;
    }
    Ok(PretrainOutcome { checkpoint, log })
}
