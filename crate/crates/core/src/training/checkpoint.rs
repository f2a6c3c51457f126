//! Checkpoint archive: `KGS4CKPT`, a little-endian `u32` header length, a
//! JSON header, then every tensor as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::network::{HeadConfig, Model, ModelConfig};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KGS4CKPT";
pub const FORMAT_VERSION: &str = "1.0";
pub const DISCARDABLE_PREFIXES: [&str; 2] = ["decoder.", "projector."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    discardable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: String,
    label: String,
    model: ModelConfig,
    head: Option<HeadConfig>,
    iteration: u64,
    seed: u64,
    discardable_prefixes: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub label: String,
    pub iteration: u64,
    pub seed: u64,
    pub model: Model,
    pub optimizer: Option<Adam>,
}

fn discardable(name: &str) -> bool {
    DISCARDABLE_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let store = &self.model.store;
        let mut tensors = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        for id in store.ids() {
            let t = store.tensor(id);
            tensors.push(Entry {
                name: t.name.clone(),
                role: Role::Param,
                shape: t.shape.clone(),
                discardable: discardable(&t.name),
            });
            payload.push(&t.data);
        }
        if let Some(opt) = &self.optimizer {
            for id in store.ids() {
                if let Some((m, v)) = opt.moments(id) {
                    let t = store.tensor(id);
                    for (role, data) in [(Role::AdamM, m), (Role::AdamV, v)] {
                        tensors.push(Entry {
                            name: t.name.clone(),
                            role,
                            shape: t.shape.clone(),
                            discardable: discardable(&t.name),
                        });
                        payload.push(data);
                    }
                }
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION.into(),
            label: self.label.clone(),
            model: self.model.config.clone(),
            head: self.model.head_config,
            iteration: self.iteration,
            seed: self.seed,
            discardable_prefixes: DISCARDABLE_PREFIXES.iter().map(|s| s.to_string()).collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for data in payload {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let major = header.format_version.split('.').next().unwrap_or("");
        if major != FORMAT_VERSION.split('.').next().unwrap_or("") {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let pretext = header.tensors.iter().any(|t| t.name.starts_with("projector."));
        let mut model = Model::build(header.model.clone(), header.head, pretext, header.seed)?;
        let mut optimizer = header
            .optimizer
            .as_ref()
            .map(|o| {
                let mut a = Adam::new(&model.store, o.config);
                a.step = o.step;
                a
            });
        let mut seen = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Checkpoint(format!("payload truncated at {}", e.name)))?;
            let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model
                .store
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", e.name)))?;
            if model.store.tensor(id).shape != e.shape {
                return Err(Error::Checkpoint(format!("{}: shape mismatch", e.name)));
            }
            match e.role {
                Role::Param => {
                    model.store.get_mut(id).copy_from_slice(&data);
                    seen += 1;
                }
                Role::AdamM | Role::AdamV => {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| Error::Checkpoint("optimizer state without optimizer header".into()))?;
                    if e.role == Role::AdamM {
                        opt.m[id.0] = data;
                    } else {
                        opt.v[id.0] = data;
                    }
                }
            }
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {seen}", model.store.len())));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { label: header.label, iteration: header.iteration, seed: header.seed, model, optimizer })
    }
}
