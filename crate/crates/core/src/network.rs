//! Encoder, temporal block, decoder, band-power projector and classifier head.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{maybe_mask, NormCache, S4Cache};
use crate::nn::{
    gelu, gelu_backward, mix_seed, ChannelNorm, Conv1d, ConvTranspose1d, Grads, Linear, ParamStore, S4Block,
    Trainable,
};
use crate::ssm::{init_ssm, SsmConv, SsmParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { out_channels, kernel, stride }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub modules: Vec<ConvSpec>,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            modules: vec![
                ConvSpec::new(64, 7, 2),
                ConvSpec::new(128, 5, 2),
                ConvSpec::new(256, 5, 2),
                ConvSpec::new(512, 3, 2),
                ConvSpec::new(512, 3, 2),
                ConvSpec::new(512, 3, 2),
            ],
            dropout: 0.3,
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.modules.iter().map(|m| m.stride).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub chunk_len: usize,
    pub encoder: EncoderConfig,
    pub d_model: usize,
    pub n_state: usize,
    pub n_s4: usize,
    pub s4_dropout: f64,
    pub n_bands: usize,
    /// Embeddings averaged into one band-power window.
    pub pool: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 19,
            chunk_len: 15360,
            encoder: EncoderConfig::default(),
            d_model: 512,
            n_state: 128,
            n_s4: 8,
            s4_dropout: 0.3,
            n_bands: 5,
            pool: 16,
        }
    }
}

impl ModelConfig {
    /// Narrow model with the full input and output geometry, small enough to
    /// train on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                modules: vec![
                    ConvSpec::new(8, 7, 2),
                    ConvSpec::new(16, 5, 2),
                    ConvSpec::new(16, 5, 2),
                    ConvSpec::new(32, 3, 2),
                    ConvSpec::new(32, 3, 2),
                    ConvSpec::new(32, 3, 2),
                ],
                dropout: 0.1,
            },
            d_model: 32,
            n_state: 16,
            n_s4: 2,
            s4_dropout: 0.1,
            ..Self::default()
        }
    }

    /// Minimal model used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            in_channels: 2,
            chunk_len: 256,
            encoder: EncoderConfig {
                modules: vec![
                    ConvSpec::new(4, 5, 2),
                    ConvSpec::new(4, 3, 2),
                    ConvSpec::new(8, 3, 2),
                    ConvSpec::new(8, 3, 2),
                ],
                dropout: 0.3,
            },
            d_model: 8,
            n_state: 4,
            n_s4: 2,
            s4_dropout: 0.3,
            n_bands: 5,
            pool: 4,
        }
    }

    pub fn n_embeddings(&self) -> usize {
        self.chunk_len / self.encoder.total_stride()
    }

    pub fn n_windows(&self) -> usize {
        self.n_embeddings() / self.pool
    }

    pub fn encoder_out(&self) -> usize {
        self.encoder.modules.last().map_or(self.in_channels, |m| m.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.in_channels == 0 || self.d_model == 0 || self.n_bands == 0 || self.pool == 0 {
            return bad("channel, model, band and pool sizes must be positive".into());
        }
        if self.encoder.modules.is_empty() {
            return bad("encoder needs at least one module".into());
        }
        for (i, m) in self.encoder.modules.iter().enumerate() {
            if m.kernel % 2 == 0 || m.stride == 0 || m.out_channels == 0 {
                return bad(format!("encoder module {i}: kernel must be odd, stride and width positive"));
            }
        }
        for p in [self.encoder.dropout, self.s4_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        if self.chunk_len == 0 || self.chunk_len % self.encoder.total_stride() != 0 {
            return bad(format!(
                "chunk length {} not divisible by total stride {}",
                self.chunk_len,
                self.encoder.total_stride()
            ));
        }
        if self.n_embeddings() % self.pool != 0 || self.n_windows() == 0 {
            return bad(format!("{} embeddings cannot be pooled in groups of {}", self.n_embeddings(), self.pool));
        }
        if self.n_state == 0 || self.n_state % 2 != 0 {
            return bad(format!("state size must be even, got {}", self.n_state));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub n_fc: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl HeadConfig {
    pub fn new(n_fc: usize, n_classes: usize) -> Self {
        HeadConfig { n_fc, hidden: 256, n_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_fc) {
            return Err(Error::Parameter(format!("n_fc must be 1 or 2, got {}", self.n_fc)));
        }
        if self.n_classes < 2 || self.hidden == 0 {
            return Err(Error::Parameter(format!("head needs at least 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderModule {
    conv: Conv1d,
    norm: ChannelNorm,
}

#[derive(Debug, Clone)]
struct DecoderModule {
    deconv: ConvTranspose1d,
    norm: Option<ChannelNorm>,
}

#[derive(Debug, Clone)]
struct Head {
    fc1: Linear,
    fc2: Option<Linear>,
}

/// Per-step SSM state derived from the current parameters.
pub struct Prepared {
    ssm: Vec<(SsmParams, SsmConv)>,
}

/// Which outputs a forward pass computes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Outputs {
    pub recon: bool,
    pub power: bool,
    pub logits: bool,
}

impl Outputs {
    pub const PRETEXT: Outputs = Outputs { recon: true, power: true, logits: false };
    pub const LOGITS: Outputs = Outputs { recon: false, power: false, logits: true };
}

#[derive(Debug, Clone)]
struct EncCache {
    cols: Array2<f64>,
    in_len: usize,
    mask: Option<Array2<f64>>,
    norm: NormCache,
    normed: Array2<f64>,
}

#[derive(Debug, Clone)]
struct DecCache {
    input: Array2<f64>,
    post: Option<(Option<Array2<f64>>, NormCache, Array2<f64>)>,
}

/// Intermediate values of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    start: usize,
    enc: Vec<EncCache>,
    lin_input: Option<Array2<f64>>,
    blocks: Vec<S4Cache>,
    embedding: Array2<f64>,
    dec: Vec<DecCache>,
    pooled: Option<Array2<f64>>,
    head_hidden: Option<(Array2<f64>, Array2<f64>)>,
    pub recon: Option<Array2<f64>>,
    /// `[channels·bands × windows]`, band index fastest.
    pub power: Option<Array2<f64>>,
    pub logits: Option<Array1<f64>>,
}

impl Trace {
    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }
}

/// Loss gradients with respect to the forward outputs of one sample.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub recon: Option<Array2<f64>>,
    pub power: Option<Array2<f64>>,
    pub logits: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
}

pub const SUBMODULES: [&str; 5] = ["encoder", "temporal", "decoder", "projector", "head"];

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub head_config: Option<HeadConfig>,
    pub store: ParamStore,
    encoder: Vec<EncoderModule>,
    temporal_in: Linear,
    blocks: Vec<S4Block>,
    decoder: Vec<DecoderModule>,
    projector: Option<Linear>,
    head: Option<Head>,
}

fn section_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag]))
}

impl Model {
    /// Backbone with decoder and projector, as used for pre-training.
    pub fn pretraining(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, None, true, seed)
    }

    /// Backbone with a classification head and no pretext modules.
    pub fn classifier(config: ModelConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(head), false, seed)
    }

    pub fn build(config: ModelConfig, head: Option<HeadConfig>, pretext: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(h) = &head {
            h.validate()?;
        }
        let mut store = ParamStore::new();
        let mut rng = section_rng(seed, 1);
        let mut in_ch = config.in_channels;
        let mut encoder = Vec::new();
        for (i, m) in config.encoder.modules.iter().enumerate() {
            let p = format!("encoder.{i}");
            encoder.push(EncoderModule {
                conv: Conv1d::new(&mut store, &format!("{p}.conv"), (in_ch, m.out_channels), m.kernel, m.stride, &mut rng),
                norm: ChannelNorm::new(&mut store, &format!("{p}.norm"), m.out_channels),
            });
            in_ch = m.out_channels;
        }
        let mut rng = section_rng(seed, 2);
        let d = config.d_model;
        let temporal_in = Linear::new(&mut store, "temporal.linear", (in_ch, d), &mut rng);
        let mut blocks = Vec::new();
        for i in 0..config.n_s4 {
            let init = init_ssm(d, config.n_state, mix_seed(&[seed, 3, i as u64]))?;
            blocks.push(S4Block::new(&mut store, &format!("temporal.s4.{i}"), &init, config.s4_dropout, &mut rng));
        }
        let mut decoder = Vec::new();
        let mut projector = None;
        if pretext {
            let mut rng = section_rng(seed, 4);
            let mods = &config.encoder.modules;
            let n = mods.len();
            for (step, i) in (0..n).rev().enumerate() {
                let inp = if i == n - 1 { d } else { mods[i].out_channels };
                let out = if i == 0 { config.in_channels } else { mods[i - 1].out_channels };
                let p = format!("decoder.{step}");
                let deconv = ConvTranspose1d::new(
                    &mut store,
                    &format!("{p}.deconv"),
                    (inp, out),
                    mods[i].kernel,
                    mods[i].stride,
                    &mut rng,
                );
                let norm = (i != 0).then(|| ChannelNorm::new(&mut store, &format!("{p}.norm"), out));
                decoder.push(DecoderModule { deconv, norm });
            }
            let mut rng = section_rng(seed, 5);
            projector = Some(Linear::new(&mut store, "projector", (d, config.in_channels * config.n_bands), &mut rng));
        }
        let head_config = head;
        let head = head.map(|h| {
            let mut rng = section_rng(seed, 6);
            if h.n_fc == 1 {
                Head { fc1: Linear::new(&mut store, "head.fc1", (d, h.n_classes), &mut rng), fc2: None }
            } else {
                Head {
                    fc1: Linear::new(&mut store, "head.fc1", (d, h.hidden), &mut rng),
                    fc2: Some(Linear::new(&mut store, "head.fc2", (h.hidden, h.n_classes), &mut rng)),
                }
            }
        });
        Ok(Model { config, head_config, store, encoder, temporal_in, blocks, decoder, projector, head })
    }

    pub fn has_pretext(&self) -> bool {
        self.projector.is_some()
    }

    /// Copies every tensor whose name and shape match `src`; returns how many
    /// were copied.
    pub fn load_matching(&mut self, src: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.tensor(id).name.clone();
            if let Some(t) = src.by_name(&name) {
                if t.shape != self.store.tensor(id).shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match {:?}",
                        t.shape,
                        self.store.tensor(id).shape
                    )));
                }
                self.store.get_mut(id).copy_from_slice(&t.data);
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let breakdown: BTreeMap<String, usize> = SUBMODULES
            .iter()
            .map(|m| (m.to_string(), self.store.numel_with_prefix(&format!("{m}."))))
            .filter(|(_, n)| *n > 0)
            .collect();
        ParamCount { total: self.store.numel(), breakdown }
    }

    pub fn count_trainable(&self, trainable: &Trainable) -> usize {
        trainable.count(&self.store)
    }

    /// Number of stages below the embedding: encoder modules, input linear,
    /// then S4 modules.
    pub fn n_stages(&self) -> usize {
        self.encoder.len() + 1 + self.blocks.len()
    }

    /// Stage index whose input is the convolution embedding `C`.
    pub fn conv_boundary(&self) -> usize {
        self.encoder.len()
    }

    /// Stage index of S4 module `i`.
    pub fn block_boundary(&self, i: usize) -> usize {
        self.encoder.len() + 1 + i
    }

    fn stage_params(&self, stage: usize) -> Vec<crate::nn::ParamId> {
        let ne = self.encoder.len();
        if stage < ne {
            let m = &self.encoder[stage];
            m.conv.params().into_iter().chain(m.norm.params()).collect()
        } else if stage == ne {
            self.temporal_in.params().to_vec()
        } else {
            self.blocks[stage - ne - 1].params()
        }
    }

    /// Lowest stage at or above `start` with a trainable parameter.
    fn lowest_trainable(&self, start: usize, trainable: &Trainable) -> Option<usize> {
        (start..self.n_stages()).find(|&s| trainable.any(&self.stage_params(s)))
    }

    /// Stage at which gradients stop; everything below it can be
    /// precomputed. Equals `n_stages()` when only the head trains.
    pub fn first_trainable_stage(&self, trainable: &Trainable) -> usize {
        self.lowest_trainable(0, trainable).unwrap_or(self.n_stages())
    }

    pub fn prepare(&self) -> Prepared {
        let len = self.config.n_embeddings();
        Prepared {
            ssm: self
                .blocks
                .iter()
                .map(|b| {
                    let p = b.ssm_params(&self.store);
                    let conv = SsmConv::new(&p, len);
                    (p, conv)
                })
                .collect(),
        }
    }

    fn expected_input(&self, stage: usize) -> (usize, usize) {
        let ne = self.encoder.len();
        if stage == 0 {
            (self.config.in_channels, self.config.chunk_len)
        } else if stage <= ne {
            let stride: usize = self.config.encoder.modules[..stage].iter().map(|m| m.stride).product();
            (self.config.encoder.modules[stage - 1].out_channels, self.config.chunk_len / stride)
        } else {
            (self.config.d_model, self.config.n_embeddings())
        }
    }

    /// Forward pass of one sample entering at stage `start`. `drop_seed`
    /// enables dropout; `None` is evaluation mode.
    pub fn forward_sample(
        &self,
        prep: &Prepared,
        start: usize,
        input: ArrayView2<f64>,
        drop_seed: Option<u64>,
        outputs: Outputs,
    ) -> Result<Trace> {
        let expected = self.expected_input(start);
        if input.dim() != expected {
            return Err(Error::shape(format!("stage {start} expects {expected:?}, got {:?}", input.dim())));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite model input".into()));
        }
        let seed_for = |tag: u64| drop_seed.map(|s| mix_seed(&[s, tag]));
        let ne = self.encoder.len();
        let mut x = input.to_owned();
        let mut enc = Vec::new();
        for (i, m) in self.encoder.iter().enumerate().skip(start) {
            let in_len = x.ncols();
            let (mut y, cols) = m.conv.forward(&self.store, x.view())?;
            let mask = maybe_mask(y.dim(), self.config.encoder.dropout, seed_for(i as u64));
            if let Some(mk) = &mask {
                y *= mk;
            }
            let (normed, norm) = m.norm.forward(&self.store, y.view())?;
            x = gelu(&normed);
            enc.push(EncCache { cols, in_len, mask, norm, normed });
        }
        let mut lin_input = None;
        if start <= ne {
            let y = self.temporal_in.forward(&self.store, x.view())?;
            lin_input = Some(std::mem::replace(&mut x, y));
        }
        let first_block = start.saturating_sub(ne + 1);
        let mut blocks = Vec::new();
        for (i, b) in self.blocks.iter().enumerate().skip(first_block) {
            let (y, cache) = b.forward(&self.store, &prep.ssm[i].1, x.view(), seed_for(100 + i as u64))?;
            x = y;
            blocks.push(cache);
        }
        let embedding = x;

        let mut trace = Trace {
            start,
            enc,
            lin_input,
            blocks,
            embedding,
            dec: Vec::new(),
            pooled: None,
            head_hidden: None,
            recon: None,
            power: None,
            logits: None,
        };
        if outputs.recon {
            self.decode_into(&mut trace, &seed_for)?;
        }
        if outputs.power {
            let proj = self.projector.as_ref().ok_or_else(|| Error::Parameter("model has no projector".into()))?;
            let pooled = self.pool(&trace.embedding);
            trace.power = Some(proj.forward(&self.store, pooled.view())?);
            trace.pooled = Some(pooled);
        }
        if outputs.logits {
            let head = self.head.as_ref().ok_or_else(|| Error::Parameter("model has no classification head".into()))?;
            let v = trace.embedding.mean_axis(Axis(1)).expect("non-empty").insert_axis(Axis(1));
            let (logits, hidden) = match &head.fc2 {
                None => (head.fc1.forward(&self.store, v.view())?, None),
                Some(fc2) => {
                    let pre = head.fc1.forward(&self.store, v.view())?;
                    let act = gelu(&pre);
                    (fc2.forward(&self.store, act.view())?, Some((pre, act)))
                }
            };
            trace.head_hidden = hidden;
            trace.logits = Some(logits.column(0).to_owned());
        }
        Ok(trace)
    }

    fn decode_into(&self, trace: &mut Trace, seed_for: &dyn Fn(u64) -> Option<u64>) -> Result<()> {
        if self.decoder.is_empty() {
            return Err(Error::Parameter("model has no decoder".into()));
        }
        let mut x = trace.embedding.clone();
        for (i, m) in self.decoder.iter().enumerate() {
            let y = m.deconv.forward(&self.store, x.view())?;
            let input = std::mem::replace(&mut x, y);
            let post = match &m.norm {
                None => None,
                Some(norm) => {
                    let mask = maybe_mask(x.dim(), self.config.encoder.dropout, seed_for(200 + i as u64));
                    if let Some(mk) = &mask {
                        x *= mk;
                    }
                    let (normed, cache) = norm.forward(&self.store, x.view())?;
                    x = gelu(&normed);
                    Some((mask, cache, normed))
                }
            };
            trace.dec.push(DecCache { input, post });
        }
        trace.recon = Some(x);
        Ok(())
    }

    fn pool(&self, e: &Array2<f64>) -> Array2<f64> {
        let (d, n) = e.dim();
        let g = self.config.pool;
        let mut out = Array2::<f64>::zeros((d, n / g));
        for w in 0..n / g {
            let m = e.slice(s![.., w * g..(w + 1) * g]).mean_axis(Axis(1)).expect("non-empty");
            out.column_mut(w).assign(&m);
        }
        out
    }

    /// Accumulates parameter gradients of trainable tensors into `grads`.
    pub fn backward_sample(
        &self,
        prep: &Prepared,
        trace: &Trace,
        dout: &OutputGrads,
        trainable: &Trainable,
        grads: &mut Grads,
    ) -> Result<()> {
        let lowest = self.lowest_trainable(trace.start, trainable);
        let need_de = lowest.is_some();
        let mut de: Option<Array2<f64>> = None;
        let add = |acc: &mut Option<Array2<f64>>, g: Array2<f64>| match acc {
            Some(a) => *a += &g,
            None => *acc = Some(g),
        };

        if let Some(dr) = &dout.recon {
            let mut dx = dr.clone();
            let n = self.decoder.len();
            for (i, (m, c)) in self.decoder.iter().zip(&trace.dec).enumerate().rev() {
                if let (Some(norm), Some((mask, nc, normed))) = (&m.norm, &c.post) {
                    let dn = gelu_backward(normed, dx.view());
                    dx = norm.backward(&self.store, nc, dn.view(), trainable, grads);
                    if let Some(mk) = mask {
                        dx *= mk;
                    }
                }
                let need = i > 0 || need_de;
                match m.deconv.backward(&self.store, c.input.view(), dx.view(), trainable, grads, need) {
                    Some(g) => dx = g,
                    None => {
                        debug_assert!(i == 0 && n > 0);
                        break;
                    }
                }
                if i == 0 {
                    add(&mut de, dx.clone());
                }
            }
        }
        if let Some(dp) = &dout.power {
            let proj = self.projector.as_ref().ok_or_else(|| Error::Parameter("model has no projector".into()))?;
            let pooled = trace.pooled.as_ref().ok_or_else(|| Error::Parameter("power was not computed".into()))?;
            if let Some(dpool) = proj.backward(&self.store, pooled.view(), dp.view(), trainable, grads, need_de) {
                let g = self.config.pool;
                let mut d = Array2::<f64>::zeros(trace.embedding.dim());
                for (t, mut col) in d.columns_mut().into_iter().enumerate() {
                    col.assign(&(&dpool.column(t / g) / g as f64));
                }
                add(&mut de, d);
            }
        }
        if let Some(dl) = &dout.logits {
            let head = self.head.as_ref().ok_or_else(|| Error::Parameter("model has no classification head".into()))?;
            let v = trace.embedding.mean_axis(Axis(1)).expect("non-empty").insert_axis(Axis(1));
            let dl = dl.clone().insert_axis(Axis(1));
            let dv = match (&head.fc2, &trace.head_hidden) {
                (Some(fc2), Some((pre, act))) => {
                    let dact = fc2.backward(&self.store, act.view(), dl.view(), trainable, grads, true).expect("dx");
                    let dpre = gelu_backward(pre, dact.view());
                    head.fc1.backward(&self.store, v.view(), dpre.view(), trainable, grads, need_de)
                }
                _ => head.fc1.backward(&self.store, v.view(), dl.view(), trainable, grads, need_de),
            };
            if let Some(dv) = dv {
                let n = trace.embedding.ncols() as f64;
                let col = dv.column(0).mapv(|x| x / n);
                let d = Array2::from_shape_fn(trace.embedding.dim(), |(r, _)| col[r]);
                add(&mut de, d);
            }
        }

        let (Some(lowest), Some(mut dx)) = (lowest, de) else { return Ok(()) };
        let ne = self.encoder.len();
        let first_block = trace.start.saturating_sub(ne + 1);
        for (k, cache) in trace.blocks.iter().enumerate().rev() {
            let i = first_block + k;
            let stage = ne + 1 + i;
            let (p, conv) = &prep.ssm[i];
            let need = stage > lowest;
            match self.blocks[i].backward(&self.store, p, conv, cache, dx.view(), trainable, grads, need)? {
                Some(g) => dx = g,
                None => return Ok(()),
            }
        }
        if let Some(li) = &trace.lin_input {
            match self.temporal_in.backward(&self.store, li.view(), dx.view(), trainable, grads, ne > lowest) {
                Some(g) => dx = g,
                None => return Ok(()),
            }
        }
        for (k, c) in trace.enc.iter().enumerate().rev() {
            let i = trace.start + k;
            let m = &self.encoder[i];
            let dn = gelu_backward(&c.normed, dx.view());
            let mut dy = m.norm.backward(&self.store, &c.norm, dn.view(), trainable, grads);
            if let Some(mk) = &c.mask {
                dy *= mk;
            }
            match m.conv.backward(&self.store, &c.cols, c.in_len, dy.view(), trainable, grads, i > lowest) {
                Some(g) => dx = g,
                None => return Ok(()),
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward of every batch item from stage `start`, in parallel.
    pub fn forward_batch(&self, start: usize, input: ArrayView3<f64>, outputs: Outputs) -> Result<Vec<Trace>> {
        let prep = self.prepare();
        (0..input.shape()[0])
            .into_par_iter()
            .map(|b| self.forward_sample(&prep, start, input.index_axis(Axis(0), b), None, outputs))
            .collect()
    }

    /// Evaluation-mode features at stage boundary `stop` for one sample.
    pub fn features_sample(&self, prep: &Prepared, input: ArrayView2<f64>, stop: usize) -> Result<Array2<f64>> {
        let expected = self.expected_input(0);
        if input.dim() != expected {
            return Err(Error::shape(format!("model expects {expected:?}, got {:?}", input.dim())));
        }
        let ne = self.encoder.len();
        let mut x = input.to_owned();
        for m in self.encoder.iter().take(stop) {
            let (y, _) = m.conv.forward(&self.store, x.view())?;
            x = gelu(&m.norm.forward(&self.store, y.view())?.0);
        }
        if stop > ne {
            x = self.temporal_in.forward(&self.store, x.view())?;
        }
        for (i, b) in self.blocks.iter().enumerate().take(stop.saturating_sub(ne + 1)) {
            x = b.forward(&self.store, &prep.ssm[i].1, x.view(), None)?.0;
        }
        Ok(x)
    }

    pub fn encode(&self, x: ArrayView3<f64>) -> Result<Array3<f64>> {
        let prep = self.prepare();
        let stop = self.conv_boundary();
        stack((0..x.shape()[0])
            .into_par_iter()
            .map(|b| self.features_sample(&prep, x.index_axis(Axis(0), b), stop))
            .collect::<Result<Vec<_>>>()?)
    }

    pub fn temporal_block(&self, c: ArrayView3<f64>) -> Result<Array3<f64>> {
        let traces = self.forward_batch(self.conv_boundary(), c, Outputs::default())?;
        stack(traces.into_iter().map(|t| t.embedding).collect())
    }

    fn check_embedding(&self, e: &ArrayView3<f64>) -> Result<()> {
        let want = (self.config.d_model, self.config.n_embeddings());
        if (e.shape()[1], e.shape()[2]) != want {
            return Err(Error::shape(format!("embeddings must be [B x {} x {}], got {:?}", want.0, want.1, e.shape())));
        }
        Ok(())
    }

    fn from_embedding(&self, e: &ArrayView3<f64>, b: usize) -> Trace {
        Trace {
            start: self.n_stages(),
            enc: Vec::new(),
            lin_input: None,
            blocks: Vec::new(),
            embedding: e.index_axis(Axis(0), b).to_owned(),
            dec: Vec::new(),
            pooled: None,
            head_hidden: None,
            recon: None,
            power: None,
            logits: None,
        }
    }

    pub fn decode(&self, e: ArrayView3<f64>) -> Result<Array3<f64>> {
        self.check_embedding(&e)?;
        let outs = (0..e.shape()[0])
            .into_par_iter()
            .map(|b| {
                let mut t = self.from_embedding(&e, b);
                self.decode_into(&mut t, &|_| None)?;
                Ok(t.recon.expect("decoded"))
            })
            .collect::<Result<Vec<_>>>()?;
        stack(outs)
    }

    /// Estimated log band powers `[B × channels × bands × windows]`.
    pub fn project_bandpower(&self, e: ArrayView3<f64>) -> Result<Array4<f64>> {
        self.check_embedding(&e)?;
        let traces = self.forward_batch(self.n_stages(), e, Outputs { power: true, ..Outputs::default() })?;
        let (c, nb, nw) = (self.config.in_channels, self.config.n_bands, self.config.n_windows());
        let mut out = Array4::<f64>::zeros((traces.len(), c, nb, nw));
        for (b, t) in traces.iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(&power_to_grid(t.power.as_ref().expect("power"), c, nb)?);
        }
        Ok(out)
    }

    pub fn classify(&self, e: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.check_embedding(&e)?;
        let traces = self.forward_batch(self.n_stages(), e, Outputs::LOGITS)?;
        let k = self.head_config.map_or(0, |h| h.n_classes);
        let mut out = Array2::<f64>::zeros((traces.len(), k));
        for (b, t) in traces.iter().enumerate() {
            out.row_mut(b).assign(t.logits.as_ref().expect("logits"));
        }
        Ok(out)
    }
}

/// Reshapes a `[channels·bands × windows]` projection into `[channels × bands × windows]`.
pub fn power_to_grid(p: &Array2<f64>, channels: usize, bands: usize) -> Result<Array3<f64>> {
    let nw = p.ncols();
    p.as_standard_layout()
        .into_owned()
        .into_shape((channels, bands, nw))
        .map_err(|e| Error::shape(e.to_string()))
}

/// Inverse of [`power_to_grid`].
pub fn grid_to_power(g: &Array3<f64>) -> Array2<f64> {
    let (c, b, w) = g.dim();
    g.as_standard_layout().into_owned().into_shape((c * b, w)).expect("contiguous")
}

fn stack(items: Vec<Array2<f64>>) -> Result<Array3<f64>> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    if views.is_empty() {
        return Err(Error::shape("empty batch"));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn tiny() -> Model {
        Model::build(ModelConfig::tiny(), Some(HeadConfig::new(2, 3)), true, 7).unwrap()
    }

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.encoder.total_stride(), 64);
        assert_eq!(c.n_embeddings(), 240);
        assert_eq!(c.n_windows(), 15);
        assert_eq!(c.encoder_out(), 512);
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::tiny();
        c.chunk_len = 250;
        assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        let mut c = ModelConfig::tiny();
        c.n_state = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.encoder.modules[0].kernel = 4;
        assert!(c.validate().is_err());
        assert!(HeadConfig::new(3, 2).validate().is_err());
        assert!(HeadConfig::new(1, 1).validate().is_err());
    }

    #[test]
    fn tiny_shapes() {
        let m = tiny();
        let x = random3((3, 2, 256), 1);
        let c = m.encode(x.view()).unwrap();
        assert_eq!(c.dim(), (3, 8, 16));
        let e = m.temporal_block(c.view()).unwrap();
        assert_eq!(e.dim(), (3, 8, 16));
        assert_eq!(m.decode(e.view()).unwrap().dim(), (3, 2, 256));
        assert_eq!(m.project_bandpower(e.view()).unwrap().dim(), (3, 2, 5, 4));
        assert_eq!(m.classify(e.view()).unwrap().dim(), (3, 3));
        let bad = random3((1, 2, 257), 2);
        assert!(matches!(m.encode(bad.view()), Err(Error::Shape(_))));
        assert!(matches!(m.decode(c.slice(s![.., .., ..15]).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic_and_items_are_independent() {
        let m = tiny();
        let x = random3((3, 2, 256), 3);
        let a = m.forward_batch(0, x.view(), Outputs::PRETEXT).unwrap();
        let b = m.forward_batch(0, x.view(), Outputs::PRETEXT).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.recon, tb.recon);
            assert_eq!(ta.power, tb.power);
        }
        let mut y = x.clone();
        y.index_axis_mut(Axis(0), 0).assign(&random3((1, 2, 256), 4).index_axis(Axis(0), 0));
        y.index_axis_mut(Axis(0), 2).fill(0.0);
        let c = m.forward_batch(0, y.view(), Outputs::PRETEXT).unwrap();
        assert_eq!(a[1].recon, c[1].recon);
        assert_eq!(a[1].power, c[1].power);
        assert!(c[2].recon.as_ref().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_changes_training_outputs_only() {
        let m = tiny();
        let prep = m.prepare();
        let x = random3((1, 2, 256), 5);
        let x0 = x.index_axis(Axis(0), 0);
        let eval = m.forward_sample(&prep, 0, x0, None, Outputs::PRETEXT).unwrap();
        let t1 = m.forward_sample(&prep, 0, x0, Some(1), Outputs::PRETEXT).unwrap();
        let t1b = m.forward_sample(&prep, 0, x0, Some(1), Outputs::PRETEXT).unwrap();
        let t2 = m.forward_sample(&prep, 0, x0, Some(2), Outputs::PRETEXT).unwrap();
        assert_eq!(t1.recon, t1b.recon);
        assert_ne!(t1.recon, t2.recon);
        assert_ne!(eval.recon, t1.recon);
    }

    #[test]
    fn pooling_oracles() {
        let m = tiny();
        let (d, n, g) = (8, 16, 4);
        let mut e = Array3::<f64>::zeros((1, d, n));
        let cols = random3((1, d, n / g), 6);
        for t in 0..n {
            e.slice_mut(s![0, .., t]).assign(&cols.slice(s![0, .., t / g]));
        }
        let p = m.project_bandpower(e.view()).unwrap();
        let proj = m.projector.as_ref().unwrap();
        let direct = proj.forward(&m.store, cols.index_axis(Axis(0), 0)).unwrap();
        let grid = power_to_grid(&direct, 2, 5).unwrap();
        assert!((&p.index_axis(Axis(0), 0) - &grid).iter().all(|v| v.abs() < 1e-12));

        let e = random3((1, d, n), 7);
        let order = [2, 0, 3, 1];
        let mut permuted = e.clone();
        for (dst, &src) in order.iter().enumerate() {
            permuted
                .slice_mut(s![0, .., dst * g..(dst + 1) * g])
                .assign(&e.slice(s![0, .., src * g..(src + 1) * g]));
        }
        let a = m.project_bandpower(e.view()).unwrap();
        let b = m.project_bandpower(permuted.view()).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(b.slice(s![0, .., .., dst]), a.slice(s![0, .., .., src]));
        }
    }

    #[test]
    fn head_parameter_arithmetic() {
        let m = Model::classifier(ModelConfig::tiny(), HeadConfig::new(1, 2), 0).unwrap();
        let count = m.count_parameters();
        assert_eq!(count.breakdown["head"], 8 * 2 + 2);
        assert!(!count.breakdown.contains_key("decoder"));
        let m = Model::classifier(ModelConfig::tiny(), HeadConfig::new(2, 4), 0).unwrap();
        assert_eq!(m.count_parameters().breakdown["head"], 8 * 256 + 256 + 256 * 4 + 4);
        let full = tiny().count_parameters();
        assert_eq!(full.total, full.breakdown.values().sum::<usize>());
    }

    #[test]
    fn load_matching_copies_backbone() {
        let pre = Model::pretraining(ModelConfig::tiny(), 1).unwrap();
        let mut cls = Model::classifier(ModelConfig::tiny(), HeadConfig::new(1, 2), 2).unwrap();
        let n = cls.load_matching(&pre.store).unwrap();
        assert_eq!(n, cls.store.len() - 2);
        let x = random3((1, 2, 256), 8);
        assert_eq!(pre.encode(x.view()).unwrap(), cls.encode(x.view()).unwrap());
        let mut other = ModelConfig::tiny();
        other.d_model = 4;
        let mut small = Model::classifier(other, HeadConfig::new(1, 2), 2).unwrap();
        assert!(matches!(small.load_matching(&pre.store), Err(Error::Checkpoint(_))));
    }
}
