use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::params::{Grads, ParamId, ParamStore, Trainable};
use crate::ssm::{ssm_kernel_backward, SsmConv, SsmParams};
use crate::{Error, Result};

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn view(store: &ParamStore, id: ParamId, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), store.get(id)).expect("parameter shape")
}

fn add_matrix(g: &mut Grads, id: ParamId, m: &Array2<f64>) {
    for (d, s) in g.slot(id).iter_mut().zip(m.iter()) {
        *d += s;
    }
}

fn add_row_sums(g: &mut Grads, id: ParamId, dy: &ArrayView2<f64>) {
    for (d, row) in g.slot(id).iter_mut().zip(dy.rows()) {
        *d += row.sum();
    }
}

/// Combines seed material into one well-mixed value (splitmix64 steps).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Positions `t` in `0..n_pos` with `0 <= t*stride + j - pad < len`.
fn valid_range(j: usize, stride: usize, pad: usize, len: usize, n_pos: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(j).div_ceil(stride);
    let hi = if len + pad > j { ((len + pad - j - 1) / stride + 1).min(n_pos) } else { 0 };
    lo..hi.max(lo)
}

/// `cols[c*k + j, t] = x[c, t*stride + j - pad]`, zero outside the signal.
pub(crate) fn im2col(x: ArrayView2<f64>, k: usize, stride: usize, pad: usize, n_pos: usize) -> Array2<f64> {
    let (c, len) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k, n_pos));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let xr = &src[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &mut dst[(ci * k + j) * n_pos..(ci * k + j + 1) * n_pos];
            let r = valid_range(j, stride, pad, len, n_pos);
            let off = r.start * stride + j - pad;
            for (d, s) in row[r.clone()].iter_mut().zip(xr[off..].iter().step_by(stride)) {
                *d = *s;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(
    cols: ArrayView2<f64>,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len: usize,
) -> Array2<f64> {
    let n_pos = cols.ncols();
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut x = Array2::<f64>::zeros((c, len));
    let dst = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let xr = &mut dst[ci * len..(ci + 1) * len];
        for j in 0..k {
            let row = &src[(ci * k + j) * n_pos..(ci * k + j + 1) * n_pos];
            let r = valid_range(j, stride, pad, len, n_pos);
            let off = r.start * stride + j - pad;
            for (d, s) in xr[off..].iter_mut().step_by(stride).zip(&row[r]) {
                *d += *s;
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        (in_channels, out_channels): (usize, usize),
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            vec![out_channels, in_channels, kernel],
            uniform(rng, out_channels * in_channels * kernel, bound),
        );
        let bias = store.add(format!("{prefix}.bias"), vec![out_channels], uniform(rng, out_channels, bound));
        Conv1d { weight, bias, in_channels, out_channels, kernel, stride, pad: (kernel - 1) / 2 }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.nrows() != self.in_channels || x.ncols() + 2 * self.pad < self.kernel {
            return Err(Error::shape(format!(
                "conv expects {} channels, got {:?}",
                self.in_channels,
                x.dim()
            )));
        }
        let cols = im2col(x, self.kernel, self.stride, self.pad, self.out_len(x.ncols()));
        let w = view(store, self.weight, self.out_channels, self.in_channels * self.kernel);
        let mut y = w.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(store.get(self.bias)) {
            row += b;
        }
        Ok((y, cols))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cols: &Array2<f64>,
        in_len: usize,
        dy: ArrayView2<f64>,
        trainable: &Trainable,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        if trainable.contains(self.weight) {
            add_matrix(grads, self.weight, &dy.dot(&cols.t()));
        }
        if trainable.contains(self.bias) {
            add_row_sums(grads, self.bias, &dy);
        }
        need_dx.then(|| {
            let w = view(store, self.weight, self.out_channels, self.in_channels * self.kernel);
            let dcols = w.t().dot(&dy);
            col2im(dcols.view(), self.in_channels, self.kernel, self.stride, self.pad, in_len)
        })
    }
}

/// Transposed convolution with output padding `stride - 1`, so the output is
/// exactly `stride` times longer than the input.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        (in_channels, out_channels): (usize, usize),
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((out_channels * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            vec![in_channels, out_channels, kernel],
            uniform(rng, in_channels * out_channels * kernel, bound),
        );
        let bias = store.add(format!("{prefix}.bias"), vec![out_channels], uniform(rng, out_channels, bound));
        ConvTranspose1d { weight, bias, in_channels, out_channels, kernel, stride, pad: (kernel - 1) / 2 }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel + self.stride - 1 - 2 * self.pad
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.in_channels || x.ncols() == 0 {
            return Err(Error::shape(format!(
                "transposed conv expects {} channels, got {:?}",
                self.in_channels,
                x.dim()
            )));
        }
        let w = view(store, self.weight, self.in_channels, self.out_channels * self.kernel);
        let cols = w.t().dot(&x);
        let mut y = col2im(
            cols.view(),
            self.out_channels,
            self.kernel,
            self.stride,
            self.pad,
            self.out_len(x.ncols()),
        );
        for (mut row, &b) in y.rows_mut().into_iter().zip(store.get(self.bias)) {
            row += b;
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        trainable: &Trainable,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let dcols = im2col(dy, self.kernel, self.stride, self.pad, x.ncols());
        if trainable.contains(self.weight) {
            add_matrix(grads, self.weight, &x.dot(&dcols.t()));
        }
        if trainable.contains(self.bias) {
            add_row_sums(grads, self.bias, &dy);
        }
        need_dx.then(|| {
            let w = view(store, self.weight, self.in_channels, self.out_channels * self.kernel);
            w.dot(&dcols)
        })
    }
}

/// Pointwise affine map over the channel axis of `[channels × len]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        (in_features, out_features): (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{prefix}.weight"),
            vec![out_features, in_features],
            uniform(rng, out_features * in_features, bound),
        );
        let bias = store.add(format!("{prefix}.bias"), vec![out_features], uniform(rng, out_features, bound));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.in_features {
            return Err(Error::shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.nrows()
            )));
        }
        let w = view(store, self.weight, self.out_features, self.in_features);
        let mut y = w.dot(&x);
        for (mut row, &b) in y.rows_mut().into_iter().zip(store.get(self.bias)) {
            row += b;
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        trainable: &Trainable,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        if trainable.contains(self.weight) {
            add_matrix(grads, self.weight, &dy.dot(&x.t()));
        }
        if trainable.contains(self.bias) {
            add_row_sums(grads, self.bias, &dy);
        }
        need_dx.then(|| view(store, self.weight, self.out_features, self.in_features).t().dot(&dy))
    }
}

/// Layer normalization across channels, independently at each time step.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{prefix}.gamma"), vec![channels], vec![1.0; channels]);
        let beta = store.add(format!("{prefix}.beta"), vec![channels], vec![0.0; channels]);
        ChannelNorm { gamma, beta, channels }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, NormCache)> {
        if x.nrows() != self.channels {
            return Err(Error::shape(format!("norm expects {} channels, got {}", self.channels, x.nrows())));
        }
        let c = self.channels as f64;
        let mean = x.sum_axis(Axis(0)) / c;
        let mut xhat = &x - &mean;
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(0)) / c;
        let rstd = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        xhat *= &rstd;
        let mut y = xhat.clone();
        let (g, b) = (store.get(self.gamma), store.get(self.beta));
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * g[i] + b[i]);
        }
        Ok((y, NormCache { xhat, rstd }))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &NormCache,
        dy: ArrayView2<f64>,
        trainable: &Trainable,
        grads: &mut Grads,
    ) -> Array2<f64> {
        if trainable.contains(self.gamma) {
            let s = grads.slot(self.gamma);
            for (i, (dr, xr)) in dy.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
                s[i] += dr.dot(&xr);
            }
        }
        if trainable.contains(self.beta) {
            add_row_sums(grads, self.beta, &dy);
        }
        let g = store.get(self.gamma);
        let mut dxhat = dy.to_owned();
        for (i, mut row) in dxhat.rows_mut().into_iter().enumerate() {
            row *= g[i];
        }
        let c = self.channels as f64;
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * c - &sum_d - &(&cache.xhat * &sum_dx);
        dx *= &(&cache.rstd / c);
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + fast_tanh(GELU_K * (v + GELU_C * v * v * v))))
}

pub fn gelu_backward(x: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(|v| {
        let t = fast_tanh(GELU_K * (v + GELU_C * v * v * v));
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
    });
    dx *= &dy;
    dx
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gated linear unit over channel halves: `a ⊙ σ(g)`.
pub fn glu(z: &Array2<f64>) -> Array2<f64> {
    let half = z.nrows() / 2;
    let a = z.slice(ndarray::s![..half, ..]);
    let g = z.slice(ndarray::s![half.., ..]);
    &a * &g.mapv(sigmoid)
}

pub fn glu_backward(z: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let half = z.nrows() / 2;
    let a = z.slice(ndarray::s![..half, ..]);
    let sg = z.slice(ndarray::s![half.., ..]).mapv(sigmoid);
    let mut dz = Array2::<f64>::zeros(z.dim());
    dz.slice_mut(ndarray::s![..half, ..]).assign(&(&dy * &sg));
    let dg = &dy * &a * &sg * &sg.mapv(|s| 1.0 - s);
    dz.slice_mut(ndarray::s![half.., ..]).assign(&dg);
    dz
}

/// Inverted-dropout mask (kept entries scaled by `1/(1-p)`).
pub fn dropout_mask(shape: (usize, usize), p: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Dropout mask when training is active, `None` in evaluation mode.
pub fn maybe_mask(shape: (usize, usize), p: f64, seed: Option<u64>) -> Option<Array2<f64>> {
    match seed {
        Some(s) if p > 0.0 => Some(dropout_mask(shape, p, s)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SsmIds {
    pub log_neg_re_a: ParamId,
    pub im_a: ParamId,
    pub b_re: ParamId,
    pub b_im: ParamId,
    pub c_re: ParamId,
    pub c_im: ParamId,
    pub d: ParamId,
    pub log_dt: ParamId,
}

impl SsmIds {
    pub fn all(&self) -> [ParamId; 8] {
        [self.log_neg_re_a, self.im_a, self.b_re, self.b_im, self.c_re, self.c_im, self.d, self.log_dt]
    }
}

/// One S4 module: SSM, GLU projection, dropout, residual, post-norm.
#[derive(Debug, Clone)]
pub struct S4Block {
    pub d_model: usize,
    pub n_modes: usize,
    pub ssm: SsmIds,
    pub mix: Linear,
    pub norm: ChannelNorm,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct S4Cache {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    mask: Option<Array2<f64>>,
    norm: NormCache,
}

impl S4Block {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        init: &SsmParams,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (d, m) = (init.d_model, init.n_modes);
        let mut add = |name: &str, shape: Vec<usize>, v: &Vec<f64>| {
            store.add(format!("{prefix}.ssm.{name}"), shape, v.clone())
        };
        let ssm = SsmIds {
            log_neg_re_a: add("log_neg_re_a", vec![d, m], &init.log_neg_re_a),
            im_a: add("im_a", vec![d, m], &init.im_a),
            b_re: add("b_re", vec![d, m], &init.b_re),
            b_im: add("b_im", vec![d, m], &init.b_im),
            c_re: add("c_re", vec![d, m], &init.c_re),
            c_im: add("c_im", vec![d, m], &init.c_im),
            d: add("d", vec![d], &init.d),
            log_dt: add("log_dt", vec![d], &init.log_dt),
        };
        let mix = Linear::new(store, &format!("{prefix}.mix"), (d, 2 * d), rng);
        let norm = ChannelNorm::new(store, &format!("{prefix}.norm"), d);
        S4Block { d_model: d, n_modes: m, ssm, mix, norm, dropout }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.ssm.all().to_vec();
        v.extend(self.mix.params());
        v.extend(self.norm.params());
        v
    }

    pub fn ssm_params(&self, store: &ParamStore) -> SsmParams {
        let g = |id| store.get(id).to_vec();
        SsmParams {
            d_model: self.d_model,
            n_modes: self.n_modes,
            log_neg_re_a: g(self.ssm.log_neg_re_a),
            im_a: g(self.ssm.im_a),
            b_re: g(self.ssm.b_re),
            b_im: g(self.ssm.b_im),
            c_re: g(self.ssm.c_re),
            c_im: g(self.ssm.c_im),
            d: g(self.ssm.d),
            log_dt: g(self.ssm.log_dt),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        conv: &SsmConv,
        x: ArrayView2<f64>,
        drop_seed: Option<u64>,
    ) -> Result<(Array2<f64>, S4Cache)> {
        let h = conv.forward(x)?;
        let z = self.mix.forward(store, h.view())?;
        let mut gated = glu(&z);
        let mask = maybe_mask(gated.dim(), self.dropout, drop_seed);
        if let Some(m) = &mask {
            gated *= m;
        }
        let sum = &x + &gated;
        let (y, norm) = self.norm.forward(store, sum.view())?;
        Ok((y, S4Cache { x: x.to_owned(), h, z, mask, norm }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &ParamStore,
        params: &SsmParams,
        conv: &SsmConv,
        cache: &S4Cache,
        dy: ArrayView2<f64>,
        trainable: &Trainable,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Result<Option<Array2<f64>>> {
        let dsum = self.norm.backward(store, &cache.norm, dy, trainable, grads);
        let ssm_trainable = trainable.any(&self.ssm.all());
        if !(need_dx || ssm_trainable || trainable.any(&self.mix.params())) {
            return Ok(None);
        }
        let mut dgated = dsum.clone();
        if let Some(m) = &cache.mask {
            dgated *= m;
        }
        let dz = glu_backward(&cache.z, dgated.view());
        let need_dh = need_dx || ssm_trainable;
        let dh = self.mix.backward(store, cache.h.view(), dz.view(), trainable, grads, need_dh);
        let Some(dh) = dh else { return Ok(None) };
        let (du, dk, dd) = conv.backward(cache.x.view(), dh.view())?;
        if ssm_trainable {
            let gp = ssm_kernel_backward(params, dk.view());
            let pairs: [(ParamId, &Vec<f64>); 8] = [
                (self.ssm.log_neg_re_a, &gp.log_neg_re_a),
                (self.ssm.im_a, &gp.im_a),
                (self.ssm.b_re, &gp.b_re),
                (self.ssm.b_im, &gp.b_im),
                (self.ssm.c_re, &gp.c_re),
                (self.ssm.c_im, &gp.c_im),
                (self.ssm.d, &dd),
                (self.ssm.log_dt, &gp.log_dt),
            ];
            for (id, src) in pairs {
                if trainable.contains(id) {
                    for (d, s) in grads.slot(id).iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Ok(need_dx.then(|| dsum + du))
    }
}
