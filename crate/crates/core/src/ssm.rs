//! Diagonal state-space sequence layer.
//!
//! Each feature channel `h` runs an independent linear system with diagonal
//! complex state matrix. With zero-order-hold discretization the layer is the
//! causal convolution
//!
//! ```text
//! y[l] = Σ_{j<=l} K[j] u[l-j] + D u[l]
//! K[l] = Re Σ_n C_n B̃_n z_n^l,   z_n = exp(Δ A_n),   B̃_n = (z_n - 1) / A_n · B_n
//! ```
//!
//! Stored modes stand for conjugate pairs of the real state space, so an
//! `n_state`-dimensional system keeps `n_state / 2` modes. `Re(A) = -exp(ρ)`
//! keeps every mode stable whatever value `ρ` takes.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DT_MIN: f64 = 0.001;
pub const DT_MAX: f64 = 0.1;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_pair(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Per-channel, per-mode parameters; mode arrays are `[d_model × n_modes]`
/// row-major. The same struct holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    pub d_model: usize,
    pub n_modes: usize,
    pub log_neg_re_a: Vec<f64>,
    pub im_a: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub d: Vec<f64>,
    pub log_dt: Vec<f64>,
}

impl SsmParams {
    pub fn zeros(d_model: usize, n_modes: usize) -> Self {
        let dm = d_model * n_modes;
        SsmParams {
            d_model,
            n_modes,
            log_neg_re_a: vec![0.0; dm],
            im_a: vec![0.0; dm],
            b_re: vec![0.0; dm],
            b_im: vec![0.0; dm],
            c_re: vec![0.0; dm],
            c_im: vec![0.0; dm],
            d: vec![0.0; d_model],
            log_dt: vec![0.0; d_model],
        }
    }

    pub fn a(&self, h: usize, n: usize) -> Complex64 {
        let i = h * self.n_modes + n;
        Complex64::new(-self.log_neg_re_a[i].exp(), self.im_a[i])
    }

    pub fn b(&self, h: usize, n: usize) -> Complex64 {
        let i = h * self.n_modes + n;
        Complex64::new(self.b_re[i], self.b_im[i])
    }

    pub fn c(&self, h: usize, n: usize) -> Complex64 {
        let i = h * self.n_modes + n;
        Complex64::new(self.c_re[i], self.c_im[i])
    }

    pub fn dt(&self, h: usize) -> f64 {
        self.log_dt[h].exp()
    }

    /// Discrete pole `exp(Δ A)` and input vector `(exp(Δ A) - 1) / A · B`.
    pub fn discretize(&self, h: usize, n: usize) -> (Complex64, Complex64) {
        let a = self.a(h, n);
        let z = (a * self.dt(h)).exp();
        (z, (z - 1.0) / a * self.b(h, n))
    }

    pub fn n_params(&self) -> usize {
        6 * self.d_model * self.n_modes + 2 * self.d_model
    }
}

/// Diagonal-linear initialization: `A_n = -1/2 + iπn`, `B = 1`, complex
/// Gaussian `C`, `Δ` log-uniform on `[0.001, 0.1]`, Gaussian skip `D`.
pub fn init_ssm(d_model: usize, n_state: usize, seed: u64) -> Result<SsmParams> {
    if n_state == 0 || n_state % 2 != 0 {
        return Err(Error::param(format!("state size must be even and positive, got {n_state}")));
    }
    let m = n_state / 2;
    let mut p = SsmParams::zeros(d_model, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for h in 0..d_model {
        p.log_dt[h] = rng.gen_range(DT_MIN.ln()..=DT_MAX.ln());
        p.d[h] = StandardNormal.sample(&mut rng);
        for n in 0..m {
            let i = h * m + n;
            p.log_neg_re_a[i] = 0.5f64.ln();
            p.im_a[i] = PI * n as f64;
            p.b_re[i] = 1.0;
            p.c_re[i] = StandardNormal.sample(&mut rng);
            p.c_im[i] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Convolution kernel `[d_model × len]`.
pub fn ssm_kernel(p: &SsmParams, len: usize) -> Array2<f64> {
    let mut k = Array2::<f64>::zeros((p.d_model, len));
    for h in 0..p.d_model {
        let mut row = k.row_mut(h);
        for n in 0..p.n_modes {
            let (z, bbar) = p.discretize(h, n);
            let mut w = p.c(h, n) * bbar;
            for v in row.iter_mut() {
                *v += w.re;
                w *= z;
            }
        }
    }
    k
}

/// Gradient of a scalar loss with respect to the parameters, given its
/// gradient `dk` with respect to the kernel. `d` is left at zero.
pub fn ssm_kernel_backward(p: &SsmParams, dk: ArrayView2<f64>) -> SsmParams {
    let mut g = SsmParams::zeros(p.d_model, p.n_modes);
    let len = dk.ncols();
    for h in 0..p.d_model {
        let dt = p.dt(h);
        let row = dk.row(h);
        let mut g_dt = 0.0;
        for n in 0..p.n_modes {
            let i = h * p.n_modes + n;
            let a = p.a(h, n);
            let b = p.b(h, n);
            let c = p.c(h, n);
            let (z, bbar) = p.discretize(h, n);
            let w = c * bbar;

            // Σ g_l conj(z)^l  and  Σ g_l l conj(z)^(l-1)
            let zc = z.conj();
            let mut pow = Complex64::new(1.0, 0.0);
            let mut prev = Complex64::new(0.0, 0.0);
            let mut s0 = Complex64::new(0.0, 0.0);
            let mut s1 = Complex64::new(0.0, 0.0);
            for l in 0..len {
                let gl = row[l];
                s0 += pow * gl;
                if l > 0 {
                    s1 += prev * (gl * l as f64);
                }
                prev = pow;
                pow *= zc;
            }
            let g_w = s0;
            let mut g_z = w.conj() * s1;

            let g_c = g_w * bbar.conj();
            let g_bbar = g_w * c.conj();
            let g_b = g_bbar * ((z - 1.0) / a).conj();
            g_z += g_bbar * (b / a).conj();
            let mut g_a = g_bbar * (-(z - 1.0) * b / (a * a)).conj();
            g_a += g_z * (z * dt).conj();
            g_dt += (g_z.conj() * a * z).re;

            g.c_re[i] = g_c.re;
            g.c_im[i] = g_c.im;
            g.b_re[i] = g_b.re;
            g.b_im[i] = g_b.im;
            g.log_neg_re_a[i] = g_a.re * a.re;
            g.im_a[i] = g_a.im;
        }
        g.log_dt[h] = g_dt * dt;
    }
    g
}

/// FFT convolution engine for one kernel and sequence length.
pub struct SsmConv {
    len: usize,
    nfft: usize,
    kernel: Array2<f64>,
    kernel_f: Vec<Vec<Complex64>>,
    d: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl SsmConv {
    pub fn new(p: &SsmParams, len: usize) -> Self {
        let kernel = ssm_kernel(p, len);
        let nfft = (2 * len).next_power_of_two();
        let (fwd, inv) = fft_pair(nfft);
        let kernel_f = kernel
            .rows()
            .into_iter()
            .map(|r| {
                let mut buf = padded(r.iter().copied(), nfft);
                fwd.process(&mut buf);
                buf
            })
            .collect();
        SsmConv {
            len,
            nfft,
            kernel,
            kernel_f,
            d: p.d.clone(),
            fwd,
            inv,
        }
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    fn check(&self, u: &ArrayView2<f64>) -> Result<()> {
        if u.dim() != (self.kernel.nrows(), self.len) {
            return Err(Error::shape(format!(
                "ssm expects [{} x {}], got {:?}",
                self.kernel.nrows(),
                self.len,
                u.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, u: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&u)?;
        let mut y = Array2::<f64>::zeros(u.dim());
        let scale = 1.0 / self.nfft as f64;
        for (h, urow) in u.rows().into_iter().enumerate() {
            let mut buf = padded(urow.iter().copied(), self.nfft);
            self.fwd.process(&mut buf);
            for (v, k) in buf.iter_mut().zip(&self.kernel_f[h]) {
                *v *= k;
            }
            self.inv.process(&mut buf);
            let d = self.d[h];
            for ((dst, c), &x) in y.row_mut(h).iter_mut().zip(&buf).zip(urow.iter()) {
                *dst = c.re * scale + d * x;
            }
        }
        Ok(y)
    }

    /// Returns `(du, dK, dD)` for output gradient `dy`.
    pub fn backward(
        &self,
        u: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Vec<f64>)> {
        self.check(&u)?;
        self.check(&dy)?;
        let (dm, len) = u.dim();
        let scale = 1.0 / self.nfft as f64;
        let mut du = Array2::<f64>::zeros((dm, len));
        let mut dk = Array2::<f64>::zeros((dm, len));
        let mut dd = vec![0.0; dm];
        for h in 0..dm {
            let urow = u.row(h);
            let gy = dy.row(h);
            dd[h] = urow.iter().zip(gy.iter()).map(|(a, b)| a * b).sum();

            let mut gf = padded(gy.iter().copied(), self.nfft);
            self.fwd.process(&mut gf);
            let mut uf = padded(urow.iter().copied(), self.nfft);
            self.fwd.process(&mut uf);

            // du[t] = Σ_s dy[s] K[s - t]
            let mut a: Vec<Complex64> =
                gf.iter().zip(&self.kernel_f[h]).map(|(g, k)| g * k.conj()).collect();
            self.inv.process(&mut a);
            // dK[l] = Σ_t dy[t] u[t - l]
            let mut b: Vec<Complex64> = gf.iter().zip(&uf).map(|(g, x)| g * x.conj()).collect();
            self.inv.process(&mut b);

            let d = self.d[h];
            for t in 0..len {
                du[[h, t]] = a[t].re * scale + d * gy[t];
                dk[[h, t]] = b[t].re * scale;
            }
        }
        Ok((du, dk, dd))
    }
}

fn padded(it: impl Iterator<Item = f64>, n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = it.map(|v| Complex64::new(v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    buf
}

/// FFT-convolution forward over a batch `[batch × d_model × len]`.
pub fn ssm_apply(p: &SsmParams, u: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (b, dm, len) = u.dim();
    if dm != p.d_model {
        return Err(Error::shape(format!("ssm expects {} channels, got {dm}", p.d_model)));
    }
    let conv = SsmConv::new(p, len);
    let mut y = Array3::<f64>::zeros((b, dm, len));
    for i in 0..b {
        let yi = conv.forward(u.index_axis(ndarray::Axis(0), i))?;
        y.index_axis_mut(ndarray::Axis(0), i).assign(&yi);
    }
    Ok(y)
}

/// Step-by-step state recurrence, the reference for [`ssm_apply`]:
/// `x_l = z ⊙ x_{l-1} + B̃ u_l`, `y_l = Re(C·x_l) + D u_l`.
pub fn ssm_recurrence(p: &SsmParams, u: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (b, dm, len) = u.dim();
    if dm != p.d_model {
        return Err(Error::shape(format!("ssm expects {} channels, got {dm}", p.d_model)));
    }
    let mut y = Array3::<f64>::zeros((b, dm, len));
    for h in 0..dm {
        let modes: Vec<(Complex64, Complex64, Complex64)> = (0..p.n_modes)
            .map(|n| {
                let (z, bbar) = p.discretize(h, n);
                (z, bbar, p.c(h, n))
            })
            .collect();
        for i in 0..b {
            let mut state = vec![Complex64::new(0.0, 0.0); p.n_modes];
            for l in 0..len {
                let x = u[[i, h, l]];
                let mut out = p.d[h] * x;
                for (s, (z, bbar, c)) in state.iter_mut().zip(&modes) {
                    *s = *z * *s + *bbar * x;
                    out += (*c * *s).re;
                }
                y[[i, h, l]] = out;
            }
        }
    }
    Ok(y)
}
