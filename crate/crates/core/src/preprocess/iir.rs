//! Second-order sections and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

/// One biquad, normalized so that `a0 == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Biquad {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude of the frequency response at `f` Hz.
    pub fn gain_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let nr = self.b[0] + self.b[1] * c1 + self.b[2] * c2;
        let ni = -self.b[1] * s1 - self.b[2] * s2;
        let dr = 1.0 + self.a[0] * c1 + self.a[1] * c2;
        let di = -self.a[0] * s1 - self.a[1] * s2;
        ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc >= 0.0 {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        } else {
            a2.abs().sqrt()
        }
    }
}

/// Butterworth quality factors for an even order.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * order) as f64).sin()))
        .collect()
}

pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Vec<Biquad> {
    let w0 = 2.0 * PI * cutoff / fs;
    let (c, s) = (w0.cos(), w0.sin());
    butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let alpha = s / (2.0 * q);
            let b = [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0];
            Biquad::from_raw(b, 1.0 + alpha, -2.0 * c, 1.0 - alpha)
        })
        .collect()
}

pub fn butter_highpass(order: usize, cutoff: f64, fs: f64) -> Vec<Biquad> {
    let w0 = 2.0 * PI * cutoff / fs;
    let (c, s) = (w0.cos(), w0.sin());
    butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let alpha = s / (2.0 * q);
            let b = [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0];
            Biquad::from_raw(b, 1.0 + alpha, -2.0 * c, 1.0 - alpha)
        })
        .collect()
}

/// Second-order notch with the given quality factor (bandwidth = f0 / q).
pub fn notch(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * PI * f0 / fs;
    let (c, s) = (w0.cos(), w0.sin());
    let alpha = s / (2.0 * q);
    Biquad::from_raw([1.0, -2.0 * c, 1.0], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
}

/// Steady-state initial conditions of each section for a unit step input.
fn step_states(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut level = 1.0;
    sos.iter()
        .map(|s| {
            let g = s.dc_gain();
            let z2 = level * (s.b[2] - s.a[1] * g);
            let z1 = level * (g - s.b[0]);
            level *= g;
            [z1, z2]
        })
        .collect()
}

/// Causal cascade filter (transposed direct form II) with initial states
/// scaled by `x0`.
fn sosfilt_scaled(sos: &[Biquad], zi: &[[f64; 2]], x: &mut [f64]) {
    let x0 = x.first().copied().unwrap_or(0.0);
    for (s, z0) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z0[0] * x0, z0[1] * x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[0] * y + z2;
            z2 = s.b[2] * input - s.a[1] * y;
            *v = y;
        }
    }
}

/// Samples needed for the slowest pole to decay by 1e-3, used as edge padding.
fn settle_len(sos: &[Biquad]) -> usize {
    let r = sos.iter().map(Biquad::pole_radius).fold(0.0, f64::max);
    let base = 3 * (2 * sos.len() + 1);
    if r <= 0.0 || r >= 1.0 {
        return base;
    }
    base.max(((1e-3f64).ln() / r.ln()).ceil() as usize)
}

/// Zero-phase filtering: odd-extension padding, steady-state initial
/// conditions, then the cascade run forwards and backwards.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 || sos.is_empty() {
        return x.to_vec();
    }
    let pad = settle_len(sos).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    let zi = step_states(sos);
    sosfilt_scaled(sos, &zi, &mut ext);
    ext.reverse();
    sosfilt_scaled(sos, &zi, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Combined magnitude response of a cascade.
pub fn cascade_gain(sos: &[Biquad], f: f64, fs: f64) -> f64 {
    sos.iter().map(|s| s.gain_at(f, fs)).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_half_power_at_cutoff() {
        for order in [2, 4, 10] {
            let lp = butter_lowpass(order, 50.0, 250.0);
            let hp = butter_highpass(order, 0.5, 250.0);
            let half = 0.5f64.sqrt();
            assert!((cascade_gain(&lp, 50.0, 250.0) - half).abs() < 1e-9);
            assert!((cascade_gain(&hp, 0.5, 250.0) - half).abs() < 1e-9);
        }
    }

    #[test]
    fn notch_zero_at_center() {
        let n = notch(60.0, 30.0, 500.0);
        assert!(n.gain_at(60.0, 500.0) < 1e-12);
        assert!((n.gain_at(0.0, 500.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_passes_lowpass_unchanged() {
        let lp = butter_lowpass(4, 30.0, 250.0);
        let y = sosfiltfilt(&lp, &vec![3.0; 400]);
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-9));
    }
}
