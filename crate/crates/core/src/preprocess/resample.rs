//! Rational polyphase resampling with a Kaiser-windowed sinc anti-aliasing filter.

use std::f64::consts::PI;

const KAISER_BETA: f64 = 5.0;
const HALF_TAPS_PER_RATE: usize = 10;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced integer ratio `(up, down)` with `to / from = up / down`, taken at
/// millihertz resolution.
pub fn rational_ratio(from: f64, to: f64) -> (usize, usize) {
    let a = (from * 1000.0).round() as u64;
    let b = (to * 1000.0).round() as u64;
    let g = gcd(a, b).max(1);
    ((b / g) as usize, (a / g) as usize)
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Low-pass prototype with cutoff `1 / max(up, down)` of the upsampled Nyquist
/// rate, scaled so the DC gain equals `up`.
fn design_filter(up: usize, down: usize) -> (Vec<f64>, usize) {
    let max_rate = up.max(down);
    let half = HALF_TAPS_PER_RATE * max_rate;
    let len = 2 * half + 1;
    let cutoff = 1.0 / max_rate as f64;
    let i0b = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|n| {
            let m = n as f64 - half as f64;
            let arg = cutoff * m;
            let sinc = if arg == 0.0 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            cutoff * sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for v in &mut h {
        *v *= up as f64 / dc;
    }
    (h, half)
}

/// Resamples `x` by `up / down`; output length is `round(n * up / down)`.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let n = x.len();
    if up == down {
        return x.to_vec();
    }
    let n_out = ((n * up) as f64 / down as f64).round() as usize;
    let (h, half) = design_filter(up, down);
    let n_up = (n * up) as i64;
    (0..n_out)
        .map(|m| {
            // Position in the zero-stuffed domain, shifted by the filter delay.
            let t = (m * down + half) as i64;
            let mut j = t.rem_euclid(up as i64);
            let mut acc = 0.0;
            while (j as usize) < h.len() {
                let src = t - j;
                if src < 0 {
                    break;
                }
                if src < n_up {
                    acc += h[j as usize] * x[(src / up as i64) as usize];
                }
                j += up as i64;
            }
            acc
        })
        .collect()
}
