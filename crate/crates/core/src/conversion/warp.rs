//! Bilinear frequency warping of spectral envelopes in the cepstral domain.
//!
//! Substituting z^-1 -> (z^-1 - a) / (1 - a z^-1) maps angular frequency w to
//! `warp_frequency(w, a)`. With a > 0 spectral features move up in frequency.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::features::lpc::{levinson_durbin, lpc_to_cepstrum, LpcEnvelope};

/// Largest usable warp magnitude.
pub const MAX_WARP: f64 = 0.349;

/// Image of angular frequency `w` under the bilinear warp with parameter `alpha`.
pub fn warp_frequency(w: f64, alpha: f64) -> f64 {
    w + 2.0 * (alpha * w.sin()).atan2(1.0 - alpha * w.cos())
}

/// Recursive cepstral frequency transform: returns `out_len` coefficients of
/// the warped cepstrum. `c[0]` is the log gain term.
pub fn freqt(c: &[f64], out_len: usize, alpha: f64) -> Vec<f64> {
    let beta = 1.0 - alpha * alpha;
    let mut d = vec![0.0; out_len];
    let mut prev = vec![0.0; out_len];
    for &ci in c.iter().rev() {
        std::mem::swap(&mut d, &mut prev);
        if out_len == 0 {
            continue;
        }
        d[0] = ci + alpha * prev[0];
        if out_len > 1 {
            d[1] = beta * prev[0] + alpha * prev[1];
        }
        for j in 2..out_len {
            d[j] = prev[j - 1] + alpha * (prev[j] - d[j - 1]);
        }
    }
    d
}

/// Warp coordinate `a` in `[-MAX_WARP, MAX_WARP]` minimizing
/// `|freqt(speaker, -a) - reference|` over coefficients 1.., i.e. the warp that
/// carries `reference` onto `speaker`.
pub fn fit_warp_alpha(speaker: &[f64], reference: &[f64]) -> f64 {
    fit_warp_alpha_within(speaker, reference, MAX_WARP)
}

/// [`fit_warp_alpha`] over `[-limit, limit]`.
pub fn fit_warp_alpha_within(speaker: &[f64], reference: &[f64], limit: f64) -> f64 {
    let n = speaker.len().min(reference.len());
    let cost = |a: f64| -> f64 {
        let w = freqt(&speaker[..n], n, -a);
        // the gain term carries loudness, not vocal tract length
        w.iter().zip(&reference[..n]).skip(1).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    let steps = (200.0 * limit).ceil().max(2.0) as usize;
    let grid = |i: usize| -limit + 2.0 * limit * i as f64 / steps as f64;
    let best = (0..=steps)
        .min_by(|&i, &j| cost(grid(i)).total_cmp(&cost(grid(j))))
        .unwrap_or(steps / 2);
    let (mut lo, mut hi) = (grid(best.saturating_sub(1)), grid((best + 1).min(steps)));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (cost(x1), cost(x2));
    for _ in 0..60 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = cost(x2);
        }
    }
    (0.5 * (lo + hi)).clamp(-limit, limit)
}

/// Warps all-pole envelopes by refitting LPC to the warped log spectrum.
#[derive(Clone)]
pub struct EnvelopeWarper {
    n_ceps: usize,
    fft_len: usize,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for EnvelopeWarper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnvelopeWarper")
            .field("n_ceps", &self.n_ceps)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl EnvelopeWarper {
    pub fn new(n_ceps: usize, fft_len: usize) -> Self {
        let ifft = FftPlanner::new().plan_fft_inverse(fft_len);
        Self { n_ceps, fft_len, ifft }
    }

    /// Envelope of the same order whose spectrum is `env` warped by `alpha`.
    /// Gain follows the warped spectrum; a silent envelope stays silent.
    pub fn warp(&self, env: &LpcEnvelope, alpha: f64) -> LpcEnvelope {
        if env.gain <= 0.0 || alpha == 0.0 {
            return env.clone();
        }
        let mut c = Vec::with_capacity(self.n_ceps + 1);
        c.push(env.gain.ln());
        c.extend(lpc_to_cepstrum(env, self.n_ceps));
        let cw = freqt(&c, self.n_ceps + 1, alpha);

        let n = self.fft_len;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|k| {
                let w = 2.0 * PI * k as f64 / n as f64;
                let log_amp: f64 = cw[0] + cw.iter().enumerate().skip(1).map(|(m, v)| v * (m as f64 * w).cos()).sum::<f64>();
                Complex::new((2.0 * log_amp).exp(), 0.0)
            })
            .collect();
        self.ifft.process(&mut buf);
        let order = env.order();
        let r: Vec<f64> = buf[..=order].iter().map(|z| z.re / n as f64).collect();
        let sol = levinson_durbin(&r, order);
        LpcEnvelope {
            coeffs: sol.coeffs,
            gain: sol.error.max(0.0).sqrt(),
        }
    }
}
