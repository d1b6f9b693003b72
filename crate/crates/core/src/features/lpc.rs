//! Linear prediction: autocorrelation, Levinson-Durbin, cepstral conversion.
//!
//! Predictor convention: x[n] ~ sum_{k=1..p} a[k] x[n-k], so the analysis
//! filter is A(z) = 1 - sum a[k] z^-k and the synthesis filter is 1/A(z).

use serde::{Deserialize, Serialize};

use crate::audio::FrameSequence;

/// All-pole spectral envelope of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpcEnvelope {
    /// Predictor coefficients a[1..=p].
    pub coeffs: Vec<f64>,
    /// Square root of the prediction-error power.
    pub gain: f64,
}

impl LpcEnvelope {
    pub fn zeros(order: usize) -> Self {
        Self {
            coeffs: vec![0.0; order],
            gain: 0.0,
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn error_power(&self) -> f64 {
        self.gain * self.gain
    }

    /// Scales pole radii by `gamma` (a[k] -> gamma^k a[k]).
    pub fn bandwidth_expanded(&self, gamma: f64) -> Self {
        let mut g = 1.0;
        let coeffs = self
            .coeffs
            .iter()
            .map(|a| {
                g *= gamma;
                a * g
            })
            .collect();
        Self {
            coeffs,
            gain: self.gain,
        }
    }

    /// True when every pole of 1/A(z) lies strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        reflection_from_predictor(&self.coeffs).is_some()
    }

    /// Power response |G / A(e^jw)|^2 at normalized angular frequency `w`.
    pub fn power_response(&self, w: f64) -> f64 {
        let (mut re, mut im) = (1.0, 0.0);
        for (k, a) in self.coeffs.iter().enumerate() {
            let phase = w * (k + 1) as f64;
            re -= a * phase.cos();
            im += a * phase.sin();
        }
        self.error_power() / (re * re + im * im).max(1e-300)
    }
}

/// Biased autocorrelation r[0..=max_lag], normalized by the frame length.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mut r = vec![0.0; max_lag + 1];
    if n == 0 {
        return r;
    }
    for (lag, slot) in r.iter_mut().enumerate() {
        if lag >= n {
            break;
        }
        let s: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
        *slot = s / n as f64;
    }
    r
}

/// Solution of the order-p normal equations.
#[derive(Debug, Clone, PartialEq)]
pub struct LevinsonSolution {
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    pub error: f64,
}

/// Levinson-Durbin recursion on r[0..=order].
///
/// A zero-energy input yields zero coefficients and zero error. If the
/// recursion loses positive definiteness numerically, the remaining orders are
/// left at zero.
pub fn levinson_durbin(r: &[f64], order: usize) -> LevinsonSolution {
    assert!(r.len() > order, "need r[0..=order]");
    let mut a = vec![0.0; order];
    let mut reflection = Vec::with_capacity(order);
    let mut err = r[0];
    if !(err > 0.0) {
        return LevinsonSolution {
            coeffs: a,
            reflection: vec![0.0; order],
            error: 0.0,
        };
    }
    let mut prev = vec![0.0; order];
    for i in 1..=order {
        let mut acc = r[i];
        for j in 1..i {
            acc -= a[j - 1] * r[i - j];
        }
        let k = acc / err;
        if !k.is_finite() || k.abs() >= 1.0 || err <= r[0] * 1e-14 {
            break;
        }
        prev[..i - 1].copy_from_slice(&a[..i - 1]);
        for j in 1..i {
            a[j - 1] = prev[j - 1] - k * prev[i - j - 1];
        }
        a[i - 1] = k;
        reflection.push(k);
        err *= 1.0 - k * k;
    }
    reflection.resize(order, 0.0);
    LevinsonSolution {
        coeffs: a,
        reflection,
        error: err,
    }
}

/// Step-down recursion; `None` when some reflection coefficient has |k| >= 1.
pub fn reflection_from_predictor(coeffs: &[f64]) -> Option<Vec<f64>> {
    let mut a = coeffs.to_vec();
    let mut ks = vec![0.0; a.len()];
    for i in (1..=a.len()).rev() {
        let k = a[i - 1];
        if !k.is_finite() || k.abs() >= 1.0 {
            return None;
        }
        ks[i - 1] = k;
        let denom = 1.0 - k * k;
        let prev: Vec<f64> = (1..i).map(|j| (a[j - 1] + k * a[i - j - 1]) / denom).collect();
        a[..i - 1].copy_from_slice(&prev);
    }
    Some(ks)
}

pub fn lpc_frame(frame: &[f64], order: usize) -> LpcEnvelope {
    let r = autocorrelation(frame, order);
    let sol = levinson_durbin(&r, order);
    LpcEnvelope {
        coeffs: sol.coeffs,
        gain: sol.error.max(0.0).sqrt(),
    }
}

/// Per-frame LPC envelopes.
pub fn lpc(frames: &FrameSequence, order: usize) -> Vec<LpcEnvelope> {
    assert!(order < frames.frame_len.max(1), "LPC order must be below frame length");
    frames.iter().map(|f| lpc_frame(f, order)).collect()
}

/// LPC cepstrum c[1..=n_ceps] of 1/A(z) (the gain term c[0] is excluded).
pub fn lpc_to_cepstrum(env: &LpcEnvelope, n_ceps: usize) -> Vec<f64> {
    let a = &env.coeffs;
    let p = a.len();
    // c[0] slot unused so indices match the recursion
    let mut c = vec![0.0; n_ceps + 1];
    for n in 1..=n_ceps {
        let mut acc = if n <= p { a[n - 1] } else { 0.0 };
        let lo = if n > p { n - p } else { 1 };
        for k in lo..n {
            acc += (k as f64 / n as f64) * c[k] * a[n - k - 1];
        }
        c[n] = acc;
    }
    c.remove(0);
    c
}
