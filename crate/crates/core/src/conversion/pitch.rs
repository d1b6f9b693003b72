//! Frame-synchronous F0 estimation by normalized cross-correlation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Correlation window length in milliseconds.
    pub window_ms: f64,
    /// Minimum peak normalized correlation for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS is this many dB below the loudest frame are unvoiced.
    pub silence_db: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            f0_min: 60.0,
            f0_max: 400.0,
            window_ms: 40.0,
            voicing_threshold: 0.5,
            silence_db: 45.0,
        }
    }
}

/// Absolute RMS below which a frame is treated as silence.
const ABS_SILENCE_RMS: f64 = 1e-5;

/// F0 in Hz for each hop-sized segment of `x` (0 = unvoiced). Segment `m`
/// covers samples `[m*hop, (m+1)*hop)`; the correlation window is centred on
/// the segment.
pub fn track_f0(x: &[f64], sample_rate: u32, hop: usize, cfg: &PitchConfig) -> Vec<f64> {
    let n_frames = x.len().div_ceil(hop);
    let sr = sample_rate as f64;
    let win = ((cfg.window_ms * sr / 1000.0).round() as usize).max(2);
    let lag_min = ((sr / cfg.f0_max).floor() as usize).max(2);
    let lag_max = (sr / cfg.f0_min).ceil() as usize;

    let centres: Vec<usize> = (0..n_frames).map(|m| m * hop + hop / 2).collect();
    let rms: Vec<f64> = centres
        .iter()
        .map(|&c| {
            let (lo, hi) = span(c, win, x.len());
            let e: f64 = x[lo..hi].iter().map(|v| v * v).sum();
            (e / win as f64).sqrt()
        })
        .collect();
    let loudest = rms.iter().cloned().fold(0.0, f64::max);
    let gate = (loudest * 10f64.powf(-cfg.silence_db / 20.0)).max(ABS_SILENCE_RMS);

    let mut ncc = vec![0.0; lag_max + 2];
    centres
        .iter()
        .zip(&rms)
        .map(|(&c, &r)| {
            if r < gate {
                return 0.0;
            }
            let start = c.saturating_sub(win / 2);
            if start + win + lag_min >= x.len() {
                return 0.0;
            }
            let hi_lag = lag_max.min(x.len() - start - win);
            let a = &x[start..start + win];
            let ea: f64 = a.iter().map(|v| v * v).sum();
            let mut best = f64::NEG_INFINITY;
            for lag in lag_min..=hi_lag {
                let b = &x[start + lag..start + lag + win];
                let (mut num, mut eb) = (0.0, 0.0);
                for (p, q) in a.iter().zip(b) {
                    num += p * q;
                    eb += q * q;
                }
                let den = (ea * eb).sqrt();
                ncc[lag] = if den > 0.0 { num / den } else { 0.0 };
                best = best.max(ncc[lag]);
            }
            if best < cfg.voicing_threshold {
                return 0.0;
            }
            // first local peak that comes close to the global one avoids
            // picking a multiple of the period
            let lag = (lag_min..=hi_lag)
                .find(|&l| {
                    ncc[l] >= 0.9 * best
                        && (l == lag_min || ncc[l] >= ncc[l - 1])
                        && (l == hi_lag || ncc[l] >= ncc[l + 1])
                })
                .unwrap_or(lag_min);
            let frac = if lag > lag_min && lag < hi_lag {
                parabolic_offset(ncc[lag - 1], ncc[lag], ncc[lag + 1])
            } else {
                0.0
            };
            sr / (lag as f64 + frac)
        })
        .collect()
}

fn span(centre: usize, len: usize, n: usize) -> (usize, usize) {
    let lo = centre.saturating_sub(len / 2).min(n);
    (lo, (lo + len).min(n))
}

fn parabolic_offset(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    }
}

/// Median of the voiced entries, if any.
pub fn median_voiced(track: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = track.iter().copied().filter(|f| *f > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
