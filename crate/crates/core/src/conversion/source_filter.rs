//! LPC source-filter decomposition with exact resynthesis, and pitch
//! modification of the excitation by pitch-synchronous overlap-add.
//!
//! Each hop-sized segment is inverse filtered with the envelope estimated on
//! a window centred on it. Synthesis runs the same switched all-pole filter,
//! so an unmodified decomposition reconstructs its input up to rounding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::pitch::{track_f0, PitchConfig};
use super::ConversionError;
use crate::audio::{de_emphasis, pre_emphasis, AudioClip, Window};
use crate::features::lpc::{lpc_frame, LpcEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub lpc_order: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub pre_emphasis: f64,
    /// Pole-radius scale applied to every analysis envelope.
    pub bandwidth_gamma: f64,
    pub pitch: PitchConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            lpc_order: 18,
            frame_ms: 25.0,
            hop_ms: 10.0,
            pre_emphasis: 0.97,
            bandwidth_gamma: 0.994,
            pitch: PitchConfig::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<(), ConversionError> {
        let (frame_len, hop) = (self.frame_len(sample_rate), self.hop(sample_rate));
        let bad = |m: &str| Err(ConversionError::InvalidConfig(m.into()));
        if hop == 0 || frame_len < hop {
            return bad("need frame_ms >= hop_ms > 0");
        }
        if self.lpc_order == 0 || self.lpc_order >= frame_len {
            return bad("LPC order must be in 1..frame length");
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return bad("pre-emphasis must be in [0, 1)");
        }
        if !(self.bandwidth_gamma > 0.0 && self.bandwidth_gamma <= 1.0) {
            return bad("bandwidth gamma must be in (0, 1]");
        }
        let p = &self.pitch;
        if !(p.f0_min > 0.0 && p.f0_max > p.f0_min && p.f0_max < sample_rate as f64 / 4.0) {
            return bad("need 0 < f0_min < f0_max < sample_rate / 4");
        }
        Ok(())
    }
}

/// Excitation, per-segment envelopes and F0 track of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFilterDecomp {
    pub id: String,
    pub sample_rate: u32,
    pub hop: usize,
    pub frame_len: usize,
    pub pre_emphasis: f64,
    pub envelopes: Vec<LpcEnvelope>,
    pub residual: Vec<f64>,
    /// Hz per segment, 0 when unvoiced.
    pub f0: Vec<f64>,
    /// RMS of the windowed, pre-emphasized analysis frame.
    pub frame_rms: Vec<f64>,
}

impl SourceFilterDecomp {
    pub fn num_frames(&self) -> usize {
        self.envelopes.len()
    }

    /// Sample range `[start, end)` driven by envelope `m`.
    pub fn segment(&self, m: usize) -> (usize, usize) {
        let start = (m * self.hop).min(self.residual.len());
        (start, ((m + 1) * self.hop).min(self.residual.len()))
    }

    pub fn voiced_frames(&self) -> usize {
        self.f0.iter().filter(|f| **f > 0.0).count()
    }
}

pub fn analyze(clip: &AudioClip, cfg: &AnalysisConfig) -> Result<SourceFilterDecomp, ConversionError> {
    cfg.validate(clip.sample_rate)?;
    let frame_len = cfg.frame_len(clip.sample_rate);
    let hop = cfg.hop(clip.sample_rate);
    let y = pre_emphasis(&clip.samples, cfg.pre_emphasis);
    let n = y.len();
    let n_frames = n.div_ceil(hop);
    let window = Window::Hamming.coefficients(frame_len);
    let order = cfg.lpc_order;

    let mut envelopes = Vec::with_capacity(n_frames);
    let mut frame_rms = Vec::with_capacity(n_frames);
    let mut buf = vec![0.0; frame_len];
    for m in 0..n_frames {
        let centre = (m * hop + hop / 2) as isize;
        let start = centre - (frame_len / 2) as isize;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = start + j as isize;
            *slot = if idx >= 0 && (idx as usize) < n { y[idx as usize] * window[j] } else { 0.0 };
        }
        frame_rms.push((buf.iter().map(|v| v * v).sum::<f64>() / frame_len as f64).sqrt());
        envelopes.push(lpc_frame(&buf, order).bandwidth_expanded(cfg.bandwidth_gamma));
    }

    let mut residual = vec![0.0; n];
    for (m, env) in envelopes.iter().enumerate() {
        let (s, e) = (m * hop, ((m + 1) * hop).min(n));
        for i in s..e {
            let mut pred = 0.0;
            for (k, a) in env.coeffs.iter().enumerate() {
                if i > k {
                    pred += a * y[i - k - 1];
                }
            }
            residual[i] = y[i] - pred;
        }
    }

    let f0 = track_f0(&clip.samples, clip.sample_rate, hop, &cfg.pitch);
    Ok(SourceFilterDecomp {
        id: clip.id.clone(),
        sample_rate: clip.sample_rate,
        hop,
        frame_len,
        pre_emphasis: cfg.pre_emphasis,
        envelopes,
        residual,
        f0,
        frame_rms,
    })
}

pub fn synthesize(decomp: &SourceFilterDecomp) -> Result<AudioClip, ConversionError> {
    let n = decomp.residual.len();
    if decomp.envelopes.len() != n.div_ceil(decomp.hop.max(1)) {
        return Err(ConversionError::InvalidDecomposition(format!(
            "{} envelopes for {} samples at hop {}",
            decomp.envelopes.len(),
            n,
            decomp.hop
        )));
    }
    if let Some(m) = decomp.envelopes.iter().position(|e| !e.is_stable()) {
        return Err(ConversionError::UnstableEnvelope { frame: m });
    }
    let mut y = vec![0.0; n];
    for m in 0..decomp.num_frames() {
        let env = &decomp.envelopes[m];
        let (s, e) = decomp.segment(m);
        for i in s..e {
            let mut acc = decomp.residual[i];
            for (k, a) in env.coeffs.iter().enumerate() {
                if i > k {
                    acc += a * y[i - k - 1];
                }
            }
            y[i] = acc;
        }
    }
    let x = de_emphasis(&y, decomp.pre_emphasis);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ConversionError::NonFiniteOutput);
    }
    Ok(AudioClip::new(decomp.id.clone(), decomp.sample_rate, x)?)
}

/// Moves the pitch of the voiced stretches of `residual` from `f0` to
/// `target` (both per hop-sized segment; 0 = unvoiced). Length is unchanged.
pub fn psola(residual: &[f64], f0: &[f64], target: &[f64], hop: usize, sample_rate: u32) -> Vec<f64> {
    let n = residual.len();
    let sr = sample_rate as f64;
    let mut out = vec![0.0; n];
    let mut wsum = vec![0.0; n];
    let mut inside = vec![false; n];

    let frame_at = |t: usize, lo: usize, hi: usize| (t / hop).clamp(lo, hi);
    let mut m = 0;
    while m < f0.len() {
        if f0[m] <= 0.0 {
            m += 1;
            continue;
        }
        let m0 = m;
        while m < f0.len() && f0[m] > 0.0 {
            m += 1;
        }
        let m1 = m - 1;
        let (start, end) = ((m0 * hop).min(n), (m * hop).min(n));
        let period = |t: usize| sr / f0[frame_at(t, m0, m1)];
        let new_period = |t: usize| {
            let f = target[frame_at(t, m0, m1)];
            if f > 0.0 { sr / f } else { period(t) }
        };

        let epochs = find_epochs(residual, start, end, period);
        if epochs.len() < 2 {
            continue;
        }
        let last = *epochs.last().unwrap();
        let mut marks = Vec::new();
        let mut tau = epochs[0] as f64;
        while tau <= last as f64 {
            marks.push(tau.round() as usize);
            tau += new_period(tau.round() as usize).max(1.0);
        }
        let mut i = 0;
        for &mark in &marks {
            while i + 1 < epochs.len() && epochs[i + 1].abs_diff(mark) <= epochs[i].abs_diff(mark) {
                i += 1;
            }
            let t = epochs[i];
            let p_new = new_period(mark);
            let left = if i > 0 { epochs[i] - epochs[i - 1] } else { epochs[1] - epochs[0] } as f64;
            let right = if i + 1 < epochs.len() { epochs[i + 1] - epochs[i] } else { epochs[i] - epochs[i - 1] } as f64;
            overlap_add(residual, &mut out, &mut wsum, t, mark, left.min(p_new), right.min(p_new));
        }
        for flag in &mut inside[marks[0]..=(*marks.last().unwrap()).min(n - 1)] {
            *flag = true;
        }
    }
    for i in 0..n {
        if !inside[i] {
            out[i] += (1.0 - wsum[i]).clamp(0.0, 1.0) * residual[i];
        }
    }
    out
}

/// Glottal-pulse positions in `[start, end)`, one per local period, taken as
/// peaks of |residual|.
fn find_epochs(residual: &[f64], start: usize, end: usize, period: impl Fn(usize) -> f64) -> Vec<usize> {
    let argmax = |lo: usize, hi: usize| (lo..hi).max_by(|&a, &b| residual[a].abs().total_cmp(&residual[b].abs()));
    let mut epochs = Vec::new();
    let first_hi = (start + period(start).ceil() as usize).min(end);
    let Some(mut t) = argmax(start, first_hi) else {
        return epochs;
    };
    epochs.push(t);
    loop {
        let p = period(t);
        let lo = t + (0.7 * p).round() as usize;
        let hi = (t + (1.3 * p).round() as usize + 1).min(end);
        if lo >= hi {
            break;
        }
        t = argmax(lo, hi).unwrap();
        epochs.push(t);
    }
    epochs
}

/// Adds the Hann-weighted pitch cycle around `src` to `out`, centred at `dst`.
fn overlap_add(x: &[f64], out: &mut [f64], wsum: &mut [f64], src: usize, dst: usize, left: f64, right: f64) {
    let n = x.len() as isize;
    let (l, r) = (left.floor() as isize, right.floor() as isize);
    for d in -l..=r {
        let half = if d < 0 { left } else { right };
        if half <= 0.0 {
            continue;
        }
        let w = 0.5 * (1.0 + (PI * d as f64 / half).cos());
        let (s, o) = (src as isize + d, dst as isize + d);
        if o < 0 || o >= n {
            continue;
        }
        wsum[o as usize] += w;
        if s >= 0 && s < n {
            out[o as usize] += w * x[s as usize];
        }
    }
}
