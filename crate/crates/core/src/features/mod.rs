//! Speaker-identification features: MFCC and LPC cepstra, stacked per frame
//! and normalized per utterance.

pub mod lpc;
pub mod mfcc;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, FrameSequence, Window};

pub use lpc::{lpc, lpc_to_cepstrum, LpcEnvelope};
pub use mfcc::{mfcc, MfccExtractor};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature configuration: {0}")]
    ConfigInvalid(String),
    #[error("frame count mismatch: {0} vs {1}")]
    FrameCountMismatch(usize, usize),
    #[error("fingerprint mismatch: {expected} vs {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("non-finite feature value at row {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

/// Identity of the configuration that produced a feature matrix. Matrices
/// and models with different fingerprints are never mixed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    /// Sample rate, frame length, hop, window and pre-emphasis.
    pub framing: String,
    /// Feature families and their sizes.
    pub content: String,
}

impl Fingerprint {
    pub fn framing_of(frames: &FrameSequence) -> String {
        format!(
            "sr{}/f{}/h{}/{}",
            frames.sample_rate, frames.frame_len, frames.hop, frames.window
        )
    }

    pub fn ensure_eq(&self, other: &Fingerprint) -> Result<(), FeatureError> {
        if self != other {
            return Err(FeatureError::FingerprintMismatch {
                expected: self.to_string(),
                found: other.to_string(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.framing, self.content)
    }
}

/// Row-major per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    dim: usize,
    fingerprint: Fingerprint,
}

impl FeatureMatrix {
    pub fn from_flat(
        data: Vec<f64>,
        dim: usize,
        fingerprint: Fingerprint,
    ) -> Result<Self, FeatureError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(FeatureError::ConfigInvalid(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(i / dim));
        }
        Ok(Self {
            data,
            dim,
            fingerprint,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], fingerprint: Fingerprint) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::ConfigInvalid("ragged rows".into()));
        }
        Self::from_flat(rows.concat(), dim, fingerprint)
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn with_fingerprint(mut self, fingerprint: Fingerprint) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    /// Stacks matrices vertically (pooling frames across utterances).
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self, FeatureError> {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FeatureError::ConfigInvalid("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for m in iter {
            out.fingerprint.ensure_eq(&m.fingerprint)?;
            if m.dim != out.dim {
                return Err(FeatureError::ConfigInvalid("dimension mismatch".into()));
            }
            out.data.extend_from_slice(&m.data);
        }
        Ok(out)
    }
}

/// Row-wise concatenation of two frame-aligned matrices, optionally followed
/// by per-utterance mean/variance normalization.
pub fn stack_features(
    mfcc: &FeatureMatrix,
    lpc_ceps: &FeatureMatrix,
    cmvn: bool,
) -> Result<FeatureMatrix, FeatureError> {
    if mfcc.num_frames() != lpc_ceps.num_frames() {
        return Err(FeatureError::FrameCountMismatch(
            mfcc.num_frames(),
            lpc_ceps.num_frames(),
        ));
    }
    if mfcc.fingerprint.framing != lpc_ceps.fingerprint.framing {
        return Err(FeatureError::FingerprintMismatch {
            expected: mfcc.fingerprint.to_string(),
            found: lpc_ceps.fingerprint.to_string(),
        });
    }
    let dim = mfcc.dim + lpc_ceps.dim;
    let mut data = Vec::with_capacity(mfcc.num_frames() * dim);
    for (a, b) in mfcc.rows().zip(lpc_ceps.rows()) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    if cmvn {
        normalize_columns(&mut data, dim);
    }
    let content = format!(
        "{}+{}{}",
        mfcc.fingerprint.content,
        lpc_ceps.fingerprint.content,
        if cmvn { "+cmvn" } else { "" }
    );
    FeatureMatrix::from_flat(
        data,
        dim,
        Fingerprint {
            framing: mfcc.fingerprint.framing.clone(),
            content,
        },
    )
}

/// Zero mean, unit (population) variance per column; constant columns become 0.
pub fn normalize_columns(data: &mut [f64], dim: usize) {
    let n = data.len() / dim;
    if n == 0 {
        return;
    }
    for d in 0..dim {
        let mean = (0..n).map(|i| data[i * dim + d]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * dim + d] - mean).powi(2)).sum::<f64>() / n as f64;
        let constant = var <= f64::EPSILON * f64::EPSILON * mean.abs().max(1.0).powi(2);
        let inv = if constant { 0.0 } else { 1.0 / var.sqrt() };
        for i in 0..n {
            let v = &mut data[i * dim + d];
            *v = (*v - mean) * inv;
        }
    }
}

/// Front-end settings. Every field that changes the feature space is part of
/// the fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub window: Window,
    pub pre_emphasis: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub lpc_order: usize,
    pub n_lpc_ceps: usize,
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            frame_ms: 25.0,
            hop_ms: 10.0,
            window: Window::Hamming,
            pre_emphasis: 0.97,
            n_mels: 26,
            n_mfcc: 13,
            lpc_order: 12,
            n_lpc_ceps: 12,
            cmvn: true,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn dim(&self) -> usize {
        self.n_mfcc + self.n_lpc_ceps
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            framing: format!(
                "sr{}/f{}/h{}/{}/pe{}",
                self.sample_rate,
                self.frame_len(),
                self.hop(),
                self.window,
                self.pre_emphasis
            ),
            content: format!(
                "mfcc{}x{}+lpcc{}x{}{}",
                self.n_mels,
                self.n_mfcc,
                self.lpc_order,
                self.n_lpc_ceps,
                if self.cmvn { "+cmvn" } else { "" }
            ),
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.sample_rate == 0 || !(self.hop_ms > 0.0) || self.frame_ms < self.hop_ms {
            return Err(FeatureError::ConfigInvalid("bad framing".into()));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(FeatureError::ConfigInvalid("pre-emphasis must be in [0, 1)".into()));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(FeatureError::ConfigInvalid("need 0 < n_mfcc <= n_mels".into()));
        }
        if self.lpc_order == 0 || self.lpc_order >= self.frame_len() || self.n_lpc_ceps == 0 {
            return Err(FeatureError::ConfigInvalid("bad LPC order".into()));
        }
        Ok(())
    }
}

/// Builds the stacked MFCC + LPC-cepstrum features of a clip.
pub struct FeatureExtractor {
    config: FeatureConfig,
    mfcc: MfccExtractor,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self, FeatureError> {
        config.validate()?;
        let mfcc = MfccExtractor::new(config.frame_len(), config.n_mels, config.n_mfcc, config.sample_rate)?;
        Ok(Self { config, mfcc })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.config.fingerprint()
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        let cfg = &self.config;
        clip.ensure_rate(cfg.sample_rate)?;
        let emphasized = audio::pre_emphasis(&clip.samples, cfg.pre_emphasis);
        let frames = audio::frame_samples(&emphasized, cfg.sample_rate, cfg.frame_len(), cfg.hop(), cfg.window);
        let n = frames.num_frames();
        let framing = Fingerprint::framing_of(&frames);
        let mut mf = Vec::with_capacity(n * cfg.n_mfcc);
        let mut lc = Vec::with_capacity(n * cfg.n_lpc_ceps);
        for f in frames.iter() {
            mf.extend(self.mfcc.coefficients(f));
            lc.extend(lpc_to_cepstrum(&lpc::lpc_frame(f, cfg.lpc_order), cfg.n_lpc_ceps));
        }
        let mfcc = FeatureMatrix::from_flat(mf, cfg.n_mfcc, Fingerprint { framing: framing.clone(), content: "mfcc".into() })?;
        let lpcc = FeatureMatrix::from_flat(lc, cfg.n_lpc_ceps, Fingerprint { framing, content: "lpcc".into() })?;
        Ok(stack_features(&mfcc, &lpcc, cfg.cmvn)?.with_fingerprint(cfg.fingerprint()))
    }
}
