//! Mono 16-bit PCM audio: loading, saving, framing and pre-emphasis.
//!
//! Only little-endian RIFF/WAVE with PCM format code 1, 16 bits per sample and
//! a single channel is accepted. Anything else is rejected instead of being
//! converted, and so are clips whose rate differs from the pipeline rate.

use std::fmt;
use std::io::{Cursor, Read, Seek};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scale between 16-bit integer samples and normalized amplitudes.
pub const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file: {0}")]
    NotWav(String),
    #[error("unsupported encoding: {0} (expected 16-bit integer PCM)")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid framing: {0}")]
    InvalidFraming(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A mono utterance with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(
        id: impl Into<String>,
        sample_rate: u32,
        samples: Vec<f64>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidClip(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            id: id.into(),
            sample_rate,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Same samples under a new identifier.
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn ensure_rate(&self, expected: u32) -> Result<(), AudioError> {
        if self.sample_rate != expected {
            return Err(AudioError::SampleRateMismatch {
                expected,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_wav(std::io::BufReader::new(file), id)
}

pub fn load_wav_bytes(bytes: &[u8], id: impl Into<String>) -> Result<AudioClip, AudioError> {
    read_wav(Cursor::new(bytes), id.into())
}

fn read_wav<R: Read + Seek>(reader: R, id: String) -> Result<AudioClip, AudioError> {
    let reader = hound::WavReader::new(reader).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAVE format".into()),
        other => AudioError::NotWav(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::UnsupportedEncoding("floating-point samples".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{} bits per sample",
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(AudioError::MultiChannel(spec.channels));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| match e {
            hound::Error::IoError(io) => AudioError::Io(io),
            other => AudioError::NotWav(other.to_string()),
        })?;
    AudioClip::new(id, spec.sample_rate, samples)
}

/// Quantizes one sample with saturation.
pub fn quantize(sample: f64) -> i16 {
    (sample * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let bytes = wav_bytes(clip)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Encodes a clip as a complete 16-bit mono WAV file in memory.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>, AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + 2 * clip.len()));
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(hound_io)?;
        for &s in &clip.samples {
            writer.write_sample(quantize(s)).map_err(hound_io)?;
        }
        writer.finalize().map_err(hound_io)?;
    }
    Ok(buf.into_inner())
}

fn hound_io(e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::Io(std::io::Error::other(other.to_string())),
    }
}

/// y[0] = x[0], y[n] = x[n] - coeff * x[n-1].
pub fn pre_emphasize(clip: &AudioClip, coeff: f64) -> AudioClip {
    AudioClip {
        id: clip.id.clone(),
        sample_rate: clip.sample_rate,
        samples: pre_emphasis(&clip.samples, coeff),
    }
}

pub fn pre_emphasis(x: &[f64], coeff: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for (n, &v) in x.iter().enumerate() {
        y.push(if n == 0 { v } else { v - coeff * prev });
        prev = v;
    }
    y
}

/// Inverse of [`pre_emphasis`].
pub fn de_emphasis(y: &[f64], coeff: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(y.len());
    let mut prev = 0.0;
    for &v in y {
        prev = v + coeff * prev;
        x.push(prev);
    }
    x
}

/// Drops leading and trailing 10 ms blocks whose energy is more than
/// `threshold_db` below the loudest block. Ingestion never calls this unless
/// trimming is explicitly enabled.
pub fn trim_silence(clip: &AudioClip, threshold_db: f64) -> AudioClip {
    let block = (clip.sample_rate as usize / 100).max(1);
    let energies: Vec<f64> = clip
        .samples
        .chunks(block)
        .map(|c| c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64)
        .collect();
    let max = energies.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return AudioClip { samples: Vec::new(), ..clip.clone() };
    }
    let floor = max * 10f64.powf(-threshold_db.abs() / 10.0);
    let first = energies.iter().position(|&e| e >= floor).unwrap_or(0);
    let last = energies.iter().rposition(|&e| e >= floor).unwrap_or(0);
    let end = ((last + 1) * block).min(clip.len());
    AudioClip {
        samples: clip.samples[first * block..end].to_vec(),
        ..clip.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hamming,
    Hann,
}

impl Window {
    /// Symmetric window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        if len <= 1 {
            return vec![1.0; len];
        }
        let denom = (len - 1) as f64;
        (0..len)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / denom;
                match self {
                    Window::Rectangular => 1.0,
                    Window::Hamming => 0.54 - 0.46 * phase.cos(),
                    Window::Hann => 0.5 - 0.5 * phase.cos(),
                }
            })
            .collect()
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Window::Rectangular => "rect",
            Window::Hamming => "hamming",
            Window::Hann => "hann",
        })
    }
}

/// Overlapping windowed frames stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Vec<f64>,
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

impl FrameSequence {
    pub fn num_frames(&self) -> usize {
        self.data.len().checked_div(self.frame_len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_len..(i + 1) * self.frame_len]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.frame_len.max(1))
    }
}

/// Number of full frames of `frame_len` at stride `hop` in `n` samples.
pub fn frame_count(n: usize, frame_len: usize, hop: usize) -> usize {
    if frame_len == 0 || hop == 0 || n < frame_len {
        0
    } else {
        (n - frame_len) / hop + 1
    }
}

pub fn frame(
    clip: &AudioClip,
    frame_ms: f64,
    hop_ms: f64,
    window: Window,
) -> Result<FrameSequence, AudioError> {
    if !(hop_ms > 0.0 && frame_ms >= hop_ms) {
        return Err(AudioError::InvalidFraming(format!(
            "need frame_ms >= hop_ms > 0, got {frame_ms} / {hop_ms}"
        )));
    }
    let sr = clip.sample_rate as f64;
    let frame_len = (frame_ms * sr / 1000.0).round() as usize;
    let hop = ((hop_ms * sr / 1000.0).round() as usize).max(1);
    Ok(frame_samples(&clip.samples, clip.sample_rate, frame_len, hop, window))
}

pub fn frame_samples(
    samples: &[f64],
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    window: Window,
) -> FrameSequence {
    let n = frame_count(samples.len(), frame_len, hop);
    let w = window.coefficients(frame_len);
    let mut data = Vec::with_capacity(n * frame_len);
    for i in 0..n {
        let start = i * hop;
        data.extend(samples[start..start + frame_len].iter().zip(&w).map(|(s, w)| s * w));
    }
    FrameSequence {
        data,
        frame_len,
        hop,
        window,
        sample_rate,
    }
}
