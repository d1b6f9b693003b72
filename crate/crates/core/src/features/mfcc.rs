//! Mel-frequency cepstral coefficients.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureError, FeatureMatrix, Fingerprint};
use crate::audio::FrameSequence;

/// Floor applied before taking the log of a band energy.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with edges equally spaced on the mel scale from 0 to
/// Nyquist, evaluated at FFT bin centre frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per-band (first bin, weights).
    bands: Vec<(usize, Vec<f64>)>,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_len: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_len as f64;
        let n_bins = fft_len / 2 + 1;
        let bands = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for b in 0..n_bins {
                    let f = b as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(b);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self { bands, edges_hz }
    }

    pub fn n_mels(&self) -> usize {
        self.bands.len()
    }

    /// Band edges in Hz; band m spans edges[m]..edges[m + 2].
    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.bands
            .iter()
            .map(|(first, w)| w.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Reusable MFCC front end for one frame length.
pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    filterbank: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl MfccExtractor {
    pub fn new(
        frame_len: usize,
        n_mels: usize,
        n_coeffs: usize,
        sample_rate: u32,
    ) -> Result<Self, FeatureError> {
        if n_mels == 0 || n_coeffs == 0 || n_coeffs > n_mels {
            return Err(FeatureError::ConfigInvalid(format!(
                "need 0 < n_coeffs <= n_mels, got {n_coeffs} / {n_mels}"
            )));
        }
        if sample_rate == 0 || frame_len == 0 {
            return Err(FeatureError::ConfigInvalid("empty frame or zero sample rate".into()));
        }
        let fft_len = frame_len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        // orthonormal DCT-II rows 1..=n_coeffs
        let scale = (2.0 / n_mels as f64).sqrt();
        let dct = (1..=n_coeffs)
            .map(|k| {
                (0..n_mels)
                    .map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / n_mels as f64).cos())
                    .collect()
            })
            .collect();
        Ok(Self {
            fft,
            fft_len,
            filterbank: MelFilterbank::new(n_mels, fft_len, sample_rate),
            dct,
        })
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Power spectrum |X[k]|^2 for k in 0..=fft_len/2 of a zero-padded frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .take(self.fft_len)
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        buf.resize(self.fft_len, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.fft_len / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn mel_energies(&self, frame: &[f64]) -> Vec<f64> {
        self.filterbank.apply(&self.power_spectrum(frame))
    }

    pub fn log_mel(&self, frame: &[f64]) -> Vec<f64> {
        self.mel_energies(frame)
            .into_iter()
            .map(|e| e.max(LOG_FLOOR).ln())
            .collect()
    }

    pub fn coefficients(&self, frame: &[f64]) -> Vec<f64> {
        let logs = self.log_mel(frame);
        self.dct
            .iter()
            .map(|row| row.iter().zip(&logs).map(|(d, l)| d * l).sum())
            .collect()
    }
}

/// MFCCs c1..c_n for every frame (c0 excluded).
pub fn mfcc(
    frames: &FrameSequence,
    n_mels: usize,
    n_coeffs: usize,
    sample_rate: u32,
) -> Result<FeatureMatrix, FeatureError> {
    let ex = MfccExtractor::new(frames.frame_len, n_mels, n_coeffs, sample_rate)?;
    let mut data = Vec::with_capacity(frames.num_frames() * n_coeffs);
    for f in frames.iter() {
        data.extend(ex.coefficients(f));
    }
    FeatureMatrix::from_flat(
        data,
        n_coeffs,
        Fingerprint {
            framing: Fingerprint::framing_of(frames),
            content: format!("mfcc{n_mels}x{n_coeffs}"),
        },
    )
}
