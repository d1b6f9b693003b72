//! Directional voice conversion and the registry of all source/target models.
//!
//! The built-in backend is a source-filter converter: pitch is moved by
//! overlap-add on the LPC excitation and the spectral envelope is bilinearly
//! warped. Any other backend can stand in by implementing [`VoiceConverter`].

pub mod pitch;
pub mod source_filter;
pub mod warp;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::exec::Exec;
use crate::features::lpc::lpc_to_cepstrum;
use crate::sid::validate_speaker_id;

pub use pitch::{median_voiced, track_f0, PitchConfig};
pub use source_filter::{analyze, psola, synthesize, AnalysisConfig, SourceFilterDecomp};
pub use warp::{fit_warp_alpha, freqt, warp_frequency, EnvelopeWarper, MAX_WARP};

pub const MODEL_FORMAT: &str = "VPVC1";
pub const PROFILE_FORMAT: &str = "VPVP1";
pub const INDEX_FORMAT: &str = "VPVCIDX1";

#[derive(Debug, Error)]
pub enum ConversionError {
    #[error("source and target are the same speaker: {0}")]
    SameSpeaker(String),
    #[error("no conversion model for {source_id} -> {target_id}")]
    UnknownPair { source_id: String, target_id: String },
    #[error("unknown speaker: {0}")]
    UnknownSpeaker(String),
    #[error("duplicate speaker: {0}")]
    DuplicateSpeaker(String),
    #[error("insufficient voiced data for {speaker}: {seconds:.2} s voiced, {required:.2} s required")]
    InsufficientVoicedData { speaker: String, seconds: f64, required: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),
    #[error("unstable synthesis envelope at frame {frame}")]
    UnstableEnvelope { frame: usize },
    #[error("conversion produced non-finite samples")]
    NonFiniteOutput,
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverterConfig {
    pub analysis: AnalysisConfig,
    /// Cepstral coefficients (excluding the gain term) kept in profiles.
    pub profile_ceps: usize,
    /// Cepstral order used when warping an envelope.
    pub warp_ceps: usize,
    pub warp_fft_len: usize,
    pub min_voiced_seconds: f64,
    /// Frames more than this many dB below a clip's loudest frame are
    /// excluded from the mean envelope.
    pub speech_floor_db: f64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self {
            analysis: AnalysisConfig::default(),
            profile_ceps: 24,
            warp_ceps: 128,
            warp_fft_len: 1024,
            min_voiced_seconds: 10.0,
            speech_floor_db: 30.0,
        }
    }
}

/// Per-speaker statistics learned from non-parallel recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceProfile {
    pub speaker_id: String,
    pub log_f0_mean: f64,
    pub log_f0_std: f64,
    /// Mean LPC cepstrum c[1..] over speech frames.
    pub mean_envelope_cepstrum: Vec<f64>,
    /// Vocal-tract warp coordinate relative to the corpus centroid.
    pub warp_alpha_ref: f64,
    pub voiced_seconds: f64,
}

/// Smallest log-F0 spread recorded in a profile; a perfectly monotone
/// speaker would otherwise make the scale ratio undefined.
pub const MIN_LOG_F0_STD: f64 = 1e-3;

/// Estimates a speaker's profile. `warp_alpha_ref` is left at 0 until
/// [`calibrate_warps`] places the speaker relative to a corpus.
pub fn build_profile(
    speaker_id: &str,
    clips: &[AudioClip],
    cfg: &ConverterConfig,
) -> Result<VoiceProfile, ConversionError> {
    validate_speaker_id(speaker_id).map_err(|e| ConversionError::InvalidModel(e.to_string()))?;
    let mut log_f0 = Vec::new();
    let mut ceps_sum = vec![0.0; cfg.profile_ceps];
    let mut speech_frames = 0usize;
    let mut voiced_seconds = 0.0;
    for clip in clips {
        let d = analyze(clip, &cfg.analysis)?;
        voiced_seconds += d.voiced_frames() as f64 * d.hop as f64 / d.sample_rate as f64;
        log_f0.extend(d.f0.iter().filter(|f| **f > 0.0).map(|f| f.ln()));
        let loudest = d.frame_rms.iter().cloned().fold(0.0, f64::max);
        let floor = loudest * 10f64.powf(-cfg.speech_floor_db / 20.0);
        for (env, rms) in d.envelopes.iter().zip(&d.frame_rms) {
            if *rms > 0.0 && *rms >= floor {
                for (s, c) in ceps_sum.iter_mut().zip(lpc_to_cepstrum(env, cfg.profile_ceps)) {
                    *s += c;
                }
                speech_frames += 1;
            }
        }
    }
    if voiced_seconds < cfg.min_voiced_seconds || log_f0.is_empty() {
        return Err(ConversionError::InsufficientVoicedData {
            speaker: speaker_id.to_string(),
            seconds: voiced_seconds,
            required: cfg.min_voiced_seconds,
        });
    }
    let n = log_f0.len() as f64;
    let mean = log_f0.iter().sum::<f64>() / n;
    let var = log_f0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(VoiceProfile {
        speaker_id: speaker_id.to_string(),
        log_f0_mean: mean,
        log_f0_std: var.sqrt().max(MIN_LOG_F0_STD),
        mean_envelope_cepstrum: ceps_sum.iter().map(|s| s / speech_frames.max(1) as f64).collect(),
        warp_alpha_ref: 0.0,
        voiced_seconds,
    })
}

/// Cepstral terms below this index mostly encode source tilt rather than
/// vocal tract length, so warp fitting ignores them.
const WARP_FIT_FIRST_CEP: usize = 3;

/// Pairwise fits may span two coordinates' worth of warp.
const PAIR_FIT_LIMIT: f64 = 0.6;

/// Pairwise fits larger than this are prone to false minima and are not used.
const PAIR_TRUST: f64 = 0.3;

/// A pair is kept only if its two directed fits cancel to within this.
const PAIR_SYMMETRY_TOL: f64 = 0.03;

fn warp_fit_vector(mean_cepstrum: &[f64], dim: usize) -> Vec<f64> {
    let mut c = vec![0.0; dim + 1];
    c[WARP_FIT_FIRST_CEP..].copy_from_slice(&mean_cepstrum[WARP_FIT_FIRST_CEP - 1..dim]);
    c
}

/// Places every profile on a common warp axis whose origin is the centroid
/// of the set. Warps between nearby pairs are fitted directly; coordinates
/// are the least-squares solution of `x_i - x_j = fit(i, j)` over the pairs
/// whose fits are small and consistent in both directions. Speakers with no
/// such pair stay at 0.
pub fn calibrate_warps(profiles: &mut [VoiceProfile]) {
    let n = profiles.len();
    if n == 0 {
        return;
    }
    let dim = profiles.iter().map(|p| p.mean_envelope_cepstrum.len()).min().unwrap_or(0);
    let vectors: Vec<Vec<f64>> = profiles.iter().map(|p| warp_fit_vector(&p.mean_envelope_cepstrum, dim)).collect();
    let fit = |i: usize, j: usize| warp::fit_warp_alpha_within(&vectors[i], &vectors[j], PAIR_FIT_LIMIT);
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let (ij, ji) = (fit(i, j), fit(j, i));
            if ij.abs() <= PAIR_TRUST && (ij + ji).abs() <= PAIR_SYMMETRY_TOL {
                let a = 0.5 * (ij - ji);
                edges[i].push((j, a));
                edges[j].push((i, -a));
            }
        }
    }
    let coords = solve_offsets(&edges);
    for (p, a) in profiles.iter_mut().zip(coords) {
        p.warp_alpha_ref = a.clamp(-MAX_WARP, MAX_WARP);
    }
}

/// Least-squares `x` with `x_i - x_j ~ a` for every edge `(j, a)` of `i`,
/// each connected component centred on zero.
fn solve_offsets(edges: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let n = edges.len();
    let mut x = vec![0.0; n];
    // Gauss-Seidel on the graph Laplacian; converges on every component
    for _ in 0..10_000 {
        let mut change = 0.0f64;
        for i in 0..n {
            if edges[i].is_empty() {
                continue;
            }
            let next = edges[i].iter().map(|(j, a)| x[*j] + a).sum::<f64>() / edges[i].len() as f64;
            change = change.max((next - x[i]).abs());
            x[i] = next;
        }
        if change < 1e-13 {
            break;
        }
    }
    let mut component = vec![usize::MAX; n];
    for root in 0..n {
        if component[root] != usize::MAX {
            continue;
        }
        let mut members = vec![root];
        component[root] = root;
        let mut k = 0;
        while k < members.len() {
            for (j, _) in &edges[members[k]] {
                if component[*j] == usize::MAX {
                    component[*j] = root;
                    members.push(*j);
                }
            }
            k += 1;
        }
        let mean = members.iter().map(|&m| x[m]).sum::<f64>() / members.len() as f64;
        for m in members {
            x[m] -= mean;
        }
    }
    x
}

/// Builds profiles for every speaker (in parallel under `exec`) and calibrates
/// their warp coordinates against each other.
pub fn train_profiles(
    speakers: &[(String, Vec<AudioClip>)],
    cfg: &ConverterConfig,
    exec: Exec,
) -> Result<Vec<VoiceProfile>, ConversionError> {
    let mut profiles = exec
        .map(speakers, |(id, clips)| build_profile(id, clips, cfg))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    calibrate_warps(&mut profiles);
    Ok(profiles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchMap {
    /// Difference of mean log-F0, target minus source.
    pub shift: f64,
    /// Ratio of log-F0 standard deviations, target over source.
    pub scale: f64,
    /// Source mean log-F0, the pivot of the scaling.
    pub source_log_f0_mean: f64,
}

impl PitchMap {
    pub fn apply(&self, f0: f64) -> f64 {
        if f0 <= 0.0 {
            return 0.0;
        }
        let mu = self.source_log_f0_mean;
        (self.shift + self.scale * (f0.ln() - mu) + mu).exp()
    }

    pub fn is_identity(&self) -> bool {
        self.shift == 0.0 && self.scale == 1.0
    }
}

/// One directional source -> target conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionModel {
    pub format: String,
    pub source_id: String,
    pub target_id: String,
    pub pitch_map: PitchMap,
    pub warp_alpha: f64,
}

impl ConversionModel {
    pub fn validate(&self) -> Result<(), ConversionError> {
        if self.format != MODEL_FORMAT {
            return Err(ConversionError::Format(format!(
                "expected format {MODEL_FORMAT}, found {}",
                self.format
            )));
        }
        if self.source_id == self.target_id {
            return Err(ConversionError::SameSpeaker(self.source_id.clone()));
        }
        let p = &self.pitch_map;
        if !(p.scale.is_finite() && p.scale > 0.0 && p.shift.is_finite() && p.source_log_f0_mean.is_finite()) {
            return Err(ConversionError::InvalidModel("pitch map must be finite with scale > 0".into()));
        }
        if !(self.warp_alpha.abs() < 0.35) {
            return Err(ConversionError::InvalidModel(format!("warp {} outside (-0.35, 0.35)", self.warp_alpha)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.pitch_map.is_identity() && self.warp_alpha == 0.0
    }

    pub fn to_json(&self) -> Result<String, ConversionError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ConversionError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn train_converter(source: &VoiceProfile, target: &VoiceProfile) -> Result<ConversionModel, ConversionError> {
    if source.speaker_id == target.speaker_id {
        return Err(ConversionError::SameSpeaker(source.speaker_id.clone()));
    }
    let model = ConversionModel {
        format: MODEL_FORMAT.to_string(),
        source_id: source.speaker_id.clone(),
        target_id: target.speaker_id.clone(),
        pitch_map: PitchMap {
            shift: target.log_f0_mean - source.log_f0_mean,
            scale: target.log_f0_std / source.log_f0_std,
            source_log_f0_mean: source.log_f0_mean,
        },
        warp_alpha: (target.warp_alpha_ref - source.warp_alpha_ref).clamp(-MAX_WARP, MAX_WARP),
    };
    model.validate()?;
    Ok(model)
}

/// A conversion backend. Implementations must preserve duration within 5%,
/// emit only finite samples with peak at most 1, and keep the sample rate.
pub trait VoiceConverter: Send + Sync {
    fn convert(&self, model: &ConversionModel, clip: &AudioClip) -> Result<AudioClip, ConversionError>;
}

/// Built-in source-filter backend.
#[derive(Debug, Clone)]
pub struct SourceFilterConverter {
    cfg: ConverterConfig,
    warper: EnvelopeWarper,
}

impl Default for SourceFilterConverter {
    fn default() -> Self {
        Self::new(ConverterConfig::default())
    }
}

impl SourceFilterConverter {
    pub fn new(cfg: ConverterConfig) -> Self {
        Self {
            warper: EnvelopeWarper::new(cfg.warp_ceps, cfg.warp_fft_len),
            cfg,
        }
    }

    pub fn config(&self) -> &ConverterConfig {
        &self.cfg
    }

    /// Applies `model` to a decomposition in place.
    pub fn transform(&self, model: &ConversionModel, d: &mut SourceFilterDecomp) {
        if !model.pitch_map.is_identity() {
            let target: Vec<f64> = d.f0.iter().map(|f| model.pitch_map.apply(*f)).collect();
            d.residual = psola(&d.residual, &d.f0, &target, d.hop, d.sample_rate);
            d.f0 = target;
        }
        if model.warp_alpha != 0.0 {
            let ratios: Vec<f64> = d
                .envelopes
                .iter_mut()
                .map(|env| {
                    let warped = self.warper.warp(env, model.warp_alpha);
                    let r = if env.gain > 0.0 { warped.gain / env.gain } else { 1.0 };
                    *env = warped;
                    r
                })
                .collect();
            scale_segments(d, &ratios);
        }
    }
}

/// Multiplies the residual by per-segment factors, interpolated linearly
/// between segment centres to avoid steps.
fn scale_segments(d: &mut SourceFilterDecomp, ratios: &[f64]) {
    let hop = d.hop as f64;
    let last = ratios.len().saturating_sub(1);
    for (i, v) in d.residual.iter_mut().enumerate() {
        let pos = (i as f64 + 0.5) / hop - 0.5;
        let m = (pos.floor().max(0.0) as usize).min(last);
        let frac = (pos - m as f64).clamp(0.0, 1.0);
        let r = if m < last { ratios[m] * (1.0 - frac) + ratios[m + 1] * frac } else { ratios[m] };
        *v *= r;
    }
}

impl VoiceConverter for SourceFilterConverter {
    fn convert(&self, model: &ConversionModel, clip: &AudioClip) -> Result<AudioClip, ConversionError> {
        model.validate()?;
        let mut d = analyze(clip, &self.cfg.analysis)?;
        if !model.is_identity() {
            self.transform(model, &mut d);
        }
        let mut out = synthesize(&d)?;
        let (rms_in, rms_out) = (clip.rms(), out.rms());
        if rms_out > 0.0 {
            let g = rms_in / rms_out;
            out.samples.iter_mut().for_each(|v| *v *= g);
        }
        let peak = out.peak();
        if peak > 1.0 {
            out.samples.iter_mut().for_each(|v| *v /= peak);
        }
        out.id = clip.id.clone();
        Ok(out)
    }
}

/// Converts with the built-in backend at default settings.
pub fn convert(model: &ConversionModel, clip: &AudioClip) -> Result<AudioClip, ConversionError> {
    SourceFilterConverter::default().convert(model, clip)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileDocument {
    format: String,
    profile: VoiceProfile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    source: String,
    target: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryIndex {
    format: String,
    speakers: Vec<String>,
    models: Vec<IndexEntry>,
}

/// All directional models over a set of profiles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConversionRegistry {
    profiles: BTreeMap<String, VoiceProfile>,
    models: BTreeMap<(String, String), ConversionModel>,
}

impl ConversionRegistry {
    /// Trains a model for every ordered pair of distinct profiles.
    pub fn build(profiles: Vec<VoiceProfile>) -> Result<Self, ConversionError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            if let Some(dup) = map.insert(p.speaker_id.clone(), p) {
                return Err(ConversionError::DuplicateSpeaker(dup.speaker_id));
            }
        }
        let mut models = BTreeMap::new();
        for s in map.values() {
            for t in map.values() {
                if s.speaker_id != t.speaker_id {
                    models.insert((s.speaker_id.clone(), t.speaker_id.clone()), train_converter(s, t)?);
                }
            }
        }
        Ok(Self { profiles: map, models })
    }

    pub fn get(&self, source: &str, target: &str) -> Result<&ConversionModel, ConversionError> {
        if source == target {
            return Err(ConversionError::SameSpeaker(source.to_string()));
        }
        self.models
            .get(&(source.to_string(), target.to_string()))
            .ok_or_else(|| ConversionError::UnknownPair {
                source_id: source.to_string(),
                target_id: target.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.profiles.len()
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    pub fn profile(&self, id: &str) -> Option<&VoiceProfile> {
        self.profiles.get(id)
    }

    pub fn models(&self) -> impl Iterator<Item = &ConversionModel> {
        self.models.values()
    }

    /// True when every ordered pair of distinct speakers has a model.
    pub fn is_complete(&self) -> bool {
        let n = self.profiles.len();
        self.models.len() == n * n.saturating_sub(1)
            && self.profiles.keys().all(|s| {
                self.profiles.keys().all(|t| s == t || self.models.contains_key(&(s.clone(), t.clone())))
            })
    }

    /// Writes `index.json`, `profiles/<id>.json` and `models/<src>__<tgt>.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ConversionError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("profiles"))?;
        std::fs::create_dir_all(dir.join("models"))?;
        for p in self.profiles.values() {
            let doc = ProfileDocument {
                format: PROFILE_FORMAT.to_string(),
                profile: p.clone(),
            };
            std::fs::write(dir.join("profiles").join(format!("{}.json", p.speaker_id)), serde_json::to_string_pretty(&doc)?)?;
        }
        let mut entries = Vec::with_capacity(self.models.len());
        for ((s, t), m) in &self.models {
            let file = format!("models/{s}__{t}.json");
            std::fs::write(dir.join(&file), m.to_json()?)?;
            entries.push(IndexEntry {
                source: s.clone(),
                target: t.clone(),
                file,
            });
        }
        let index = RegistryIndex {
            format: INDEX_FORMAT.to_string(),
            speakers: self.profiles.keys().cloned().collect(),
            models: entries,
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ConversionError> {
        let dir = dir.as_ref();
        let index: RegistryIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        if index.format != INDEX_FORMAT {
            return Err(ConversionError::Format(format!(
                "expected index format {INDEX_FORMAT}, found {}",
                index.format
            )));
        }
        let mut profiles = BTreeMap::new();
        for id in &index.speakers {
            validate_speaker_id(id).map_err(|e| ConversionError::Format(e.to_string()))?;
            let doc: ProfileDocument =
                serde_json::from_str(&std::fs::read_to_string(dir.join("profiles").join(format!("{id}.json")))?)?;
            if doc.format != PROFILE_FORMAT || doc.profile.speaker_id != *id {
                return Err(ConversionError::Format(format!("bad profile document for {id}")));
            }
            profiles.insert(id.clone(), doc.profile);
        }
        let mut models = BTreeMap::new();
        for e in &index.models {
            if !profiles.contains_key(&e.source) || !profiles.contains_key(&e.target) {
                return Err(ConversionError::Format(format!("model {} -> {} references an unknown speaker", e.source, e.target)));
            }
            let m = ConversionModel::from_json(&std::fs::read_to_string(dir.join(&e.file))?)?;
            if m.source_id != e.source || m.target_id != e.target {
                return Err(ConversionError::Format(format!("{} does not hold {} -> {}", e.file, e.source, e.target)));
            }
            models.insert((e.source.clone(), e.target.clone()), m);
        }
        Ok(Self { profiles, models })
    }
}
