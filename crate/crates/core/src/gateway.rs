//! The on-device gateway: every utterance is identified, converted to a
//! randomly chosen target voice and only then handed to transcription.
//!
//! Models are loaded once into a [`Pipeline`]. Nothing in this module passes
//! unconverted audio to an [`AsrClient`].

use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::conversion::{
    train_profiles, ConversionError, ConversionRegistry, ConverterConfig, SourceFilterConverter, VoiceConverter,
};
use crate::eval::asr::{converted_id, AsrClient, AsrError, Hypothesis};
use crate::eval::latency::{bench_latency, LatencyRecord};
use crate::eval::EvalError;
use crate::exec::Exec;
use crate::features::{FeatureConfig, FeatureError, FeatureExtractor, FeatureMatrix};
use crate::gmm::{EmConfig, GmmError};
use crate::manifest::{Manifest, ManifestError, Utterance};
use crate::selection::{SelectionConfig, SelectionDecision, SelectionError, SelectionPolicy};
use crate::sid::{train_registry, SidError, SpeakerRegistry, DEFAULT_RELEVANCE};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Conversion(#[from] ConversionError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Transcription(#[from] AsrError),
    /// Transcription overran the latency budget; the converted audio and
    /// decision are still available.
    #[error("transcription exceeded the {budget:.3} s budget ({elapsed:.3} s)")]
    TranscriptionTimeout {
        budget: f64,
        elapsed: f64,
        result: Box<UtteranceResult>,
    },
    #[error("need at least 2 speakers with training data, found {0}")]
    TooFewSpeakers(usize),
    #[error("model bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<GmmError> for GatewayError {
    fn from(e: GmmError) -> Self {
        GatewayError::Sid(e.into())
    }
}

/// Settings used to train a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub features: FeatureConfig,
    pub em: EmConfig,
    pub relevance: f64,
    pub converter: ConverterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            em: EmConfig::default(),
            relevance: DEFAULT_RELEVANCE,
            converter: ConverterConfig::default(),
        }
    }
}

const BUNDLE_FORMAT: &str = "VPBUNDLE1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleIndex {
    format: String,
    features: FeatureConfig,
    converter: ConverterConfig,
}

static BUNDLE_LOADS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`ModelBundle::load`] calls made by this process.
pub fn bundle_loads() -> usize {
    BUNDLE_LOADS.load(Ordering::SeqCst)
}

/// Everything the gateway needs at run time: the SID registry, the complete
/// conversion registry over the same speakers, and the settings they were
/// trained with.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub features: FeatureConfig,
    pub converter: ConverterConfig,
    pub sid: SpeakerRegistry,
    pub conversions: ConversionRegistry,
}

impl ModelBundle {
    /// Trains n SID models and n(n-1) conversion models from per-speaker
    /// utterances.
    pub fn train(utterances: &[Utterance], cfg: &TrainConfig) -> Result<Self, GatewayError> {
        let speakers = group_by_speaker(utterances, cfg.features.sample_rate)?;
        let sid = enroll_groups(&speakers, cfg)?;
        let profiles = train_profiles(&speakers, &cfg.converter, cfg.em.exec)?;
        let conversions = ConversionRegistry::build(profiles)?;
        Ok(Self {
            features: cfg.features.clone(),
            converter: cfg.converter,
            sid,
            conversions,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), GatewayError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.sid.save(dir.join("sid"))?;
        self.conversions.save(dir.join("conversion"))?;
        let index = BundleIndex {
            format: BUNDLE_FORMAT.to_string(),
            features: self.features.clone(),
            converter: self.converter,
        };
        std::fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, GatewayError> {
        BUNDLE_LOADS.fetch_add(1, Ordering::SeqCst);
        let dir = dir.as_ref();
        let index: BundleIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("bundle.json"))?)?;
        if index.format != BUNDLE_FORMAT {
            return Err(GatewayError::Bundle(format!("unexpected format {}", index.format)));
        }
        let bundle = Self {
            features: index.features,
            converter: index.converter,
            sid: SpeakerRegistry::load(dir.join("sid"))?,
            conversions: ConversionRegistry::load(dir.join("conversion"))?,
        };
        bundle.check()?;
        Ok(bundle)
    }

    /// Verifies the registries agree with each other and with the feature
    /// settings.
    pub fn check(&self) -> Result<(), GatewayError> {
        self.features.fingerprint().ensure_eq(self.sid.fingerprint())?;
        let sid: Vec<&str> = self.sid.speaker_ids().collect();
        let vc: Vec<&str> = self.conversions.speaker_ids().collect();
        if sid != vc {
            return Err(GatewayError::Bundle(format!("SID speakers {sid:?} differ from conversion speakers {vc:?}")));
        }
        if !self.conversions.is_complete() {
            return Err(GatewayError::Bundle("conversion registry lacks some ordered pairs".into()));
        }
        Ok(())
    }
}

/// Trains a UBM and MAP-adapted speaker models from per-speaker
/// utterances, without building any conversion models. Evaluation uses this
/// for the attacker's SID.
pub fn train_sid(utterances: &[Utterance], cfg: &TrainConfig) -> Result<SpeakerRegistry, GatewayError> {
    enroll_groups(&group_by_speaker(utterances, cfg.features.sample_rate)?, cfg)
}

fn group_by_speaker(utterances: &[Utterance], sample_rate: u32) -> Result<Vec<(String, Vec<AudioClip>)>, GatewayError> {
    let mut speakers: Vec<(String, Vec<AudioClip>)> = Vec::new();
    for u in utterances {
        u.clip.ensure_rate(sample_rate)?;
        match speakers.iter_mut().find(|(id, _)| *id == u.speaker) {
            Some((_, clips)) => clips.push(u.clip.clone()),
            None => speakers.push((u.speaker.clone(), vec![u.clip.clone()])),
        }
    }
    speakers.sort_by(|a, b| a.0.cmp(&b.0));
    if speakers.len() < 2 {
        return Err(GatewayError::TooFewSpeakers(speakers.len()));
    }
    Ok(speakers)
}

fn enroll_groups(speakers: &[(String, Vec<AudioClip>)], cfg: &TrainConfig) -> Result<SpeakerRegistry, GatewayError> {
    let extractor = FeatureExtractor::new(cfg.features.clone())?;
    let enrollment = cfg
        .em
        .exec
        .map(speakers, |(id, clips)| {
            let parts = clips.iter().map(|c| extractor.extract(c)).collect::<Result<Vec<_>, _>>()?;
            Ok((id.clone(), FeatureMatrix::concat(&parts)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>, FeatureError>>()?;
    Ok(train_registry(&enrollment, &cfg.em, cfg.relevance)?)
}

/// Run-time settings of the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    /// Seconds from receiving an utterance to having its transcript.
    pub latency_budget: f64,
    /// Phrases passed to the recognizer as context.
    pub context: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            selection: SelectionConfig::default(),
            latency_budget: 10.0,
            context: Vec::new(),
        }
    }
}

/// Wall-clock seconds spent in each stage of one utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub features: f64,
    pub selection: f64,
    pub conversion: f64,
    pub transcription: Option<f64>,
    pub total: f64,
}

/// An utterance after conversion, before any transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct Converted {
    pub decision: SelectionDecision,
    /// Carries the id `<utterance>.vc`.
    pub audio: AudioClip,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub utterance_id: String,
    pub decision: SelectionDecision,
    pub converted: AudioClip,
    /// `None` when no recognizer is attached.
    pub hypotheses: Option<Vec<Hypothesis>>,
    pub timings: StageTimings,
}

impl UtteranceResult {
    pub fn latency(&self, duration: f64) -> LatencyRecord {
        LatencyRecord {
            duration,
            sid_time: self.timings.features + self.timings.selection,
            conversion_time: self.timings.conversion,
            rtf: self.timings.conversion / duration,
        }
    }
}

/// Outcome for one manifest row; failures do not stop a batch.
#[derive(Debug)]
pub struct RowOutcome {
    pub row: usize,
    pub utterance_id: String,
    pub result: Result<UtteranceResult, GatewayError>,
}

pub struct Pipeline {
    extractor: FeatureExtractor,
    sid: SpeakerRegistry,
    conversions: ConversionRegistry,
    converter: Box<dyn VoiceConverter>,
    policy: SelectionPolicy,
    asr: Option<Box<dyn AsrClient>>,
    context: Vec<String>,
    budget: Duration,
    exec: Exec,
    processed: AtomicU64,
    failed: AtomicU64,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("speakers", &self.sid.len())
            .field("policy", &self.policy)
            .field("asr", &self.asr.is_some())
            .field("budget", &self.budget)
            .finish()
    }
}

impl Pipeline {
    pub fn new(bundle: ModelBundle, cfg: &PipelineConfig) -> Result<Self, GatewayError> {
        bundle.check()?;
        if !(cfg.latency_budget > 0.0 && cfg.latency_budget.is_finite()) {
            return Err(GatewayError::Bundle(format!("latency budget must be positive, got {}", cfg.latency_budget)));
        }
        let policy = SelectionPolicy::from_config(&cfg.selection, &bundle.sid)?;
        Ok(Self {
            extractor: FeatureExtractor::new(bundle.features)?,
            converter: Box::new(SourceFilterConverter::new(bundle.converter)),
            sid: bundle.sid,
            conversions: bundle.conversions,
            policy,
            asr: None,
            context: cfg.context.clone(),
            budget: Duration::from_secs_f64(cfg.latency_budget),
            exec: Exec::default(),
            processed: AtomicU64::new(0),
            failed: AtomicU64::new(0),
        })
    }

    /// Loads the bundle under `dir` once and builds a pipeline from it.
    pub fn load(dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<Self, GatewayError> {
        Self::new(ModelBundle::load(dir)?, cfg)
    }

    pub fn with_asr(mut self, asr: Box<dyn AsrClient>) -> Self {
        self.asr = Some(asr);
        self
    }

    pub fn with_converter(mut self, converter: Box<dyn VoiceConverter>) -> Self {
        self.converter = converter;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn sid(&self) -> &SpeakerRegistry {
        &self.sid
    }

    pub fn conversions(&self) -> &ConversionRegistry {
        &self.conversions
    }

    pub fn policy(&self) -> &SelectionPolicy {
        &self.policy
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// (processed, failed) utterance counts since construction.
    pub fn counters(&self) -> (u64, u64) {
        (self.processed.load(Ordering::SeqCst), self.failed.load(Ordering::SeqCst))
    }

    fn convert_at(&self, clip: &AudioClip, ordinal: u64) -> Result<Converted, GatewayError> {
        let start = Instant::now();
        clip.ensure_rate(self.extractor.config().sample_rate)?;
        let features = self.extractor.extract(clip)?;
        let t_features = start.elapsed().as_secs_f64();
        let decision = self.policy.select_at(&self.sid, &features, &clip.id, ordinal)?;
        let t_selection = start.elapsed().as_secs_f64() - t_features;
        let model = self.conversions.get(&decision.source_id, &decision.target_id)?;
        let audio = self.converter.convert(model, clip)?.with_id(converted_id(&clip.id));
        let total = start.elapsed().as_secs_f64();
        Ok(Converted {
            decision,
            audio,
            timings: StageTimings {
                features: t_features,
                selection: t_selection,
                conversion: total - t_features - t_selection,
                transcription: None,
                total,
            },
        })
    }

    /// Identifies and converts a batch without transcribing it. Draw
    /// ordinals are reserved up front, so the decisions match a sequential
    /// run whatever the execution strategy.
    pub fn convert_batch(&self, clips: &[AudioClip]) -> Vec<Result<Converted, GatewayError>> {
        let first = self.policy.reserve(clips.len() as u64);
        self.exec.map_range(clips.len(), |i| self.convert_at(&clips[i], first + i as u64))
    }

    fn finish(&self, converted: Result<Converted, GatewayError>, utterance_id: &str) -> Result<UtteranceResult, GatewayError> {
        let out = converted.and_then(|c| self.transcribe(c, utterance_id));
        let counter = if out.is_ok() { &self.processed } else { &self.failed };
        counter.fetch_add(1, Ordering::SeqCst);
        out
    }

    fn transcribe(&self, c: Converted, utterance_id: &str) -> Result<UtteranceResult, GatewayError> {
        let mut result = UtteranceResult {
            utterance_id: utterance_id.to_string(),
            decision: c.decision,
            converted: c.audio,
            hypotheses: None,
            timings: c.timings,
        };
        let Some(asr) = &self.asr else {
            return Ok(result);
        };
        let start = Instant::now();
        // only the converted clip is ever sent
        let outcome = asr.transcribe(&result.converted, &self.context);
        let spent = start.elapsed().as_secs_f64();
        result.timings.transcription = Some(spent);
        result.timings.total += spent;
        let budget = self.budget.as_secs_f64();
        match outcome {
            Ok(h) if result.timings.total <= budget => {
                result.hypotheses = Some(h);
                Ok(result)
            }
            Ok(_) | Err(AsrError::Timeout(_)) => Err(GatewayError::TranscriptionTimeout {
                budget,
                elapsed: result.timings.total,
                result: Box::new(result),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs one utterance end to end using the next draw ordinal.
    pub fn process(&self, clip: &AudioClip) -> Result<UtteranceResult, GatewayError> {
        let ordinal = self.policy.reserve(1);
        self.finish(self.convert_at(clip, ordinal), &clip.id)
    }

    /// Runs a batch end to end; results are in input order.
    pub fn process_batch(&self, clips: &[AudioClip]) -> Vec<Result<UtteranceResult, GatewayError>> {
        let first = self.policy.reserve(clips.len() as u64);
        self.exec.map_range(clips.len(), |i| {
            self.finish(self.convert_at(&clips[i], first + i as u64), &clips[i].id)
        })
    }

    /// Processes every manifest row, recording unreadable audio as a row
    /// failure instead of aborting.
    pub fn process_manifest(&self, manifest: &Manifest) -> Vec<RowOutcome> {
        let first = self.policy.reserve(manifest.rows.len() as u64);
        self.exec.map_range(manifest.rows.len(), |i| {
            let row = &manifest.rows[i];
            let id = row.id();
            let converted = manifest
                .load_utterance(row)
                .map_err(GatewayError::from)
                .and_then(|u| self.convert_at(&u.clip, first + i as u64));
            RowOutcome {
                row: i,
                result: self.finish(converted, &id),
                utterance_id: id,
            }
        })
    }

    /// Median SID (features plus scoring) and conversion times per clip.
    /// The converted pair is the one the policy would pick at ordinal 0;
    /// the draw stream is not advanced.
    pub fn bench_latency(&self, clips: &[AudioClip], repeats: usize) -> Result<Vec<LatencyRecord>, EvalError> {
        let mut out = Vec::with_capacity(clips.len());
        for clip in clips {
            let features = self.extractor.extract(clip).map_err(GatewayError::from)?;
            let decision = self
                .policy
                .select_at(&self.sid, &features, &clip.id, 0)
                .map_err(GatewayError::from)?;
            let model = self
                .conversions
                .get(&decision.source_id, &decision.target_id)
                .map_err(GatewayError::from)?;
            let sid = |c: &AudioClip| -> Result<(), EvalError> {
                let f = self.extractor.extract(c).map_err(GatewayError::from)?;
                self.sid.identify_among(&f, Some(self.policy.source_pool())).map_err(GatewayError::from)?;
                Ok(())
            };
            let convert = |c: &AudioClip| -> Result<(), EvalError> {
                self.converter.convert(model, c).map_err(GatewayError::from)?;
                Ok(())
            };
            out.extend(bench_latency(std::slice::from_ref(clip), repeats, sid, convert)?);
        }
        Ok(out)
    }
}
