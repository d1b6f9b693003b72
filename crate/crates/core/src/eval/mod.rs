//! Privacy/utility trade-off: speaker-identification accuracy of an attacker
//! before and after conversion, against the word error rate a recognizer
//! achieves on the same utterances.
//!
//! The utility constraint is `|mean WER(converted) - mean WER(original)| <= delta`.

pub mod asr;
pub mod latency;
pub mod wer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use asr::{AsrClient, AsrError, Hypothesis, HttpAsr, StubAsr};
pub use latency::{latency_summary, write_latency_csv, LatencyBucket, LatencyRecord};
pub use wer::{edit_distance, normalize, wer, wer_stats, WerStats};

use crate::gateway::{GatewayError, Pipeline};
use crate::manifest::Utterance;
use crate::selection::AuditRecord;
use crate::sid::{evaluate_sid, SidAccuracyReport, SidError, SpeakerRegistry};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference transcript is empty after normalization")]
    EmptyReference,
    #[error("no {0} to summarize")]
    EmptyInput(&'static str),
    #[error("non-finite value")]
    NonFinite,
    #[error("delta must be finite and >= 0, got {0}")]
    InvalidDelta(f64),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Asr(#[from] AsrError),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Gateway(Box<GatewayError>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<GatewayError> for EvalError {
    fn from(e: GatewayError) -> Self {
        EvalError::Gateway(Box::new(e))
    }
}

/// True when the mean WERs differ by at most `delta`.
pub fn check_delta(wer_original: f64, wer_converted: f64, delta: f64) -> Result<bool, EvalError> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(EvalError::InvalidDelta(delta));
    }
    if !(wer_original.is_finite() && wer_converted.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok((wer_converted - wer_original).abs() <= delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub num_utterances: usize,
    pub delta: f64,
    /// Top-1 accuracy expected from guessing uniformly among the attacker's speakers.
    pub chance: f64,
    pub sid_original: SidAccuracyReport,
    pub sid_converted: SidAccuracyReport,
    pub wer_original: Option<WerStats>,
    pub wer_converted: Option<WerStats>,
    /// Mean converted WER minus mean original WER.
    pub wer_gap: Option<f64>,
    pub constraint_met: bool,
    /// Set when transcription failed and only the SID half was computed.
    pub partial: bool,
    pub asr_error: Option<String>,
    pub decisions: Vec<AuditRecord>,
}

/// Converts every test utterance through `pipeline`, scores original and
/// converted audio with the `attacker` SID, and transcribes both with `asr`.
/// An unreachable recognizer yields a partial report instead of an error.
pub fn run_tradeoff(
    pipeline: &Pipeline,
    attacker: &SpeakerRegistry,
    test_set: &[Utterance],
    asr: &dyn AsrClient,
    delta: f64,
    context: &[String],
) -> Result<TradeoffReport, EvalError> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(EvalError::InvalidDelta(delta));
    }
    if test_set.is_empty() {
        return Err(EvalError::EmptyInput("test utterances"));
    }
    if attacker.is_empty() {
        return Err(SidError::EmptyRegistry.into());
    }
    let extractor = pipeline.extractor();
    extractor
        .fingerprint()
        .ensure_eq(attacker.fingerprint())
        .map_err(GatewayError::from)?;
    let clips: Vec<_> = test_set.iter().map(|u| u.clip.clone()).collect();
    let converted = pipeline
        .convert_batch(&clips)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    let exec = pipeline.exec();
    let labelled = |audio: Vec<&crate::audio::AudioClip>| -> Result<Vec<_>, EvalError> {
        exec.map(&audio, |c| extractor.extract(c))
            .into_iter()
            .zip(test_set)
            .map(|(f, u)| Ok((f.map_err(GatewayError::from)?, u.speaker.clone())))
            .collect()
    };
    let sid_original = evaluate_sid(attacker, &labelled(clips.iter().collect())?)?;
    let sid_converted = evaluate_sid(attacker, &labelled(converted.iter().map(|c| &c.audio).collect())?)?;

    let transcripts = |audio: Vec<&crate::audio::AudioClip>| -> Result<Vec<f64>, EvalError> {
        exec.map(&audio, |c| asr.transcribe(c, context))
            .into_iter()
            .zip(test_set)
            .map(|(h, u)| {
                let best = h?.into_iter().next().map(|h| h.transcript).unwrap_or_default();
                wer(&u.transcript, &best)
            })
            .collect()
    };
    let wers = transcripts(clips.iter().collect()).and_then(|o| {
        let c = transcripts(converted.iter().map(|c| &c.audio).collect())?;
        Ok((o, c))
    });
    let (wer_original, wer_converted, asr_error) = match wers {
        Ok((o, c)) => (Some(wer_stats(&o)?), Some(wer_stats(&c)?), None),
        Err(EvalError::Asr(e @ (AsrError::Unavailable(_) | AsrError::Timeout(_)))) => (None, None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let wer_gap = wer_original.zip(wer_converted).map(|(o, c)| c.mean - o.mean);
    let constraint_met = match (wer_original, wer_converted) {
        (Some(o), Some(c)) => check_delta(o.mean, c.mean, delta)?,
        _ => false,
    };
    Ok(TradeoffReport {
        num_utterances: test_set.len(),
        delta,
        chance: 1.0 / attacker.len() as f64,
        sid_original,
        sid_converted,
        wer_original,
        wer_converted,
        wer_gap,
        constraint_met,
        partial: asr_error.is_some(),
        asr_error,
        decisions: converted.iter().map(|c| AuditRecord::from(&c.decision)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_check() {
        assert!(check_delta(0.1, 0.1, 0.0).unwrap());
        assert!(check_delta(0.1, 0.15, 0.05).unwrap());
        assert!(!check_delta(0.1, 0.2, 0.05).unwrap());
        assert!(check_delta(0.3, 0.1, 0.25).unwrap());
        assert!(matches!(check_delta(0.1, 0.1, -0.01), Err(EvalError::InvalidDelta(_))));
        assert!(matches!(check_delta(0.1, 0.1, f64::NAN), Err(EvalError::InvalidDelta(_))));
        assert!(matches!(check_delta(f64::NAN, 0.1, 0.1), Err(EvalError::NonFinite)));
    }
}
