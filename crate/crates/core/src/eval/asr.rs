//! Transcription backends behind one trait: a deterministic stub for
//! experiments and an HTTP client for a remote recognizer.

use std::collections::HashMap;
use std::io::Read;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use ureq::unversioned::multipart::{Form, Part};

use crate::audio::{wav_bytes, AudioClip};
use crate::corpus::fnv1a;

/// Appended to an utterance id when its audio has been converted.
pub const CONVERTED_SUFFIX: &str = ".vc";

/// Id of the converted version of utterance `id`.
pub fn converted_id(id: &str) -> String {
    format!("{id}{CONVERTED_SUFFIX}")
}

/// Splits a clip id into the utterance id and whether it marks converted audio.
pub fn utterance_of(clip_id: &str) -> (&str, bool) {
    match clip_id.strip_suffix(CONVERTED_SUFFIX) {
        Some(base) => (base, true),
        None => (clip_id, false),
    }
}

#[derive(Debug, Error)]
pub enum AsrError {
    #[error("transcription service unavailable: {0}")]
    Unavailable(String),
    #[error("transcription timed out after {0:?}")]
    Timeout(Duration),
    #[error("bad transcription response: {0}")]
    BadResponse(String),
    #[error("no reference transcript for utterance {0}")]
    UnknownUtterance(String),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub transcript: String,
    #[serde(default)]
    pub confidence: f64,
}

pub trait AsrClient: Send + Sync {
    /// Ranked hypotheses for `clip`, best first. `context` lists phrases the
    /// recognizer may favour.
    fn transcribe(&self, clip: &AudioClip, context: &[String]) -> Result<Vec<Hypothesis>, AsrError>;
}

/// Returns the reference transcript of each utterance, optionally deleting
/// tokens at a fixed rate from converted audio only. Deletions are seeded per
/// utterance, so repeated calls agree.
#[derive(Debug, Clone, Default)]
pub struct StubAsr {
    references: HashMap<String, String>,
    deletion_rate: f64,
    seed: u64,
}

impl StubAsr {
    pub fn identity(references: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            references: references.into_iter().collect(),
            deletion_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_deletions(mut self, rate: f64, seed: u64) -> Self {
        self.deletion_rate = rate.clamp(0.0, 1.0);
        self.seed = seed;
        self
    }

    pub fn deletion_rate(&self) -> f64 {
        self.deletion_rate
    }
}

impl AsrClient for StubAsr {
    fn transcribe(&self, clip: &AudioClip, _context: &[String]) -> Result<Vec<Hypothesis>, AsrError> {
        let (utt, converted) = utterance_of(&clip.id);
        let reference = self
            .references
            .get(utt)
            .ok_or_else(|| AsrError::UnknownUtterance(utt.to_string()))?;
        let transcript = if converted && self.deletion_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(fnv1a(utt.as_bytes()));
            reference
                .split_whitespace()
                .filter(|_| !rng.random_bool(self.deletion_rate))
                .collect::<Vec<_>>()
                .join(" ")
        } else {
            reference.clone()
        };
        Ok(vec![Hypothesis {
            transcript,
            confidence: 1.0,
        }])
    }
}

/// Posts `multipart/form-data` with an `audio` part (16-bit WAV) and a
/// `request` part holding `{"id": ..., "context": [...]}`. Expects
/// `{"hypotheses": [{"transcript": ..., "confidence": ...}]}` back.
#[derive(Debug, Clone)]
pub struct HttpAsr {
    endpoint: String,
    timeout: Duration,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct HttpRequestMeta<'a> {
    id: &'a str,
    context: &'a [String],
}

#[derive(Deserialize)]
struct HttpResponse {
    hypotheses: Vec<Hypothesis>,
}

/// Largest response body accepted.
const MAX_RESPONSE_BYTES: u64 = 1 << 20;

impl HttpAsr {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            timeout,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl AsrClient for HttpAsr {
    fn transcribe(&self, clip: &AudioClip, context: &[String]) -> Result<Vec<Hypothesis>, AsrError> {
        let wav = wav_bytes(clip)?;
        let meta = serde_json::to_string(&HttpRequestMeta { id: &clip.id, context })
            .map_err(|e| AsrError::BadResponse(e.to_string()))?;
        let audio = Part::bytes(&wav)
            .file_name("audio.wav")
            .mime_str("audio/wav")
            .map_err(|e| AsrError::BadResponse(e.to_string()))?;
        let meta_part = Part::text(&meta)
            .mime_str("application/json")
            .map_err(|e| AsrError::BadResponse(e.to_string()))?;
        let form = Form::new().part("audio", audio).part("request", meta_part);
        let response = self.agent.post(&self.endpoint).send(form).map_err(|e| match e {
            ureq::Error::Timeout(_) => AsrError::Timeout(self.timeout),
            other => AsrError::Unavailable(other.to_string()),
        })?;
        let status = response.status();
        let mut body = String::new();
        response
            .into_body()
            .into_reader()
            .take(MAX_RESPONSE_BYTES)
            .read_to_string(&mut body)
            .map_err(|e| AsrError::Unavailable(e.to_string()))?;
        if status.is_server_error() {
            return Err(AsrError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(AsrError::BadResponse(format!("status {status}: {body}")));
        }
        let parsed: HttpResponse = serde_json::from_str(&body).map_err(|e| AsrError::BadResponse(e.to_string()))?;
        Ok(parsed.hypotheses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str) -> AudioClip {
        AudioClip::new(id, 16000, vec![0.0; 160]).unwrap()
    }

    fn refs() -> StubAsr {
        StubAsr::identity([("u1".to_string(), "turn on the kitchen lights please now".to_string())])
    }

    #[test]
    fn identity_stub_echoes_reference() {
        let asr = refs();
        for id in ["u1", "u1.vc"] {
            assert_eq!(asr.transcribe(&clip(id), &[]).unwrap()[0].transcript, "turn on the kitchen lights please now");
        }
        assert!(matches!(asr.transcribe(&clip("u2"), &[]), Err(AsrError::UnknownUtterance(_))));
    }

    #[test]
    fn deletions_only_touch_converted_audio() {
        let asr = refs().with_deletions(0.5, 3);
        assert_eq!(asr.transcribe(&clip("u1"), &[]).unwrap()[0].transcript, "turn on the kitchen lights please now");
        let a = asr.transcribe(&clip("u1.vc"), &[]).unwrap();
        let b = asr.transcribe(&clip("u1.vc"), &[]).unwrap();
        assert_eq!(a, b);
        assert!(a[0].transcript.split_whitespace().count() < 7);
        let all = refs().with_deletions(1.0, 3);
        assert_eq!(all.transcribe(&clip("u1.vc"), &[]).unwrap()[0].transcript, "");
    }

    #[test]
    fn converted_ids() {
        assert_eq!(utterance_of(&converted_id("a_001")), ("a_001", true));
        assert_eq!(utterance_of("a_001"), ("a_001", false));
    }
}
