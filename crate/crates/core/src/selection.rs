//! Source/target choice for each utterance: the source is the closest
//! enrolled voice, the target a uniform random draw from the remaining pool.
//!
//! Draws come from a counter-based stream keyed by (seed, ordinal), so every
//! decision can be replayed from the seed and its ordinal alone.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::sid::{SidError, SidScore, SpeakerRegistry};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("speaker {0} in a pool is not enrolled")]
    UnknownSpeaker(String),
    #[error("no eligible target for source {0}")]
    EmptyEffectiveTargetPool(String),
    #[error(transparent)]
    Sid(#[from] SidError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Serializable pool and seed settings. Absent pools mean every enrolled
/// speaker; an absent seed means one drawn from OS entropy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub source_pool: Option<Vec<String>>,
    pub target_pool: Option<Vec<String>>,
    pub seed: Option<u64>,
    /// Decisions whose top score falls below this are flagged low-confidence.
    pub confidence_floor: Option<f64>,
}

#[derive(Debug)]
pub struct SelectionPolicy {
    source_pool: BTreeSet<String>,
    target_pool: BTreeSet<String>,
    seed: u64,
    confidence_floor: Option<f64>,
    next_ordinal: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub utterance_id: String,
    pub source_id: String,
    pub target_id: String,
    /// Scores over the source pool, best first.
    pub source_scores: Vec<SidScore>,
    pub draw_index: u64,
    pub low_confidence: bool,
}

impl SelectionPolicy {
    pub fn new(
        source_pool: impl IntoIterator<Item = String>,
        target_pool: impl IntoIterator<Item = String>,
        seed: u64,
    ) -> Result<Self, SelectionError> {
        let source_pool: BTreeSet<String> = source_pool.into_iter().collect();
        let target_pool: BTreeSet<String> = target_pool.into_iter().collect();
        if source_pool.is_empty() {
            return Err(SelectionError::EmptyPool("source"));
        }
        if target_pool.is_empty() {
            return Err(SelectionError::EmptyPool("target"));
        }
        for s in &source_pool {
            if target_pool.len() == 1 && target_pool.contains(s) {
                return Err(SelectionError::EmptyEffectiveTargetPool(s.clone()));
            }
        }
        Ok(Self {
            source_pool,
            target_pool,
            seed,
            confidence_floor: None,
            next_ordinal: AtomicU64::new(0),
        })
    }

    /// Resolves a config against the enrolled speakers.
    pub fn from_config(cfg: &SelectionConfig, registry: &SpeakerRegistry) -> Result<Self, SelectionError> {
        let all = || registry.speaker_ids().map(str::to_string).collect::<Vec<_>>();
        let sources = cfg.source_pool.clone().unwrap_or_else(all);
        let targets = cfg.target_pool.clone().unwrap_or_else(all);
        let seed = cfg.seed.unwrap_or_else(|| rand::rng().random());
        let policy = Self::new(sources, targets, seed)?.with_confidence_floor(cfg.confidence_floor);
        policy.check_against(registry)?;
        Ok(policy)
    }

    pub fn with_confidence_floor(mut self, floor: Option<f64>) -> Self {
        self.confidence_floor = floor;
        self
    }

    /// Fails unless every pooled speaker is enrolled in `registry`.
    pub fn check_against(&self, registry: &SpeakerRegistry) -> Result<(), SelectionError> {
        match self.source_pool.iter().chain(&self.target_pool).find(|id| !registry.contains(id)) {
            Some(id) => Err(SelectionError::UnknownSpeaker(id.clone())),
            None => Ok(()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_pool(&self) -> &BTreeSet<String> {
        &self.source_pool
    }

    pub fn target_pool(&self) -> &BTreeSet<String> {
        &self.target_pool
    }

    /// Ordinal the next [`select`](Self::select) call will use.
    pub fn position(&self) -> u64 {
        self.next_ordinal.load(Ordering::SeqCst)
    }

    /// Claims `n` consecutive ordinals and returns the first, so a batch can
    /// be decided in parallel with [`select_at`](Self::select_at) and still
    /// match a sequential run.
    pub fn reserve(&self, n: u64) -> u64 {
        self.next_ordinal.fetch_add(n, Ordering::SeqCst)
    }

    /// Decides one utterance using the next ordinal of the stream.
    pub fn select(
        &self,
        registry: &SpeakerRegistry,
        features: &FeatureMatrix,
        utterance_id: &str,
    ) -> Result<SelectionDecision, SelectionError> {
        let scores = registry.identify_among(features, Some(&self.source_pool))?;
        let ordinal = self.reserve(1);
        self.decide(scores, ordinal, utterance_id)
    }

    /// Decides one utterance at an explicit ordinal without advancing the stream.
    pub fn select_at(
        &self,
        registry: &SpeakerRegistry,
        features: &FeatureMatrix,
        utterance_id: &str,
        ordinal: u64,
    ) -> Result<SelectionDecision, SelectionError> {
        let scores = registry.identify_among(features, Some(&self.source_pool))?;
        self.decide(scores, ordinal, utterance_id)
    }

    fn decide(&self, scores: Vec<SidScore>, ordinal: u64, utterance_id: &str) -> Result<SelectionDecision, SelectionError> {
        let top = scores.first().ok_or(SelectionError::EmptyPool("source"))?;
        let source_id = top.speaker_id.clone();
        let stat = top.llr;
        let target_id = self.draw_target(&source_id, ordinal)?;
        Ok(SelectionDecision {
            utterance_id: utterance_id.to_string(),
            low_confidence: self.confidence_floor.is_some_and(|f| stat < f),
            source_id,
            target_id,
            source_scores: scores,
            draw_index: ordinal,
        })
    }

    /// The target drawn for `source` at `ordinal`: uniform over the target
    /// pool without `source`, in lexicographic order.
    pub fn draw_target(&self, source: &str, ordinal: u64) -> Result<String, SelectionError> {
        let eligible: Vec<&String> = self.target_pool.iter().filter(|t| *t != source).collect();
        if eligible.is_empty() {
            return Err(SelectionError::EmptyEffectiveTargetPool(source.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ordinal);
        Ok(eligible[rng.random_range(0..eligible.len())].clone())
    }

    /// Recomputes each record's target from its source and ordinal.
    pub fn replay(&self, records: &[AuditRecord]) -> Result<Vec<AuditRecord>, SelectionError> {
        records
            .iter()
            .map(|r| {
                Ok(AuditRecord {
                    target: self.draw_target(&r.source, r.ordinal)?,
                    ..r.clone()
                })
            })
            .collect()
    }
}

/// One line of the audit log. Holds no audio or features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub utt: String,
    pub source: String,
    pub target: String,
    pub ordinal: u64,
    pub low_confidence: bool,
}

impl From<&SelectionDecision> for AuditRecord {
    fn from(d: &SelectionDecision) -> Self {
        Self {
            utt: d.utterance_id.clone(),
            source: d.source_id.clone(),
            target: d.target_id.clone(),
            ordinal: d.draw_index,
            low_confidence: d.low_confidence,
        }
    }
}

/// Appends one JSON line per decision, in order.
pub fn audit_log<'a>(
    decisions: impl IntoIterator<Item = &'a SelectionDecision>,
    out: &mut impl Write,
) -> Result<usize, SelectionError> {
    let mut n = 0;
    for d in decisions {
        serde_json::to_writer(&mut *out, &AuditRecord::from(d))?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

pub fn write_audit_records(records: &[AuditRecord], out: &mut impl Write) -> Result<(), SelectionError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_audit_log(input: impl BufRead) -> Result<Vec<AuditRecord>, SelectionError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
