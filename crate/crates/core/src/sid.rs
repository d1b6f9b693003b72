//! GMM-UBM speaker identification.
//!
//! One background model is trained on pooled speech; every enrolled speaker
//! gets a MAP-adapted copy of it. An utterance's closest speaker is the one
//! with the highest log-likelihood ratio against the background model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::features::{FeatureMatrix, Fingerprint};
use crate::gmm::{self, EmConfig, Gmm, GmmError};

/// Default MAP relevance factor.
pub const DEFAULT_RELEVANCE: f64 = 16.0;

#[derive(Debug, Error)]
pub enum SidError {
    #[error("registry has no enrolled speakers")]
    EmptyRegistry,
    #[error("speaker {0:?} is already enrolled")]
    DuplicateSpeaker(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("invalid speaker id {0:?}: use letters, digits, '_', '-' or '.'")]
    InvalidSpeakerId(String),
    #[error("registry format: {0}")]
    Format(String),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Speaker ids double as file names, so they are restricted to a safe set.
pub fn validate_speaker_id(id: &str) -> Result<(), SidError> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(SidError::InvalidSpeakerId(id.to_string()))
    }
}

/// Decision statistic used to rank speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Speaker log-likelihood minus background log-likelihood.
    #[default]
    Llr,
    /// Speaker log-likelihood alone (ablation).
    RawLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidScore {
    pub speaker_id: String,
    /// Mean per-frame log-likelihood ratio against the background model.
    pub llr: f64,
    /// Mean per-frame log-likelihood under the speaker model.
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct SpeakerRegistry {
    ubm: Gmm,
    speakers: BTreeMap<String, Gmm>,
    relevance: f64,
    scoring: Scoring,
    exec: Exec,
}

impl SpeakerRegistry {
    pub fn new(ubm: Gmm) -> Self {
        Self {
            ubm,
            speakers: BTreeMap::new(),
            relevance: DEFAULT_RELEVANCE,
            scoring: Scoring::Llr,
            exec: Exec::default(),
        }
    }

    pub fn with_relevance(mut self, relevance: f64) -> Self {
        self.relevance = relevance;
        self
    }

    pub fn with_scoring(mut self, scoring: Scoring) -> Self {
        self.scoring = scoring;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn ubm(&self) -> &Gmm {
        &self.ubm
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        self.ubm.fingerprint()
    }

    pub fn relevance(&self) -> f64 {
        self.relevance
    }

    pub fn scoring(&self) -> Scoring {
        self.scoring
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    /// Enrolled ids in lexicographic order.
    pub fn speaker_ids(&self) -> impl Iterator<Item = &str> {
        self.speakers.keys().map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.speakers.contains_key(id)
    }

    pub fn model(&self, id: &str) -> Option<&Gmm> {
        self.speakers.get(id)
    }

    /// Returns a registry with `speaker_id` added as a MAP-adapted model.
    pub fn enroll(&self, speaker_id: &str, features: &FeatureMatrix) -> Result<Self, SidError> {
        let mut next = self.clone();
        next.insert(speaker_id, self.adapt(speaker_id, features)?)?;
        Ok(next)
    }

    /// Enrolls several speakers, adapting their models in parallel.
    pub fn enroll_all(&self, batch: &[(String, FeatureMatrix)]) -> Result<Self, SidError> {
        let mut seen = BTreeSet::new();
        for (id, _) in batch {
            if self.contains(id) || !seen.insert(id.as_str()) {
                return Err(SidError::DuplicateSpeaker(id.clone()));
            }
        }
        let models = self.exec.map(batch, |(id, f)| self.adapt(id, f));
        let mut next = self.clone();
        for ((id, _), model) in batch.iter().zip(models) {
            next.insert(id, model?)?;
        }
        Ok(next)
    }

    fn adapt(&self, speaker_id: &str, features: &FeatureMatrix) -> Result<Gmm, SidError> {
        validate_speaker_id(speaker_id)?;
        if self.contains(speaker_id) {
            return Err(SidError::DuplicateSpeaker(speaker_id.to_string()));
        }
        Ok(gmm::map_adapt_with(&self.ubm, features, self.relevance, Exec::Sequential)?)
    }

    fn insert(&mut self, speaker_id: &str, model: Gmm) -> Result<(), SidError> {
        validate_speaker_id(speaker_id)?;
        if model.num_components() != self.ubm.num_components() {
            return Err(SidError::Format("speaker model size differs from UBM".into()));
        }
        self.ubm.fingerprint().ensure_eq(model.fingerprint()).map_err(GmmError::from)?;
        if self.speakers.insert(speaker_id.to_string(), model).is_some() {
            return Err(SidError::DuplicateSpeaker(speaker_id.to_string()));
        }
        Ok(())
    }

    /// Scores every enrolled speaker, best first.
    pub fn identify(&self, features: &FeatureMatrix) -> Result<Vec<SidScore>, SidError> {
        self.identify_among(features, None)
    }

    /// Scores the speakers in `pool` (or all, when `None`), best first. Ties
    /// are broken by lexicographic id.
    pub fn identify_among(
        &self,
        features: &FeatureMatrix,
        pool: Option<&BTreeSet<String>>,
    ) -> Result<Vec<SidScore>, SidError> {
        if self.is_empty() {
            return Err(SidError::EmptyRegistry);
        }
        let candidates: Vec<(&String, &Gmm)> = self
            .speakers
            .iter()
            .filter(|(id, _)| pool.is_none_or(|p| p.contains(*id)))
            .collect();
        if candidates.is_empty() {
            return Err(SidError::EmptyRegistry);
        }
        let background = self.ubm.log_likelihood(features)?;
        let mut scores = candidates
            .iter()
            .map(|(id, model)| {
                let ll = model.log_likelihood(features)?;
                Ok(SidScore {
                    speaker_id: (*id).clone(),
                    llr: ll - background,
                    log_likelihood: ll,
                })
            })
            .collect::<Result<Vec<_>, SidError>>()?;
        let stat = |s: &SidScore| match self.scoring {
            Scoring::Llr => s.llr,
            Scoring::RawLikelihood => s.log_likelihood,
        };
        scores.sort_by(|a, b| stat(b).total_cmp(&stat(a)).then_with(|| a.speaker_id.cmp(&b.speaker_id)));
        Ok(scores)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SidError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("speakers"))?;
        self.ubm.save(dir.join("ubm.json"))?;
        for (id, model) in &self.speakers {
            model.save(dir.join("speakers").join(format!("{id}.json")))?;
        }
        let manifest = RegistryManifest {
            format: gmm::GMM_FORMAT.to_string(),
            fingerprint: self.fingerprint().clone(),
            relevance: self.relevance,
            scoring: self.scoring,
            speakers: self.speakers.keys().cloned().collect(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SidError> {
        let dir = dir.as_ref();
        let manifest: RegistryManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != gmm::GMM_FORMAT {
            return Err(SidError::Format(format!("unexpected format {}", manifest.format)));
        }
        let ubm = Gmm::load(dir.join("ubm.json"))?;
        manifest.fingerprint.ensure_eq(ubm.fingerprint()).map_err(GmmError::from)?;
        let mut reg = SpeakerRegistry::new(ubm)
            .with_relevance(manifest.relevance)
            .with_scoring(manifest.scoring);
        for id in &manifest.speakers {
            validate_speaker_id(id)?;
            let model = Gmm::load(dir.join("speakers").join(format!("{id}.json")))?;
            reg.insert(id, model)?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryManifest {
    format: String,
    fingerprint: Fingerprint,
    relevance: f64,
    scoring: Scoring,
    speakers: Vec<String>,
}

/// Trains the background model on all frames of `enrollment` pooled, then
/// enrolls each speaker.
pub fn train_registry(
    enrollment: &[(String, FeatureMatrix)],
    em: &EmConfig,
    relevance: f64,
) -> Result<SpeakerRegistry, SidError> {
    if enrollment.is_empty() {
        return Err(SidError::EmptyRegistry);
    }
    let pooled = FeatureMatrix::concat(enrollment.iter().map(|(_, f)| f)).map_err(GmmError::from)?;
    let (ubm, _) = gmm::fit_em(&pooled, em)?;
    SpeakerRegistry::new(ubm)
        .with_relevance(relevance)
        .with_exec(em.exec)
        .enroll_all(enrollment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidAccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Row and column labels of `confusion`, sorted.
    pub labels: Vec<String>,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

impl SidAccuracyReport {
    pub fn from_predictions<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let labels: Vec<String> = pairs
            .iter()
            .flat_map(|(t, p)| [*t, *p])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let index = |s: &str| labels.binary_search_by(|l| l.as_str().cmp(s)).expect("label present");
        let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
        let mut correct = 0;
        for (t, p) in &pairs {
            confusion[index(t)][index(p)] += 1;
            correct += usize::from(t == p);
        }
        let total = pairs.len();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            labels,
            confusion,
        }
    }

    pub fn off_diagonal(&self) -> usize {
        let mut n = 0;
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if i != j {
                    n += c;
                }
            }
        }
        n
    }
}

/// Top-1 accuracy of `registry` over labelled utterances.
pub fn evaluate_sid(
    registry: &SpeakerRegistry,
    labeled: &[(FeatureMatrix, String)],
) -> Result<SidAccuracyReport, SidError> {
    let predictions = registry.exec.map(labeled, |(f, _)| {
        registry.identify(f).map(|s| s[0].speaker_id.clone())
    });
    let predictions = predictions.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SidAccuracyReport::from_predictions(
        labeled.iter().zip(&predictions).map(|((_, t), p)| (t.as_str(), p.as_str())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fp() -> Fingerprint {
        Fingerprint { framing: "t".into(), content: "sid".into() }
    }

    /// Speakers are isotropic blobs around distinct centres in 3-D.
    fn speaker_frames(centre: [f64; 3], n: usize, seed: u64) -> FeatureMatrix {
        let blob = Gmm::from_parts(vec![1.0], centre.to_vec(), vec![0.3; 3], 3, fp()).unwrap();
        blob.sample(n, seed)
    }

    fn centres() -> Vec<(String, [f64; 3])> {
        vec![
            ("alice".into(), [2.0, 0.0, 0.0]),
            ("bob".into(), [-2.0, 0.0, 0.0]),
            ("carol".into(), [0.0, 2.0, -1.0]),
            ("dave".into(), [0.0, -2.0, 1.0]),
        ]
    }

    fn registry() -> SpeakerRegistry {
        let enrol: Vec<(String, FeatureMatrix)> = centres()
            .into_iter()
            .enumerate()
            .map(|(i, (id, c))| (id, speaker_frames(c, 400, i as u64)))
            .collect();
        // a coarse background model shared by all speakers, as with real speech
        let em = EmConfig { components: 2, max_iters: 30, ..EmConfig::default() };
        train_registry(&enrol, &em, DEFAULT_RELEVANCE).unwrap()
    }

    #[test]
    fn enrollment_counts_and_duplicates() {
        let reg = registry();
        assert_eq!(reg.len(), 4);
        let empty = SpeakerRegistry::new(reg.ubm().clone());
        let one = empty.enroll("x", &speaker_frames([0.0; 3], 50, 1)).unwrap();
        assert_eq!((empty.len(), one.len()), (0, 1));
        assert!(matches!(
            one.enroll("x", &speaker_frames([0.0; 3], 50, 2)),
            Err(SidError::DuplicateSpeaker(_))
        ));
        assert!(matches!(one.enroll("../x", &speaker_frames([0.0; 3], 50, 2)), Err(SidError::InvalidSpeakerId(_))));
        assert!(matches!(empty.identify(&speaker_frames([0.0; 3], 5, 1)), Err(SidError::EmptyRegistry)));
    }

    #[test]
    fn own_distribution_identified() {
        let reg = registry();
        for (i, (id, c)) in centres().into_iter().enumerate() {
            let scores = reg.identify(&speaker_frames(c, 60, 100 + i as u64)).unwrap();
            assert_eq!(scores[0].speaker_id, id);
            assert_eq!(scores.len(), 4);
            assert!(scores.windows(2).all(|w| w[0].llr >= w[1].llr));
        }
    }

    #[test]
    fn singleton_and_pool_restriction() {
        let reg = registry();
        let single = SpeakerRegistry::new(reg.ubm().clone()).enroll("only", &speaker_frames([5.0; 3], 100, 3)).unwrap();
        let s = single.identify(&speaker_frames([-9.0; 3], 10, 4)).unwrap();
        assert_eq!(s[0].speaker_id, "only");
        let pool: BTreeSet<String> = ["bob".to_string(), "dave".to_string()].into();
        let frames = speaker_frames([2.0, 0.0, 0.0], 50, 5);
        let s = reg.identify_among(&frames, Some(&pool)).unwrap();
        assert!(s.iter().all(|x| pool.contains(&x.speaker_id)));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn llr_and_raw_agree_on_ranking() {
        // the background term is shared, so shifting it never reorders speakers
        let reg = registry();
        let raw = reg.clone().with_scoring(Scoring::RawLikelihood);
        for seed in 0..10 {
            let f = speaker_frames([0.5, 0.5, 0.0], 30, 200 + seed);
            let a: Vec<String> = reg.identify(&f).unwrap().into_iter().map(|s| s.speaker_id).collect();
            let b: Vec<String> = raw.identify(&f).unwrap().into_iter().map(|s| s.speaker_id).collect();
            assert_eq!(a, b);
            assert_eq!(a, reg.identify(&f).unwrap().into_iter().map(|s| s.speaker_id).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_broken_lexicographically() {
        let ubm = Gmm::from_parts(vec![1.0], vec![0.0; 3], vec![1.0; 3], 3, fp()).unwrap();
        let reg = SpeakerRegistry::new(ubm.clone());
        let f = speaker_frames([0.0; 3], 10, 1);
        let mut reg = reg;
        for id in ["zed", "amy", "kim"] {
            reg.insert(id, ubm.clone()).unwrap();
        }
        let ids: Vec<String> = reg.identify(&f).unwrap().into_iter().map(|s| s.speaker_id).collect();
        assert_eq!(ids, ["amy", "kim", "zed"]);
    }

    #[test]
    fn accuracy_report() {
        // 264 test utterances, 210 misclassified
        let mut pairs = Vec::new();
        for i in 0..264 {
            pairs.push(("s1", if i < 54 { "s1" } else { "s2" }));
        }
        let r = SidAccuracyReport::from_predictions(pairs);
        assert_eq!((r.correct, r.total), (54, 264));
        assert!((r.accuracy - 0.2045).abs() < 5e-5);
        assert_eq!(r.correct, r.total - r.off_diagonal());
        assert!((r.accuracy - (1.0 - r.off_diagonal() as f64 / r.total as f64)).abs() < 1e-15);

        let perfect = SidAccuracyReport::from_predictions([("a", "a"), ("b", "b"), ("b", "b")]);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.confusion, vec![vec![1, 0], vec![0, 2]]);
    }

    #[test]
    fn random_predictions_near_chance() {
        // 99% binomial band around p = 0.2 at n = 264 is roughly [0.137, 0.263]
        let ids = ["a", "b", "c", "d", "e"];
        let mut rng = ChaCha8Rng::seed_from_u64(2045);
        let pairs: Vec<(&str, &str)> = (0..264)
            .map(|i| (ids[i % 5], ids[rng.random_range(0..5)]))
            .collect();
        let r = SidAccuracyReport::from_predictions(pairs);
        assert!((0.12..=0.28).contains(&r.accuracy), "{}", r.accuracy);
    }

    #[test]
    fn evaluate_and_persist() {
        let reg = registry();
        let labeled: Vec<(FeatureMatrix, String)> = centres()
            .into_iter()
            .enumerate()
            .map(|(i, (id, c))| (speaker_frames(c, 40, 300 + i as u64), id))
            .collect();
        let report = evaluate_sid(&reg, &labeled).unwrap();
        assert_eq!(report.accuracy, 1.0, "{report:?}");

        let dir = tempfile::tempdir().unwrap();
        reg.save(dir.path()).unwrap();
        let back = SpeakerRegistry::load(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (f, _) in &labeled {
            assert_eq!(back.identify(f).unwrap(), reg.identify(f).unwrap());
        }
    }
}
