#![allow(dead_code)]

use std::sync::OnceLock;

use voxveil::conversion::ConverterConfig;
use voxveil::corpus::{self, SpeakerSpec};
use voxveil::gateway::{ModelBundle, TrainConfig};
use voxveil::gmm::EmConfig;
use voxveil::manifest::Utterance;

pub const SR: u32 = 16000;

/// Four voices spread over pitch and vocal tract length.
pub fn speakers() -> Vec<SpeakerSpec> {
    vec![
        SpeakerSpec::new("lo1", "male", 100.0, -0.14),
        SpeakerSpec::new("lo2", "male", 135.0, -0.05),
        SpeakerSpec::new("hi1", "female", 190.0, 0.05),
        SpeakerSpec::new("hi2", "female", 250.0, 0.15),
    ]
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        em: EmConfig {
            components: 8,
            max_iters: 15,
            ..EmConfig::default()
        },
        converter: ConverterConfig {
            min_voiced_seconds: 3.0,
            ..ConverterConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn corpus(per_speaker: usize, seed: u64) -> Vec<Utterance> {
    corpus::generate(&speakers(), per_speaker, 0.7, seed, SR)
}

/// A bundle trained on the training half of a small corpus, built once per
/// test binary.
pub fn bundle() -> (ModelBundle, Vec<Utterance>) {
    static SHARED: OnceLock<(ModelBundle, Vec<Utterance>)> = OnceLock::new();
    SHARED
        .get_or_init(|| {
            let utts = corpus(8, 5);
            let train: Vec<Utterance> = utts.iter().filter(|u| u.split == corpus::Split::Train).cloned().collect();
            (ModelBundle::train(&train, &train_config()).unwrap(), utts)
        })
        .clone()
}
