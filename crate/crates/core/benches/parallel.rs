//! Sequential versus data-parallel execution of the batch stages: feature
//! extraction over many clips, EM on a pooled matrix, and batch conversion.
//! Both modes produce identical results; only wall time should differ.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use voxveil::corpus::{self, device_roster};
use voxveil::exec::Exec;
use voxveil::features::{FeatureConfig, FeatureExtractor, FeatureMatrix};
use voxveil::gateway::{ModelBundle, Pipeline, PipelineConfig, TrainConfig};
use voxveil::gmm::{fit_em, EmConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn fixtures() -> Vec<corpus::Utterance> {
    let roster: Vec<_> = device_roster().into_iter().take(4).collect();
    corpus::generate(&roster, 6, 1.0, 5, 16000)
}

fn bench(c: &mut Criterion) {
    let utterances = fixtures();
    let clips: Vec<_> = utterances.iter().map(|u| u.clip.clone()).collect();
    let extractor = FeatureExtractor::new(FeatureConfig::default()).unwrap();

    let mut group = c.benchmark_group("features");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&clips, |c| extractor.extract(black_box(c)).unwrap()))
        });
    }
    group.finish();

    let parts: Vec<FeatureMatrix> = clips.iter().map(|c| extractor.extract(c).unwrap()).collect();
    let pooled = FeatureMatrix::concat(&parts).unwrap();
    let mut group = c.benchmark_group("em");
    group.sample_size(10);
    for (name, exec) in MODES {
        let cfg = EmConfig {
            components: 16,
            max_iters: 10,
            exec,
            ..EmConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_em(black_box(&pooled), &cfg).unwrap())
        });
    }
    group.finish();

    let mut train = TrainConfig::default();
    train.em.components = 8;
    train.em.max_iters = 10;
    train.converter.min_voiced_seconds = 3.0;
    let bundle = ModelBundle::train(&utterances, &train).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.selection.seed = Some(1);
    let mut group = c.benchmark_group("convert_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        let pipeline = Pipeline::new(bundle.clone(), &cfg).unwrap().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pipeline.convert_batch(black_box(&clips)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
