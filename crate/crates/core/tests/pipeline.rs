mod common;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use voxveil::audio::AudioClip;
use voxveil::corpus::{write_corpus, Split};
use voxveil::eval::asr::{utterance_of, AsrClient, AsrError, Hypothesis, StubAsr};
use voxveil::eval::{run_tradeoff, HttpAsr};
use voxveil::exec::Exec;
use voxveil::gateway::{bundle_loads, GatewayError, ModelBundle, Pipeline, PipelineConfig};
use voxveil::manifest::Manifest;
use voxveil::selection::{audit_log, read_audit_log, SelectionConfig};

fn config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        selection: SelectionConfig {
            seed: Some(seed),
            ..SelectionConfig::default()
        },
        ..PipelineConfig::default()
    }
}

/// Records every clip it is asked to transcribe.
#[derive(Default)]
struct Tap {
    seen: Mutex<Vec<AudioClip>>,
    delay: Duration,
}

impl AsrClient for Tap {
    fn transcribe(&self, clip: &AudioClip, _context: &[String]) -> Result<Vec<Hypothesis>, AsrError> {
        std::thread::sleep(self.delay);
        self.seen.lock().unwrap().push(clip.clone());
        Ok(vec![Hypothesis { transcript: "ok".into(), confidence: 0.5 }])
    }
}

struct SharedTap(Arc<Tap>);

impl AsrClient for SharedTap {
    fn transcribe(&self, clip: &AudioClip, context: &[String]) -> Result<Vec<Hypothesis>, AsrError> {
        self.0.transcribe(clip, context)
    }
}

#[test]
fn gateway_end_to_end() {
    let (bundle, utts) = common::bundle();
    assert_eq!(bundle.sid.len(), 4);
    assert_eq!(bundle.conversions.len(), 12);

    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let before = bundle_loads();
    let tap = Arc::new(Tap::default());
    let pipeline = Pipeline::load(dir.path(), &config(3)).unwrap().with_asr(Box::new(SharedTap(tap.clone())));
    let test: Vec<AudioClip> = utts.iter().filter(|u| u.split == Split::Test).map(|u| u.clip.clone()).collect();
    assert!(test.len() >= 8);

    // models are read once, however many utterances follow
    let mut results = Vec::new();
    for clip in &test {
        results.push(pipeline.process(clip).unwrap());
    }
    assert_eq!(bundle_loads() - before, 1);
    assert_eq!(pipeline.counters(), (test.len() as u64, 0));

    // privacy tap: the recognizer only ever sees converted audio
    let seen = tap.seen.lock().unwrap();
    assert_eq!(seen.len(), test.len());
    let truth = |id: &str| utts.iter().find(|u| u.clip.id == id).unwrap().speaker.clone();
    let mut disguised = 0;
    for (clip, original) in seen.iter().zip(&test) {
        let (utt, converted) = utterance_of(&clip.id);
        assert!(converted && utt == original.id);
        assert_ne!(clip.samples, original.samples);
        let f = pipeline.extractor().extract(clip).unwrap();
        let top = &pipeline.sid().identify(&f).unwrap()[0].speaker_id;
        disguised += usize::from(*top != truth(utt));
    }
    let chance = 0.25;
    assert!(disguised as f64 >= (1.0 - chance - 0.15) * seen.len() as f64, "{disguised}/{}", seen.len());

    for (r, clip) in results.iter().zip(&test) {
        assert_ne!(r.decision.source_id, r.decision.target_id);
        assert_eq!(r.decision.source_id, truth(&clip.id), "enrolled speakers are recognized");
        let d = (r.converted.len() as f64 - clip.len() as f64).abs() / clip.len() as f64;
        assert!(d <= 0.05);
        assert!(r.timings.transcription.is_some());
        assert!(r.hypotheses.as_ref().unwrap()[0].transcript == "ok");
    }
}

#[test]
fn decisions_reproducible_across_runs_and_exec() {
    let (bundle, utts) = common::bundle();
    let clips: Vec<AudioClip> = utts.iter().take(12).map(|u| u.clip.clone()).collect();
    let run = |exec| {
        let p = Pipeline::new(bundle.clone(), &config(42)).unwrap().with_exec(exec);
        p.convert_batch(&clips).into_iter().map(Result::unwrap).collect::<Vec<_>>()
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Parallel);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.decision, y.decision);
        assert_eq!(x.audio, y.audio);
    }
    let mut log = Vec::new();
    audit_log(a.iter().map(|c| &c.decision), &mut log).unwrap();
    let records = read_audit_log(&log[..]).unwrap();
    let p = Pipeline::new(bundle, &config(42)).unwrap();
    assert_eq!(p.policy().replay(&records).unwrap(), records);
}

#[test]
fn transcription_timeout_keeps_converted_audio() {
    let (bundle, utts) = common::bundle();
    let cfg = PipelineConfig { latency_budget: 0.05, ..config(1) };
    let slow = Tap { delay: Duration::from_millis(200), ..Tap::default() };
    let p = Pipeline::new(bundle, &cfg).unwrap().with_asr(Box::new(slow));
    match p.process(&utts[0].clip) {
        Err(GatewayError::TranscriptionTimeout { result, elapsed, .. }) => {
            assert!(elapsed > 0.05);
            assert!(result.converted.id.ends_with(".vc"));
            assert!(result.hypotheses.is_none());
        }
        other => panic!("expected timeout, got {other:?}"),
    }
    assert_eq!(p.counters(), (0, 1));
}

#[test]
fn manifest_rows_fail_independently() {
    let (bundle, utts) = common::bundle();
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(dir.path(), &utts[..5]).unwrap();
    std::fs::remove_file(dir.path().join(format!("wav/{}.wav", utts[2].clip.id))).unwrap();
    let manifest = Manifest::load(&path).unwrap();
    let p = Pipeline::new(bundle, &config(9)).unwrap();
    let out = p.process_manifest(&manifest);
    assert_eq!(out.len(), 5);
    for (i, o) in out.iter().enumerate() {
        assert_eq!(o.row, i);
        assert_eq!(o.utterance_id, utts[i].clip.id);
        assert_eq!(o.result.is_err(), i == 2);
    }
    assert!(matches!(out[2].result, Err(GatewayError::Audio(_))));
}

#[test]
fn wrong_rate_and_bad_pools_rejected() {
    let (bundle, _) = common::bundle();
    let p = Pipeline::new(bundle.clone(), &config(0)).unwrap();
    let clip = AudioClip::new("x", 8000, vec![0.1; 8000]).unwrap();
    assert!(matches!(p.process(&clip), Err(GatewayError::Audio(_))));
    let cfg = PipelineConfig {
        selection: SelectionConfig {
            target_pool: Some(vec!["ghost".into()]),
            ..SelectionConfig::default()
        },
        ..PipelineConfig::default()
    };
    assert!(matches!(Pipeline::new(bundle, &cfg), Err(GatewayError::Selection(_))));
}

#[test]
fn tradeoff_with_stub_and_unreachable_recognizer() {
    let (bundle, utts) = common::bundle();
    let test: Vec<_> = utts.iter().filter(|u| u.split == Split::Test).cloned().collect();
    let attacker = bundle.sid.clone();
    let p = Pipeline::new(bundle, &config(5)).unwrap();
    let stub = StubAsr::identity(utts.iter().map(|u| (u.clip.id.clone(), u.transcript.clone())));
    let r = run_tradeoff(&p, &attacker, &test, &stub, 0.0, &[]).unwrap();
    assert_eq!(r.wer_gap, Some(0.0));
    assert!(r.constraint_met && !r.partial);
    assert_eq!(r.sid_original.accuracy, 1.0);
    assert!(r.sid_converted.accuracy <= r.chance + 0.15, "{}", r.sid_converted.accuracy);
    assert_eq!(r.decisions.len(), test.len());

    // nothing listens on a freshly closed port
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let down = HttpAsr::new(format!("http://127.0.0.1:{port}/asr"), Duration::from_secs(2));
    let r = run_tradeoff(&p, &attacker, &test, &down, 0.1, &[]).unwrap();
    assert!(r.partial && !r.constraint_met);
    assert!(r.wer_original.is_none() && r.asr_error.is_some());
    assert_eq!(r.sid_original.accuracy, 1.0);
}

#[test]
fn bundle_round_trip_and_corruption() {
    let (bundle, utts) = common::bundle();
    let dir = tempfile::tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let back = ModelBundle::load(dir.path()).unwrap();
    let f = voxveil::features::FeatureExtractor::new(bundle.features.clone()).unwrap().extract(&utts[0].clip).unwrap();
    assert_eq!(bundle.sid.identify(&f).unwrap(), back.sid.identify(&f).unwrap());
    assert_eq!(bundle.conversions.models().count(), back.conversions.models().count());

    std::fs::write(dir.path().join("bundle.json"), "{\"format\": \"nope\"}").unwrap();
    assert!(ModelBundle::load(dir.path()).is_err());
}
