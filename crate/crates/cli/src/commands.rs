//! One function per subcommand. Each returns the exit code for a run that
//! produced its artifacts, or a [`Failure`] for one that could not.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use voxveil::audio::{load_wav, save_wav};
use voxveil::corpus::{self, device_roster, user_roster};
use voxveil::eval::{
    latency_summary, run_tradeoff, write_latency_csv, AsrClient, HttpAsr, StubAsr, TradeoffReport, WerStats,
};
use voxveil::gateway::{train_sid, GatewayError, ModelBundle, Pipeline};
use voxveil::manifest::{Manifest, ManifestError, Split};
use voxveil::selection::write_audit_records;

use crate::config::CliConfig;
use crate::exit::{Code, Failure};

pub const REPORT_FILE: &str = "report.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const LATENCY_FILE: &str = "latency.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn pipeline(cfg: &CliConfig, bundle: ModelBundle) -> Result<Pipeline, Failure> {
    Ok(Pipeline::new(bundle, &cfg.pipeline)?.with_exec(cfg.exec()))
}

fn load_bundle(dir: &Path) -> Result<ModelBundle, Failure> {
    ModelBundle::load(dir).map_err(|e| Failure::new(Code::Other, format!("cannot load models from {}: {e}", dir.display())))
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &CliConfig, manifest: &Path, out: &Path) -> Result<Code, Failure> {
    let manifest = Manifest::load(manifest)?;
    let utterances = manifest.load_split(Some(Split::Train))?;
    let bundle = ModelBundle::train(&utterances, &cfg.train_config())?;
    bundle.save(out)?;
    cfg.snapshot(out)?;
    println!(
        "{} SID models, {} conversion models",
        bundle.sid.len(),
        bundle.conversions.len()
    );
    Ok(Code::Ok)
}

pub fn convert(cfg: &CliConfig, input: &Path, models: &Path, output: &Path) -> Result<Code, Failure> {
    let clip = load_wav(input)?;
    let p = pipeline(cfg, load_bundle(models)?)?;
    let result = p.process(&clip)?;
    eprintln!("{}", serde_json::to_string(&result.decision)?);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_wav(&result.converted, output)?;
    cfg.snapshot(parent_dir(output))?;
    Ok(Code::Ok)
}

pub fn identify(cfg: &CliConfig, input: &Path, models: &Path) -> Result<Code, Failure> {
    let clip = load_wav(input)?;
    let p = pipeline(cfg, load_bundle(models)?)?;
    let features = p.extractor().extract(&clip).map_err(GatewayError::from)?;
    let scores = p.sid().identify(&features).map_err(GatewayError::from)?;
    let out = serde_json::json!({
        "utterance_id": clip.id,
        "speaker_id": scores[0].speaker_id,
        "scores": scores,
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(Code::Ok)
}

fn recognizer(cfg: &CliConfig, manifest: &Manifest) -> Result<Box<dyn AsrClient>, Failure> {
    let e = &cfg.eval;
    if e.stub {
        if !(0.0..=1.0).contains(&e.stub_deletions) {
            return Err(Failure::usage(format!("stub deletion rate must be in [0, 1], got {}", e.stub_deletions)));
        }
        let refs = manifest.rows.iter().map(|r| (r.id(), r.transcript.clone()));
        return Ok(Box::new(StubAsr::identity(refs).with_deletions(e.stub_deletions, e.stub_seed)));
    }
    let Some(endpoint) = &e.asr_endpoint else {
        return Err(Failure::usage("eval needs --stub or --asr-endpoint"));
    };
    if !(e.asr_timeout.is_finite() && e.asr_timeout > 0.0) {
        return Err(Failure::usage(format!("recognizer timeout must be positive, got {}", e.asr_timeout)));
    }
    Ok(Box::new(HttpAsr::new(endpoint.clone(), Duration::from_secs_f64(e.asr_timeout))))
}

pub fn eval(cfg: &CliConfig, manifest: &Path, models: &Path, out: &Path) -> Result<Code, Failure> {
    let manifest = Manifest::load(manifest)?;
    let asr = recognizer(cfg, &manifest)?;
    let train = manifest.load_split(Some(Split::Train))?;
    let test = manifest.load_split(Some(Split::Test))?;
    let bundle = load_bundle(models)?;
    // the attacker must see the same features as the device models
    let mut attacker_cfg = cfg.train_config();
    attacker_cfg.features = bundle.features.clone();
    let attacker = train_sid(&train, &attacker_cfg)?;
    let p = pipeline(cfg, bundle)?;
    let report = run_tradeoff(&p, &attacker, &test, asr.as_ref(), cfg.eval.delta, &cfg.pipeline.context)?;

    std::fs::create_dir_all(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let mut audit = BufWriter::new(File::create(out.join(AUDIT_FILE))?);
    write_audit_records(&report.decisions, &mut audit).map_err(|e| Failure::other(e.to_string()))?;
    audit.flush()?;
    cfg.snapshot(out)?;
    print!("{}", statistics_block(&report));

    Ok(if report.partial {
        eprintln!("error: {}", report.asr_error.as_deref().unwrap_or("recognizer unavailable"));
        Code::AsrUnreachable
    } else if report.constraint_met {
        Code::Ok
    } else {
        Code::ConstraintViolated
    })
}

fn statistics_block(r: &TradeoffReport) -> String {
    let wer = |w: &Option<WerStats>| match w {
        Some(w) => format!(
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            w.mean, w.std, w.median, w.p75_mean
        ),
        None => format!("{:>9} {:>9} {:>9} {:>9}", "-", "-", "-", "-"),
    };
    let mut s = format!(
        "{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "data", "SID acc", "WER mean", "WER std", "WER med", "WER p75"
    );
    s += &format!("{:<10} {:>9.4} {}\n", "original", r.sid_original.accuracy, wer(&r.wer_original));
    s += &format!("{:<10} {:>9.4} {}\n", "converted", r.sid_converted.accuracy, wer(&r.wer_converted));
    let verdict = match (r.partial, r.constraint_met) {
        (true, _) => "not evaluated",
        (false, true) => "met",
        (false, false) => "violated",
    };
    let gap = r.wer_gap.map_or("-".to_string(), |g| format!("{g:+.4}"));
    s += &format!(
        "utterances {}, chance {:.4}, WER gap {gap}, delta {}, constraint {verdict}\n",
        r.num_utterances, r.chance, r.delta
    );
    s
}

pub fn bench(cfg: &CliConfig, manifest: &Path, models: &Path, out: &Path) -> Result<Code, Failure> {
    let repeats = cfg.bench.repeats;
    if repeats < 3 {
        return Err(Failure::usage(format!("repeats must be >= 3, got {repeats}")));
    }
    let clips = match Manifest::load(manifest) {
        Ok(m) => m.load_split(None)?.into_iter().map(|u| u.clip).collect(),
        Err(ManifestError::Empty(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let p = pipeline(cfg, load_bundle(models)?)?;
    let records = p.bench_latency(&clips, repeats)?;
    let summary = latency_summary(&records);

    std::fs::create_dir_all(out)?;
    let mut csv = BufWriter::new(File::create(out.join(LATENCY_FILE))?);
    write_latency_csv(&records, &mut csv)?;
    csv.flush()?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    cfg.snapshot(out)?;

    println!("{:>8} {:>6} {:>11} {:>13}", "seconds", "count", "median RTF", "median SID s");
    for b in &summary {
        println!(
            "{:>8} {:>6} {:>11.4} {:>13.4}",
            b.seconds, b.count, b.median_rtf, b.median_sid_time
        );
    }
    Ok(Code::Ok)
}

pub fn synth(
    cfg: &CliConfig,
    out: &Path,
    users: bool,
    per_speaker: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Code, Failure> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Failure::usage(format!("train fraction must be in [0, 1], got {train_fraction}")));
    }
    let roster = if users { user_roster() } else { device_roster() };
    let utterances = corpus::generate(&roster, per_speaker, train_fraction, seed, cfg.train.features.sample_rate);
    let path = corpus::write_corpus(out, &utterances)?;
    cfg.snapshot(out)?;
    println!("{}", path.display());
    Ok(Code::Ok)
}
