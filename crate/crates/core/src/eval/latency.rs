//! Wall-clock timing of identification and conversion per utterance.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::audio::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub duration: f64,
    pub sid_time: f64,
    pub conversion_time: f64,
    /// Conversion time over utterance duration.
    pub rtf: f64,
}

/// Times `sid` and `convert` on every clip: one untimed warm-up call, then
/// the median over `repeats` timed calls (at least three).
pub fn bench_latency<S, C>(clips: &[AudioClip], repeats: usize, sid: S, convert: C) -> Result<Vec<LatencyRecord>, EvalError>
where
    S: Fn(&AudioClip) -> Result<(), EvalError>,
    C: Fn(&AudioClip) -> Result<(), EvalError>,
{
    if repeats < 3 {
        return Err(EvalError::InvalidArgument(format!("repeats must be >= 3, got {repeats}")));
    }
    clips
        .iter()
        .map(|clip| {
            let duration = clip.duration_seconds();
            let sid_time = median_time(repeats, || sid(clip))?;
            let conversion_time = median_time(repeats, || convert(clip))?;
            Ok(LatencyRecord {
                duration,
                sid_time,
                conversion_time,
                rtf: if duration > 0.0 { conversion_time / duration } else { f64::INFINITY },
            })
        })
        .collect()
}

fn median_time(repeats: usize, f: impl Fn() -> Result<(), EvalError>) -> Result<f64, EvalError> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Writes a header row even when `records` is empty.
pub fn write_latency_csv(records: &[LatencyRecord], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["duration", "sid_time", "conversion_time", "rtf"])?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Medians over utterances whose duration rounds down to the same second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBucket {
    pub seconds: u32,
    pub count: usize,
    pub median_rtf: f64,
    pub median_sid_time: f64,
}

pub fn latency_summary(records: &[LatencyRecord]) -> Vec<LatencyBucket> {
    let mut buckets: BTreeMap<u32, Vec<&LatencyRecord>> = BTreeMap::new();
    for r in records {
        buckets.entry(r.duration.floor() as u32).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|(seconds, rs)| LatencyBucket {
            seconds,
            count: rs.len(),
            median_rtf: median(&mut rs.iter().map(|r| r.rtf).collect::<Vec<_>>()),
            median_sid_time: median(&mut rs.iter().map(|r| r.sid_time).collect::<Vec<_>>()),
        })
        .collect()
}
