//! Synthetic speech corpus for tests, benchmarks and offline evaluation.
//!
//! Each speaker is a glottal source with its own F0 range and a vocal tract
//! whose formants are bilinearly warped by a per-speaker coefficient. Words
//! map deterministically to phone strings, so a transcript always renders as
//! the same phone sequence while timing, intonation and noise vary per seed.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, AudioClip, AudioError};
use crate::conversion::warp_frequency;
pub use crate::manifest::{Split, Utterance};
use crate::manifest::{write_manifest, ManifestRow};

/// Voice commands of the kind a living-room assistant receives.
pub const COMMANDS: &[&str] = &[
    "go back to the beginning of a video",
    "mute",
    "turn up the volume",
    "turn down the volume",
    "play the next episode",
    "pause the movie",
    "open the settings menu",
    "switch to channel five",
    "show me the weather",
    "stop",
    "resume playback",
    "skip forward thirty seconds",
    "turn on subtitles",
    "search for comedy movies",
    "go to the home screen",
    "record this show",
    "what is playing next",
    "change the input source",
    "set a timer for ten minutes",
    "turn off the television",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: String,
    /// Free-form group tag, e.g. "male" or "female".
    pub group: String,
    pub f0_hz: f64,
    /// Per-utterance F0 spread in semitones.
    pub f0_spread: f64,
    /// Bilinear warp applied to every formant frequency.
    pub warp_alpha: f64,
    /// Cycle-to-cycle period jitter, as a fraction of the period.
    pub jitter: f64,
}

impl SpeakerSpec {
    pub fn new(id: &str, group: &str, f0_hz: f64, warp_alpha: f64) -> Self {
        Self {
            id: id.to_string(),
            group: group.to_string(),
            f0_hz,
            f0_spread: 1.0,
            warp_alpha,
            jitter: 0.01,
        }
    }
}

/// Ten enrolled voices: five low-pitched with longer vocal tracts, five
/// high-pitched with shorter ones.
pub fn device_roster() -> Vec<SpeakerSpec> {
    let mut v: Vec<SpeakerSpec> = [(100.0, -0.16), (110.0, -0.12), (120.0, -0.08), (130.0, -0.04), (140.0, 0.0)]
        .iter()
        .enumerate()
        .map(|(i, (f0, a))| SpeakerSpec::new(&format!("m{}", i + 1), "male", *f0, *a))
        .collect();
    v.extend(
        [(190.0, 0.03), (205.0, 0.07), (220.0, 0.11), (235.0, 0.15), (250.0, 0.18)]
            .iter()
            .enumerate()
            .map(|(i, (f0, a))| SpeakerSpec::new(&format!("f{}", i + 1), "female", *f0, *a)),
    );
    v
}

/// Five end users, mutually well separated in F0 (at least 30% apart) and
/// vocal tract length, none identical to an enrolled voice.
pub fn user_roster() -> Vec<SpeakerSpec> {
    [
        ("u1", "male", 100.0, -0.14),
        ("u2", "male", 135.0, -0.06),
        ("u3", "female", 180.0, 0.02),
        ("u4", "female", 240.0, 0.10),
        ("u5", "female", 315.0, 0.17),
    ]
    .iter()
    .map(|(id, g, f0, a)| SpeakerSpec::new(id, g, *f0, *a))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phone {
    Vowel([f64; 3]),
    Voiced([f64; 3]),
    Fricative { centre: f64, bandwidth: f64 },
    Stop,
}

const VOWELS: [[f64; 3]; 8] = [
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [730.0, 1090.0, 2440.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
    [390.0, 1990.0, 2550.0],
];

const CONSONANTS: [Phone; 7] = [
    Phone::Voiced([250.0, 1100.0, 2200.0]),
    Phone::Voiced([280.0, 1700.0, 2600.0]),
    Phone::Voiced([360.0, 1300.0, 2700.0]),
    Phone::Fricative { centre: 5500.0, bandwidth: 2000.0 },
    Phone::Fricative { centre: 3000.0, bandwidth: 1200.0 },
    Phone::Fricative { centre: 1800.0, bandwidth: 3000.0 },
    Phone::Stop,
];

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

/// Deterministic phone string for a word.
fn phones_of(word: &str) -> Vec<Phone> {
    let mut h = fnv1a(word.as_bytes());
    let mut next = |m: u64| {
        let v = h % m;
        h = h.rotate_right(7).wrapping_mul(0x9e3779b97f4a7c15) ^ v;
        v as usize
    };
    let syllables = (word.len() / 3).clamp(1, 4);
    let mut out = Vec::new();
    for _ in 0..syllables {
        if next(3) > 0 {
            out.push(CONSONANTS[next(CONSONANTS.len() as u64)]);
        }
        out.push(Phone::Vowel(VOWELS[next(VOWELS.len() as u64)]));
        if next(2) > 0 {
            out.push(CONSONANTS[next(CONSONANTS.len() as u64)]);
        }
    }
    out
}

/// Frame-level parameter track, filled phone by phone.
struct Track {
    formants: Vec<[f64; 3]>,
    voicing: Vec<f64>,
    noise: Vec<f64>,
    noise_band: Vec<(f64, f64)>,
}

impl Track {
    fn push(&mut self, n: usize, formants: [f64; 3], voicing: f64, noise: f64, band: (f64, f64)) {
        for _ in 0..n {
            self.formants.push(formants);
            self.voicing.push(voicing);
            self.noise.push(noise);
            self.noise_band.push(band);
        }
    }

    fn len(&self) -> usize {
        self.voicing.len()
    }
}

/// Two-pole resonator with unity gain at DC.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64, sr: f64) -> f64 {
        let r = (-PI * bw / sr).exp();
        let b = 2.0 * r * (2.0 * PI * freq / sr).cos();
        let c = -r * r;
        let y = (1.0 - b - c) * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn warp_hz(f: f64, alpha: f64, sr: f64) -> f64 {
    warp_frequency(2.0 * PI * f / sr, alpha) * sr / (2.0 * PI)
}

/// Renders `text` in the voice of `spec`. The same (spec, text, seed) always
/// gives the same samples.
pub fn synthesize(spec: &SpeakerSpec, text: &str, seed: u64, sample_rate: u32) -> AudioClip {
    let sr = sample_rate as f64;
    let ms = |v: f64| (v * sr / 1000.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(spec.id.as_bytes()) ^ fnv1a(text.as_bytes()).rotate_left(17));

    let silence = [500.0, 1500.0, 2500.0];
    let mut track = Track {
        formants: Vec::new(),
        voicing: Vec::new(),
        noise: Vec::new(),
        noise_band: Vec::new(),
    };
    track.push(ms(rng.random_range(80.0..140.0)), silence, 0.0, 0.0, (0.0, 1.0));
    let words: Vec<&str> = text.split_whitespace().collect();
    for (wi, word) in words.iter().enumerate() {
        let mut last_formants = silence;
        for phone in phones_of(&word.to_lowercase()) {
            match phone {
                Phone::Vowel(f) => {
                    track.push(ms(rng.random_range(90.0..160.0)), f, 1.0, 0.0, (0.0, 1.0));
                    last_formants = f;
                }
                Phone::Voiced(f) => track.push(ms(rng.random_range(50.0..80.0)), f, 0.35, 0.0, (0.0, 1.0)),
                Phone::Fricative { centre, bandwidth } => {
                    track.push(ms(rng.random_range(60.0..110.0)), last_formants, 0.0, 0.25, (centre, bandwidth))
                }
                Phone::Stop => {
                    track.push(ms(rng.random_range(30.0..50.0)), last_formants, 0.0, 0.0, (0.0, 1.0));
                    track.push(ms(12.0), last_formants, 0.0, 0.4, (3500.0, 4000.0));
                }
            }
        }
        if wi + 1 < words.len() {
            track.push(ms(rng.random_range(20.0..60.0)), last_formants, 0.0, 0.0, (0.0, 1.0));
        }
    }
    track.push(ms(rng.random_range(80.0..140.0)), silence, 0.0, 0.0, (0.0, 1.0));
    let n = track.len();

    // ~8 ms smoothing of every control so phones glide into each other
    let smooth = |v: &mut Vec<f64>| {
        let k = 1.0 - (-1.0 / (0.008 * sr)).exp();
        let mut s = v.first().copied().unwrap_or(0.0);
        for x in v.iter_mut() {
            s += k * (*x - s);
            *x = s;
        }
    };
    let mut voicing = track.voicing.clone();
    let mut noise_amp = track.noise.clone();
    smooth(&mut voicing);
    smooth(&mut noise_amp);
    let mut formant_tracks: Vec<Vec<f64>> = (0..3).map(|i| track.formants.iter().map(|f| f[i]).collect()).collect();
    formant_tracks.iter_mut().for_each(smooth);

    let semis = Normal::new(0.0, spec.f0_spread).unwrap().sample(&mut rng);
    let base_f0 = spec.f0_hz * 2f64.powf(semis / 12.0);
    let contour_rate = rng.random_range(2.0..4.0);
    let contour_phase = rng.random_range(0.0..2.0 * PI);

    // glottal flow derivative, one period at a time
    let mut source = vec![0.0; n];
    let mut t = 0usize;
    while t < n {
        let pos = t as f64 / n.max(1) as f64;
        let f0 = base_f0 * (1.06 - 0.12 * pos) * (1.0 + 0.03 * (2.0 * PI * contour_rate * t as f64 / sr + contour_phase).sin());
        let jitter: f64 = StandardNormal.sample(&mut rng);
        let period = ((sr / f0) * (1.0 + spec.jitter * jitter)).max(4.0);
        let len = period.round() as usize;
        let open = 0.6 * period;
        let rise = 0.66 * open;
        let mut prev = 0.0;
        for i in 0..len.min(n - t) {
            let x = i as f64;
            let g = if x < rise {
                0.5 * (1.0 - (PI * x / rise).cos())
            } else if x < open {
                (0.5 * PI * (x - rise) / (open - rise)).cos()
            } else {
                0.0
            };
            source[t + i] = g - prev;
            prev = g;
        }
        t += len;
    }

    let alpha = spec.warp_alpha;
    let mut cascade: Vec<Resonator> = (0..5).map(|_| Resonator { y1: 0.0, y2: 0.0 }).collect();
    let mut frication = Resonator { y1: 0.0, y2: 0.0 };
    let bandwidths = [60.0, 90.0, 120.0, 180.0, 250.0];
    let upper = [warp_hz(3300.0, alpha, sr), warp_hz(4200.0, alpha, sr)];
    let mut voiced = vec![0.0; n];
    let mut fric = vec![0.0; n];
    for i in 0..n {
        let aspiration: f64 = StandardNormal.sample(&mut rng);
        let mut v = voicing[i] * source[i] + 0.0005 * voicing[i] * aspiration;
        for (k, res) in cascade.iter_mut().enumerate() {
            let f = if k < 3 { warp_hz(formant_tracks[k][i], alpha, sr) } else { upper[k - 3] };
            v = res.step(v, f.min(0.45 * sr), bandwidths[k], sr);
        }
        voiced[i] = v;
        let (centre, bw) = track.noise_band[i];
        let w: f64 = StandardNormal.sample(&mut rng);
        let c = if centre > 0.0 { warp_hz(centre, alpha, sr).min(0.45 * sr) } else { 2000.0 };
        fric[i] = noise_amp[i] * (frication.step(w, c, bw, sr) - frication.y2);
    }
    // frication sits about 10 dB under the vowels
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let (rv, rf) = (rms(&voiced), rms(&fric));
    let gain = if rf > 0.0 { 0.6 * rv / rf } else { 0.0 };
    let out: Vec<f64> = voiced.iter().zip(&fric).map(|(v, f)| v + gain * f).collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4;
    let samples: Vec<f64> = out
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (if peak > 0.0 { 0.5 * v / peak } else { 0.0 }) + floor * z
        })
        .collect();
    AudioClip::new(format!("{}-{:016x}", spec.id, seed), sample_rate, samples).expect("finite synthesis")
}

/// A command sentence of one to three phrases, chosen by `rng`.
pub fn random_transcript(rng: &mut impl Rng) -> String {
    let k = rng.random_range(1..=3);
    (0..k).map(|_| COMMANDS[rng.random_range(0..COMMANDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Text long enough to render to roughly `seconds` of speech.
pub fn transcript_of_duration(seconds: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Vec::new();
    // about 0.33 s per word on average
    let target = (seconds / 0.33).round().max(1.0) as usize;
    while words.len() < target {
        let phrase = COMMANDS[rng.random_range(0..COMMANDS.len())];
        words.extend(phrase.split_whitespace());
    }
    words.truncate(target);
    words.join(" ")
}

/// `per_speaker` utterances for every speaker, with a seeded split that puts
/// `train_fraction` of the whole set (rounded) in the training portion.
pub fn generate(
    speakers: &[SpeakerSpec],
    per_speaker: usize,
    train_fraction: f64,
    seed: u64,
    sample_rate: u32,
) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(speakers.len() * per_speaker);
    for spec in speakers {
        for i in 0..per_speaker {
            let transcript = random_transcript(&mut rng);
            let utt_seed = rng.random::<u64>();
            let clip = synthesize(spec, &transcript, utt_seed, sample_rate).with_id(format!("{}_{:03}", spec.id, i));
            out.push(Utterance {
                clip,
                speaker: spec.id.clone(),
                transcript,
                split: Split::Test,
            });
        }
    }
    let n_train = (train_fraction * out.len() as f64).round() as usize;
    for i in rand::seq::index::sample(&mut rng, out.len(), n_train.min(out.len())) {
        out[i].split = Split::Train;
    }
    out
}

/// Writes each clip as `wav/<id>.wav` under `dir` plus a `manifest.csv`;
/// returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, utterances: &[Utterance]) -> Result<PathBuf, AudioError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("wav"))?;
    let mut rows = Vec::with_capacity(utterances.len());
    for u in utterances {
        let rel = format!("wav/{}.wav", u.clip.id);
        save_wav(&u.clip, dir.join(&rel))?;
        rows.push(ManifestRow {
            path: rel,
            speaker: u.speaker.clone(),
            transcript: u.transcript.clone(),
            split: u.split,
        });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &rows)?;
    Ok(path)
}
