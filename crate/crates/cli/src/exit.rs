//! Process exit codes and the mapping from library errors onto them.

use std::fmt;
use std::process::ExitCode;

use voxveil::audio::AudioError;
use voxveil::conversion::ConversionError;
use voxveil::eval::{AsrError, EvalError};
use voxveil::features::FeatureError;
use voxveil::gateway::GatewayError;
use voxveil::gmm::GmmError;
use voxveil::manifest::ManifestError;
use voxveil::selection::SelectionError;
use voxveil::sid::SidError;

/// Documented exit codes. They are disjoint; 0 means complete success.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Code {
    Ok = 0,
    ConstraintViolated = 1,
    Manifest = 2,
    InsufficientData = 3,
    Audio = 4,
    AsrUnreachable = 5,
    Other = 6,
    Usage = 64,
}

impl From<Code> for ExitCode {
    fn from(c: Code) -> Self {
        ExitCode::from(c as u8)
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub message: String,
}

impl Failure {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Code::Usage, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(Code::Other, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn audio_code(_: &AudioError) -> Code {
    Code::Audio
}

fn feature_code(e: &FeatureError) -> Code {
    match e {
        FeatureError::Audio(a) => audio_code(a),
        _ => Code::Other,
    }
}

fn gmm_code(e: &GmmError) -> Code {
    match e {
        GmmError::TooFewFrames { .. } | GmmError::EmptyFeatures => Code::InsufficientData,
        GmmError::Feature(f) => feature_code(f),
        _ => Code::Other,
    }
}

fn sid_code(e: &SidError) -> Code {
    match e {
        SidError::EmptyRegistry => Code::InsufficientData,
        SidError::Gmm(g) => gmm_code(g),
        _ => Code::Other,
    }
}

fn asr_code(e: &AsrError) -> Code {
    match e {
        AsrError::Unavailable(_) | AsrError::Timeout(_) => Code::AsrUnreachable,
        _ => Code::Other,
    }
}

fn gateway_code(e: &GatewayError) -> Code {
    match e {
        GatewayError::Audio(a) => audio_code(a),
        GatewayError::Feature(f) => feature_code(f),
        GatewayError::Sid(s) => sid_code(s),
        GatewayError::Selection(SelectionError::Sid(s)) => sid_code(s),
        GatewayError::Conversion(ConversionError::InsufficientVoicedData { .. }) => Code::InsufficientData,
        GatewayError::Conversion(ConversionError::Audio(a)) => audio_code(a),
        GatewayError::Manifest(_) => Code::Manifest,
        GatewayError::Transcription(a) => asr_code(a),
        GatewayError::TooFewSpeakers(_) => Code::InsufficientData,
        _ => Code::Other,
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Self::new(gateway_code(&e), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::EmptyInput(_) | EvalError::EmptyReference => Code::InsufficientData,
            EvalError::InvalidDelta(_) | EvalError::InvalidArgument(_) => Code::Usage,
            EvalError::Asr(a) => asr_code(a),
            EvalError::Sid(s) => sid_code(s),
            EvalError::Gateway(g) => gateway_code(g),
            _ => Code::Other,
        };
        Self::new(code, e.to_string())
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Self::new(Code::Manifest, e.to_string())
    }
}

impl From<AudioError> for Failure {
    fn from(e: AudioError) -> Self {
        Self::new(audio_code(&e), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::other(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_disjoint() {
        let all = [
            Code::Ok,
            Code::ConstraintViolated,
            Code::Manifest,
            Code::InsufficientData,
            Code::Audio,
            Code::AsrUnreachable,
            Code::Other,
            Code::Usage,
        ];
        let mut seen: Vec<u8> = all.iter().map(|c| *c as u8).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), all.len());
    }

    #[test]
    fn nested_errors_keep_their_class() {
        let rate = AudioError::SampleRateMismatch {
            expected: 16000,
            found: 8000,
        };
        assert_eq!(Failure::from(GatewayError::Feature(FeatureError::Audio(rate))).code, Code::Audio);
        let thin = GmmError::TooFewFrames { frames: 3, components: 8 };
        assert_eq!(Failure::from(GatewayError::from(thin)).code, Code::InsufficientData);
        let down = EvalError::Gateway(Box::new(GatewayError::Transcription(AsrError::Unavailable("x".into()))));
        assert_eq!(Failure::from(down).code, Code::AsrUnreachable);
        assert_eq!(Failure::from(GatewayError::TooFewSpeakers(1)).code, Code::InsufficientData);
    }
}
