//! Run configuration: a TOML file layered under command-line flags.
//!
//! Every section is optional. Missing keys take the library defaults, and
//! unknown keys are rejected so typos do not pass silently.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxveil::exec::Exec;
use voxveil::gateway::{PipelineConfig, TrainConfig};

use crate::exit::Failure;

pub const SNAPSHOT_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Use the data-parallel executor where the library supports it.
    pub parallel: bool,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            parallel: true,
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Largest tolerated difference between converted and original mean WER.
    pub delta: f64,
    pub asr_endpoint: Option<String>,
    /// Per-request recognizer timeout in seconds.
    pub asr_timeout: f64,
    /// Use reference transcripts instead of a recognizer.
    pub stub: bool,
    /// Token deletion rate the stub applies to converted audio.
    pub stub_deletions: f64,
    pub stub_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            delta: 0.2,
            asr_endpoint: None,
            asr_timeout: 30.0,
            stub: false,
            stub_deletions: 0.0,
            stub_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { repeats: 3 }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Training settings with the executor applied (it is not serialized).
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.em.exec = self.exec();
        cfg
    }

    /// Writes the configuration actually used into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<(), Failure> {
        let text = toml::to_string(self).map_err(|e| Failure::other(format!("cannot serialize config: {e}")))?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(SNAPSHOT_FILE), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = CliConfig::default();
        cfg.pipeline.selection.seed = Some(42);
        cfg.eval.asr_endpoint = Some("http://localhost:9000/asr".into());
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<CliConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: CliConfig = toml::from_str("[eval]\ndelta = 0.5\n[train.em]\ncomponents = 8\n").unwrap();
        assert_eq!(cfg.eval.delta, 0.5);
        assert_eq!(cfg.train.em.components, 8);
        assert_eq!(cfg.train.em.max_iters, TrainConfig::default().em.max_iters);
        assert!(cfg.parallel);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<CliConfig>("[eval]\ndelt = 0.5\n").is_err());
    }
}
