//! The single JSON run configuration shared by `train` and `sample`.

use std::fs;
use std::path::{Path, PathBuf};

use petsynth_core::sampler::SamplerConfig;
use petsynth_core::score_model::UNetConfig;
use petsynth_core::training::TrainConfig;
use petsynth_core::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    #[serde(flatten)]
    pub core: SamplerConfig,
    /// Sample with the EMA shadow instead of the live weights.
    pub use_ema: bool,
    /// Slices denoised together; results do not depend on it.
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            core: SamplerConfig::default(),
            use_ema: true,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory (or manifest path) used for training.
    pub dataset: Option<PathBuf>,
    /// Split that `sample` reads when no `--split` flag is given.
    pub sample_split: SplitChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub output_dir: PathBuf,
    pub log_level: String,
    /// Print a progress line every this many training steps.
    pub log_every: u64,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            log_level: "info".into(),
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: NoiseSchedule,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            model: UNetConfig::desk(),
            train: TrainConfig::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
            io: IoSection::default(),
        }
    }
}

fn in_section(section: &str, r: petsynth_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::usage(format!("invalid config section `{section}`: {e}")))
}

impl RunConfig {
    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str, origin: &Path) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::usage(format!(
                "invalid config {} at `{}`: {}",
                origin.display(),
                e.path(),
                e.inner()
            ))
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Checks each section and the cross-section constraints.
    pub fn validate(&self) -> CliResult<()> {
        in_section("schedule", self.schedule.validate())?;
        in_section("model", self.model.validate())?;
        in_section("train", self.train.validate())?;
        in_section("sampler", self.sampler.core.validate(&self.schedule))?;
        if self.sampler.batch_size == 0 {
            return Err(CliError::usage("invalid config section `sampler`: batch_size must be at least 1"));
        }
        if self.io.log_every == 0 {
            return Err(CliError::usage("invalid config section `io`: log_every must be at least 1"));
        }
        Ok(())
    }

    /// Sets the discretization `N` for both the schedule and the sampler.
    pub fn set_num_steps(&mut self, n: usize) {
        self.schedule.num_steps = n;
        self.sampler.core.num_steps = n;
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"total_steps": 7}}"#, Path::new("x")).unwrap();
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model, UNetConfig::desk());
    }

    #[test]
    fn type_errors_name_the_field_path() {
        let err = RunConfig::from_json(r#"{"train": {"learning_rate": "fast"}}"#, Path::new("c.json")).unwrap_err();
        assert!(err.message.contains("train.learning_rate"), "{}", err.message);
        let err = RunConfig::from_json(r#"{"io": {"outdir": "x"}}"#, Path::new("c.json")).unwrap_err();
        assert!(err.message.contains("io"), "{}", err.message);
    }

    #[test]
    fn cross_section_mismatch_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.sampler.core.num_steps = 10;
        let err = cfg.validate().unwrap_err();
        assert!(err.message.contains("sampler.num_steps"), "{}", err.message);
        cfg.set_num_steps(10);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_section_values_name_the_section() {
        let mut cfg = RunConfig::default();
        cfg.model.groupnorm_groups = 5;
        assert!(cfg.validate().unwrap_err().message.contains("`model`"));
        let mut cfg = RunConfig::default();
        cfg.schedule.sigma_max = 0.001;
        assert!(cfg.validate().unwrap_err().message.contains("`schedule`"));
    }
}
