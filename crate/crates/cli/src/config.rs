use std::fs;
use std::path::Path;

use mot_core::eval::EvalConfig;
use mot_core::model::ModelConfig;
use mot_core::orchestrator::{RoundSchedule, SamplingConfig};
use mot_core::pretrain::PretrainConfig;
use mot_core::task::{SplitCounts, TaskConfig};
use mot_core::teacher::{Style, TeacherSpec};
use mot_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything an experiment needs, read from one TOML file. Missing tables
/// and fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub counts: SplitCounts,
    /// Retention-family prompts with worked solutions seen in pre-training.
    pub retention_prompts: usize,
    pub teachers: Vec<TeacherSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: RoundSchedule,
    pub eval: EvalConfig,
    pub pretrain: PretrainConfig,
    pub sampling: SamplingConfig,
}

pub fn default_teachers() -> Vec<TeacherSpec> {
    vec![
        TeacherSpec::new("verbose", Style::Verbose),
        TeacherSpec::new("named", Style::NamedIntermediates),
        TeacherSpec::new("terse", Style::Terse),
        TeacherSpec::new("shifted", Style::Shifted).with_error_rate(0.2),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let teachers = default_teachers();
        let ids: Vec<&str> = teachers.iter().map(|t| t.teacher_id.as_str()).collect();
        ExperimentConfig {
            seed: 0,
            task: TaskConfig::default(),
            counts: SplitCounts { train: 200, validation: 100, test: 100, retention: 100 },
            retention_prompts: 300,
            schedule: RoundSchedule::with_pool(&ids),
            teachers,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            pretrain: PretrainConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.schedule.validate()?;
        let mut ids = std::collections::BTreeSet::new();
        for t in &self.teachers {
            t.validate()?;
            if !ids.insert(t.teacher_id.as_str()) {
                return Err(CliError::config(format!("teacher {} defined twice", t.teacher_id)));
            }
        }
        Ok(())
    }

    pub fn teacher(&self, id: &str) -> CliResult<&TeacherSpec> {
        self.teachers
            .iter()
            .find(|t| t.teacher_id == id)
            .ok_or_else(|| CliError::config(format!("no teacher `{id}` in the config")))
    }
}
