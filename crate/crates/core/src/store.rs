//! JSON model files.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64`, so a loaded model predicts bit-identically. Field order is fixed
//! by declaration order, so saving the same model twice gives the same bytes.

use crate::data::{FeatureStats, ResponseScaling};
use crate::ensemble::{EnsembleConfig, EnsembleError, EnsembleParams};
use crate::model::{HeadLayout, SoftTreeModel};
use crate::objective::Objective;
use crate::trainer::{TrainReport, TrainSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported format_version {found:?} (expected {FORMAT_VERSION})")]
    Version { found: Option<serde_json::Value> },
    #[error("invalid model file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Short summary of the run that produced a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub spec: TrainSpec,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_valid_loss: f64,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    pub stopped_early: bool,
}

impl TrainSummary {
    pub fn new(spec: &TrainSpec, report: &TrainReport) -> Self {
        Self {
            spec: spec.clone(),
            best_epoch: report.best_epoch,
            epochs_run: report.epochs_run(),
            best_valid_loss: report.best_valid_loss,
            final_train_loss: report.final_train_loss,
            final_valid_loss: report.final_valid_loss,
            stopped_early: report.stopped_early,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub objective: Objective,
    pub head_layout: HeadLayout,
    pub config: EnsembleConfig,
    pub feature_names: Vec<String>,
    pub task_names: Vec<String>,
    pub feature_stats: FeatureStats,
    #[serde(default)]
    pub response_scaling: Option<ResponseScaling>,
    /// Seed of the train/valid/test split the model was fitted on.
    #[serde(default)]
    pub split_seed: Option<u64>,
    pub ensembles: Vec<EnsembleParams>,
    #[serde(default)]
    pub training: Option<TrainSummary>,
}

impl ModelFile {
    pub fn new(model: &SoftTreeModel, feature_names: Vec<String>, task_names: Vec<String>, feature_stats: FeatureStats) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            objective: model.objective,
            head_layout: model.layout,
            config: model.config,
            feature_names,
            task_names,
            feature_stats,
            response_scaling: None,
            split_seed: None,
            ensembles: model.members.clone(),
            training: None,
        }
    }

    pub fn model(&self) -> SoftTreeModel {
        SoftTreeModel {
            objective: self.objective,
            layout: self.head_layout,
            config: self.config,
            members: self.ensembles.clone(),
        }
    }

    /// Checks every invariant a loaded file must satisfy.
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.format_version != FORMAT_VERSION {
            return Err(StoreError::Version {
                found: Some(self.format_version.into()),
            });
        }
        self.model().check()?;
        let p = self.config.num_features;
        let invalid = |s: String| Err(StoreError::Invalid(s));
        if self.feature_names.len() != p {
            return invalid(format!("{} feature names for {p} features", self.feature_names.len()));
        }
        if self.task_names.len() != self.config.num_tasks {
            return invalid(format!(
                "{} task names for {} tasks",
                self.task_names.len(),
                self.config.num_tasks
            ));
        }
        let st = &self.feature_stats;
        if st.mean.len() != p || st.sd.len() != p {
            return invalid("feature_stats length does not match num_features".into());
        }
        if st.mean.iter().any(|v| !v.is_finite()) || st.sd.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("feature_stats must be finite with positive sd".into());
        }
        if let Some(rs) = &self.response_scaling {
            if rs.min.len() != self.config.num_tasks || rs.range.len() != self.config.num_tasks {
                return invalid("response_scaling length does not match num_tasks".into());
            }
            if rs.min.iter().any(|v| !v.is_finite()) || rs.range.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return invalid("response_scaling must be finite with positive range".into());
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model file serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StoreError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
        match value.get("format_version") {
            Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
            other => return Err(StoreError::Version { found: other.cloned() }),
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| StoreError::Invalid(e.to_string()))?;
        file.validate()?;
        Ok(file)
    }
}

fn parse_error(text: &str, e: serde_json::Error) -> StoreError {
    let (line, column) = (e.line(), e.column());
    let offset = if line == 0 {
        0
    } else {
        let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
        (start + column).min(text.len())
    };
    StoreError::Parse {
        offset,
        line,
        column,
        message: e.to_string(),
    }
}

pub fn save(file: &ModelFile, path: &Path) -> Result<(), StoreError> {
    std::fs::write(path, file.to_text()).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ModelFile, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ModelFile::from_text(&text)
}
