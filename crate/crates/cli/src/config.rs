//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use cbm_align::corpus::LabelBudget;
use cbm_align::intervention::InterventionConfig;
use cbm_align::metrics::{ConceptMetric, ScoreNormalization};
use cbm_align::synth::SynthSpec;
use cbm_align::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSel {
    Train,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub concept_metric: ConceptMetric,
    pub normalization: ScoreNormalization,
    pub split: SplitSel,
    /// Append published reference rows to the report table.
    pub include_reference: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            concept_metric: ConceptMetric::TopA,
            normalization: ScoreNormalization::Softmax,
            split: SplitSel::Test,
            include_reference: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub top_k: usize,
    pub split: SplitSel,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            top_k: 8,
            split: SplitSel::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Concept labels per class at each grid point.
    pub grid: Vec<usize>,
    /// Each seed drives the label draw and training; without a `bundle`
    /// path it also seeds a fresh synthetic bundle.
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            grid: vec![0, 5, 10],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle directory read by every subcommand except `synth`.
    pub bundle: Option<PathBuf>,
    /// Model directory read by `score`, `eval`, `analyze` and `intervene`.
    pub model: Option<PathBuf>,
    /// Candidate concept directory read by `intervene`.
    pub candidates: Option<PathBuf>,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub label_budget: Option<LabelBudget>,
    pub eval: EvalSection,
    pub score: ScoreSection,
    pub intervention: InterventionConfig,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.bundle, &mut cfg.model, &mut cfg.candidates] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        self.intervention.validate()?;
        if self.score.top_k == 0 {
            return Err(CliError::Config("score.top_k must be >= 1".into()));
        }
        Ok(())
    }

    fn existing(p: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        match p {
            None => Err(CliError::Config(format!(
                "config is missing the `{what}` path"
            ))),
            Some(p) if !p.exists() => Err(CliError::Config(format!(
                "`{what}` path {} does not exist",
                p.display()
            ))),
            Some(p) => Ok(p.clone()),
        }
    }

    pub fn bundle_path(&self) -> CliResult<PathBuf> {
        Self::existing(&self.bundle, "bundle")
    }

    pub fn model_path(&self) -> CliResult<PathBuf> {
        Self::existing(&self.model, "model")
    }

    pub fn candidates_path(&self) -> CliResult<PathBuf> {
        Self::existing(&self.candidates, "candidates")
    }
}
