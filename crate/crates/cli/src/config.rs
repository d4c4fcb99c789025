//! Experiment configuration (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stdfnc::dfnc::{DomainPartition, WindowSpec};
use stdfnc::interpret::{CamTarget, DEFAULT_DIFFERENCE_THRESHOLD};
use stdfnc::model::ModelConfig;
use stdfnc::synth::CohortConfig;
use stdfnc::train::TrainConfig;

use crate::error::{CliError, Result};

/// Where subjects come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth {
        cohort: CohortConfig,
    },
    /// A labels CSV (`subject_id,group[,subgroup]`) plus one time course per
    /// subject named `<subject_id>.csv` or `<subject_id>.bin` in `timecourses`.
    Files {
        labels: PathBuf,
        timecourses: PathBuf,
        tr_seconds: f64,
        partition: DomainPartition,
    },
}

/// Architecture settings; the network and window counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention: String,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1);
        ModelSettings {
            conv_channels: c.conv_channels,
            kernel_size: c.kernel_size,
            embed_dim: c.embed_dim,
            n_blocks: c.n_blocks,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
            attention: c.attention,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, n_networks: usize, n_windows: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_networks,
            n_windows,
            conv_channels: self.conv_channels.clone(),
            kernel_size: self.kernel_size,
            embed_dim: self.embed_dim,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_classes: 2,
            dropout: self.dropout,
            attention: self.attention.clone(),
            seed,
        }
    }
}

/// Which subjects form the two classes. A subject belongs to a side when its
/// group or subgroup tag is listed; subjects on neither side are left out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Design {
    pub negative: Vec<String>,
    pub positive: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSettings {
    /// CAM method name, see `stdfnc::interpret::CamRegistry`.
    pub method: String,
    /// Conv stem layer; `None` means the last one.
    pub layer: Option<usize>,
    pub target: CamTarget,
    pub fidelity_fractions: Vec<f64>,
    /// Random maps averaged for the fidelity baseline.
    pub random_maps: usize,
    pub difference_threshold: f64,
}

impl Default for InterpretSettings {
    fn default() -> Self {
        InterpretSettings {
            method: "layercam".into(),
            layer: None,
            target: CamTarget::Predicted,
            fidelity_fractions: vec![0.05, 0.1, 0.2],
            random_maps: 20,
            difference_threshold: DEFAULT_DIFFERENCE_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub dfnc: WindowSpec,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub design: Design,
    #[serde(default)]
    pub interpret: InterpretSettings,
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output: PathBuf,
    /// `metrics.csv` of an earlier run to compare against fold by fold.
    #[serde(default)]
    pub baseline_metrics: Option<PathBuf>,
}

fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    /// Synthetic desk cohort, CN vs Asym, 5-fold CV for 60 epochs.
    pub fn desk(output: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            data: DataSource::Synth { cohort: CohortConfig::desk() },
            dfnc: WindowSpec::default(),
            model: ModelSettings { conv_channels: vec![4, 4], embed_dim: 8, n_blocks: 1, ffn_dim: 16, ..ModelSettings::default() },
            train: TrainConfig { epochs: 60, lr_max: 2e-3, ..TrainConfig::default() },
            folds: 5,
            design: Design { negative: vec!["CN".into()], positive: vec!["Asym".into()] },
            interpret: InterpretSettings::default(),
            seed: 1,
            output: output.into(),
            baseline_metrics: None,
        }
    }

    /// The desk run with weak and strong positive subgroups.
    pub fn desk_graded(output: impl Into<PathBuf>) -> Self {
        let mut c = Self::desk(output);
        c.data = DataSource::Synth { cohort: CohortConfig::desk_graded() };
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::format(path, m),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.design.negative.is_empty() || self.design.positive.is_empty() {
            return bad("design needs at least one negative and one positive group".into());
        }
        if let Some(g) = self.design.negative.iter().find(|g| self.design.positive.contains(g)) {
            return bad(format!("group `{g}` is on both sides of the design"));
        }
        if self.interpret.fidelity_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || self.interpret.fidelity_fractions.is_empty() {
            return bad("fidelity fractions must be nonempty and lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.interpret.difference_threshold) {
            return bad(format!("difference threshold {} outside [0, 1]", self.interpret.difference_threshold));
        }
        if let DataSource::Synth { cohort } = &self.data {
            cohort.validate()?;
        }
        self.model.model_config(1, 1, 0).validate()?;
        Ok(())
    }
}
