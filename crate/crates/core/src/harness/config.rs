use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfdp::ScheduleKind;
use crate::error::{Error, Result};
use crate::gmta::GmtaConfig;
use crate::losses::LossWeights;
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::orppt::OrpptConfig;
use crate::synthdata::SceneSpec;

use super::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// Boxes per image `N`.
    pub proposals: usize,
    /// DDIM steps used by `detect`.
    pub sampling_steps: usize,
    pub scale: f64,
    pub schedule: ScheduleKind,
    /// Relative jitter of padded duplicate ground-truth boxes.
    pub pad_jitter: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            proposals: 16,
            sampling_steps: 4,
            scale: 2.0,
            schedule: ScheduleKind::Cosine,
            pad_jitter: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root with `train/` and `eval/` splits.
    pub root: Option<PathBuf>,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            seed: 0,
            train_scenes: 200,
            eval_scenes: 50,
            scene: SceneSpec::default(),
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub gmta: GmtaConfig,
    pub loss_weights: LossWeights,
    pub diffusion: DiffusionConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Held-out `(t, noise)` draws per scene when measuring final losses.
    pub eval_draws: usize,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::default(),
            gmta: GmtaConfig::default(),
            loss_weights: LossWeights::default(),
            diffusion: DiffusionConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            eval_draws: 4,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn branches(&self) -> &[usize] {
        &self.model.orppt.branches
    }

    pub fn with_branches(&self, branches: Vec<usize>) -> Self {
        let mut c = self.clone();
        c.model.orppt.branches = branches;
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_gmta(&self, enabled: bool) -> Self {
        let mut c = self.clone();
        c.gmta.enabled = enabled;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        self.model.validate()?;
        if self.gmta.weights.as_slice().len() != 2 {
            return Err(Error::Config("exactly two task weights are required".into()));
        }
        if self.gmta.enabled && self.gmta.period == 0 {
            return Err(Error::Config("GMTA period must be at least 1".into()));
        }
        let d = &self.diffusion;
        if d.steps == 0 || d.proposals == 0 || d.sampling_steps == 0 || d.sampling_steps > d.steps {
            return Err(Error::Config(format!(
                "diffusion needs T >= sampling steps >= 1 and N >= 1, got T={}, N={}, steps={}",
                d.steps, d.proposals, d.sampling_steps
            )));
        }
        if !(d.scale.is_finite() && d.scale > 0.0) || !(d.pad_jitter >= 0.0) {
            return Err(Error::Config("diffusion scale must be positive and jitter nonnegative".into()));
        }
        if self.eval_draws == 0 {
            return Err(Error::Config("eval_draws must be at least 1".into()));
        }
        if let Some(root) = &self.data.root {
            if !root.is_dir() {
                return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
            }
        }
        Ok(())
    }

    pub fn orppt(&self) -> &OrpptConfig {
        &self.model.orppt
    }
}
