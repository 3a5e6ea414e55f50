//! RMSProp, finite-difference gradient checking, the training loop and the
//! curriculum schedule.

mod gradcheck;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use gradcheck::{
    gradcheck, layer_suite, model_suite, relative_error, tiny_config, GradcheckConfig, GradcheckReport, GroupError,
};
pub use train::{
    build_samples, run_curriculum, train_epoch, CurriculumRun, EpochSummary, LogWriter, PhaseData, Progress,
    TrainSample,
};

use crate::collapse::CollapseMode;
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Gradient components are clipped to `[-grad_clip, grad_clip]`.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { learning_rate: 1e-3, decay: 0.9, epsilon: 1e-6, batch_size: 8, grad_clip: 10.0 }
    }
}

impl OptimizerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.decay > 0.0 && self.decay < 1.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "optimizer: need learning_rate > 0, 0 < decay < 1, epsilon > 0 (got {}, {}, {})",
                self.learning_rate, self.decay, self.epsilon
            )));
        }
        if self.batch_size == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("optimizer: batch_size and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Key of the squared-gradient average in [`Parameter::state`].
pub const MEAN_SQUARE: &str = "ms";

/// One RMSProp update from the gradient accumulator, which is then zeroed:
///
/// `ms ← ρ·ms + (1−ρ)·g²`, `value ← value − lr·g/√(ms+ε)`
pub fn rmsprop_step(param: &mut Parameter, cfg: &OptimizerConfig) -> Result<()> {
    if param.grad.data().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: format!("gradient of {}", param.name) });
    }
    let shape = param.value.shape().to_vec();
    let ms = param.state.entry(MEAN_SQUARE.to_string()).or_insert_with(|| Tensor::zeros(&shape));
    let (rho, lr, eps, clip) = (cfg.decay, cfg.learning_rate, cfg.epsilon, cfg.grad_clip);
    for ((v, g), m) in param.value.data_mut().iter_mut().zip(param.grad.data()).zip(ms.data_mut()) {
        let g = g.clamp(-clip, clip);
        *m = rho * *m + (1.0 - rho) * g * g;
        *v -= lr * g / (*m + eps).sqrt();
    }
    param.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    if param.value.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: format!("rmsprop update of {}", param.name) });
    }
    Ok(())
}

/// Which loss a phase trains on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// One CTC loss over all collapse steps against the joined transcript.
    #[default]
    Paragraph,
    /// Collapse step `t` against line `t`, losses summed.
    Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPhase {
    pub name: String,
    /// Paragraphs are cut into crops of this many lines; whole when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_lines: Option<usize>,
    pub epochs: usize,
    pub collapse: CollapseMode,
    #[serde(default)]
    pub objective: Objective,
    /// Attention steps; the largest line count in the phase data when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Phase-specific training manifest instead of crops of the main one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl CurriculumPhase {
    pub fn new(name: &str, max_lines: Option<usize>, epochs: usize, collapse: CollapseMode) -> Self {
        CurriculumPhase {
            name: name.into(),
            max_lines,
            epochs,
            collapse,
            objective: Objective::Paragraph,
            steps: None,
            manifest: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.max_lines == Some(0) || self.steps == Some(0) {
            return Err(Error::Config(format!("phase {:?}: epochs, max_lines and steps must be at least 1", self.name)));
        }
        Ok(())
    }

    /// Lines, then a few lines, then whole paragraphs.
    pub fn default_schedule() -> Vec<CurriculumPhase> {
        vec![
            CurriculumPhase::new("lines", Some(1), 20, CollapseMode::Standard),
            CurriculumPhase::new("few-lines", Some(2), 10, CollapseMode::Attention),
            CurriculumPhase::new("paragraphs", None, 30, CollapseMode::Attention),
        ]
    }
}
