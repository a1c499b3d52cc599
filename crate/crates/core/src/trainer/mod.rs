//! Optimization and the training loops: pretraining, single-task
//! finetuning, multitask training, few-shot runs and the task-specific
//! baseline.
//!
//! Every loop is deterministic given the seed: examples are built
//! sequentially from one ChaCha stream, per-example gradients are computed on
//! worker threads and reduced in batch order, and parameter updates happen on
//! the calling thread.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::synthgen::SynthError;
use crate::tasks::{DecorationVariant, MaskingConfig, TaskError};
use crate::text::TextError;
use crate::vision::VisionError;

mod data;
mod eval;
mod loops;
mod optim;

pub use data::{contamination_filter, few_shot, ClipStore, ContaminationReport, Sample, SampleKind, TaskDataset};
pub use eval::{evaluate, evaluate_zero_shot, EvalConfig};
pub use loops::{
    finetune, mt_to_st, multitask, multitask_schedule, pretrain, train_baseline, FinetuneOutcome, MultitaskOutcome, PretrainOutcome, TaskBest,
};
pub use optim::{adamw_step, lr_schedule, OptimState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss or gradient at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// How MLM and matching losses share pretraining steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Both losses on every example of every batch.
    #[default]
    Mixed,
    /// Even steps MLM, odd steps matching.
    Alternating,
}

/// Which output path a model is trained and evaluated through.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Route {
    /// Every task through the shared MLM head.
    #[default]
    Unified,
    /// Task-specific heads; `answers` is the closed answer vocabulary of the
    /// open-ended head.
    Baseline { answers: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub masking: MaskingConfig,
    /// Weight of the matching loss next to MLM in pretraining.
    pub vtm_weight: f64,
    pub objective: ObjectiveMode,
    /// Fraction of the training split kept (few-shot runs).
    pub few_shot: Option<f64>,
    pub decoration: DecorationVariant,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    /// Retrieval finetuning: pair every positive with every other text of
    /// the batch instead of one sampled swap.
    pub all_pairs: bool,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 1e-3,
            warmup_ratio: 0.1,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            masking: MaskingConfig::default(),
            vtm_weight: 1.0,
            objective: ObjectiveMode::Mixed,
            few_shot: None,
            decoration: DecorationVariant::None,
            max_grad_norm: None,
            all_pairs: false,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 || self.vtm_weight < 0.0 {
            return fail("eps must be positive, weight decay and loss weights non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch size and epochs must be positive".into());
        }
        if let Some(f) = self.few_shot {
            if !(f > 0.0 && f <= 1.0) {
                return fail(format!("few-shot fraction {f} outside (0, 1]"));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if c <= 0.0 {
                return fail(format!("gradient clip {c} must be positive"));
            }
        }
        self.masking.validate()?;
        Ok(())
    }
}

/// One line of the loss/metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub epoch: usize,
    pub task: String,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub eval: BTreeMap<String, f64>,
}

pub fn write_history(records: &[HistoryRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(r: impl BufRead) -> Result<Vec<HistoryRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
