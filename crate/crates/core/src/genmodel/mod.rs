//! The generator-model contract shared by the Simplifier and the Rewriter,
//! plus [`TinySeq2Seq`], a small word-level transformer encoder-decoder used
//! as the reference backend.

mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;
mod transformer;
pub mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::load_checkpoint;
pub use transformer::TinySeq2Seq;
pub use vocab::Vocab;

use crate::contrastive::ContrastiveConfig;
use crate::domain::TrainPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    /// Sum of log-probabilities of the emitted tokens (and of the
    /// end-of-sequence symbol when decoding stopped on it).
    pub confidence: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Gold,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<TrainPair>,
    /// Multiplier of this batch's mean loss in the step objective.
    pub weight: f64,
    pub origin: Origin,
}

impl TrainBatch {
    pub fn new(examples: Vec<TrainPair>, weight: f64, origin: Origin) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!(
                "batch weight must be positive, got {weight}"
            )));
        }
        Ok(TrainBatch {
            examples,
            weight,
            origin,
        })
    }
}

/// Everything one optimizer step needs:
/// `gold.weight * L_G(gold) + pseudo.weight * L_G(pseudo) + w * (L_icl + L_ecl)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObjective {
    pub gold: Option<TrainBatch>,
    pub pseudo: Option<TrainBatch>,
    /// Contrastive term over the union of both batches; skipped when absent,
    /// when its weight is zero or when fewer than two examples are present.
    pub contrastive: Option<ContrastiveConfig>,
    /// Names the step in diagnostics.
    pub label: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub lg_gold: f64,
    pub lg_pseudo: f64,
    pub l_icl: f64,
    pub l_ecl: f64,
    pub total: f64,
}

pub trait GeneratorModel: Send + Sync {
    /// Greedy decoding of at most `max_len` tokens.
    fn generate(
        &self,
        history: &[String],
        source: &str,
        max_len: usize,
    ) -> Result<GenerationResult>;

    /// Mean over examples of the summed teacher-forced negative log-likelihood,
    /// evaluated without dropout.
    fn generation_loss(&self, batch: &TrainBatch) -> Result<f64>;

    /// Mean-pooled encoder states. `stochastic` applies dropout with fresh
    /// randomness on every call.
    fn encode(&self, history: &[String], source: &str, stochastic: bool) -> Result<Vec<f64>>;

    fn train_step(&mut self, objective: &StepObjective) -> Result<StepLosses>;

    fn set_learning_rate(&mut self, lr: f64);

    /// Reset every trainable parameter and the optimizer state from `seed`.
    fn reinitialize(&mut self, seed: u64);

    /// Fingerprint of the current parameters.
    fn checksum(&self) -> u64;

    fn save_checkpoint(&self, path: &Path) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    /// Token budget for the history prefix, truncated from the left.
    pub history_budget: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.1,
            history_budget: 64,
            max_source_len: 32,
            max_target_len: 32,
            learning_rate: 5e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "must divide d_model"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate",
                "must be a non-negative finite number",
            ));
        }
        Ok(())
    }
}
