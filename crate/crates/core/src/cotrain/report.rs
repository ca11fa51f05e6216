use serde::{Deserialize, Serialize};

use super::config::Threshold;
use crate::genmodel::StepLosses;
use crate::metrics::MetricReport;

/// Step-averaged losses of one model's training phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    /// Means over the steps of the final epoch.
    pub final_epoch: StepLosses,
    /// Mean total loss of each epoch, in order.
    pub epoch_totals: Vec<f64>,
    pub steps: usize,
    pub gold_examples: usize,
    pub pseudo_examples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub candidates: usize,
    pub kept: usize,
    pub rejected: usize,
    pub threshold: Option<Threshold>,
    pub mean_conf_kept: Option<f64>,
    pub mean_conf_rejected: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Training {
    /// Reinitialized and trained on gold plus pseudo data.
    CoTrained,
    /// Warm-up on the labeled (or weakly labeled) set only.
    WarmUp,
    /// No pseudo example survived selection; gold-only training reproduces
    /// the warm-up models, which are restored instead of retrained.
    GoldOnlyReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprints {
    pub init_seed: u64,
    pub simplifier_init: u64,
    pub rewriter_init: u64,
    pub simplifier_final: u64,
    pub rewriter_final: u64,
}

/// Everything observable about one iteration. Iteration 0 is the warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub training: Training,
    pub simplifier_selection: SelectionSummary,
    pub rewriter_selection: SelectionSummary,
    /// Unconsumed queries left in each pool after selection.
    pub pool_s: usize,
    pub pool_r: usize,
    pub simplifier_losses: LossSummary,
    pub rewriter_losses: LossSummary,
    pub fingerprints: ModelFingerprints,
    /// Rewriter metrics on the held-out dev split.
    pub dev: Option<MetricReport>,
}

impl IterationReport {
    /// |P_S| + |P_R|.
    pub fn kept(&self) -> usize {
        self.simplifier_selection.kept + self.rewriter_selection.kept
    }
}
