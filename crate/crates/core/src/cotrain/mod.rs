//! Co-training of a Simplifier and a Rewriter.
//!
//! After a warm-up on labeled data (or rule-simplified queries), every
//! iteration
//!
//! 1. labels the remaining pool queries with each model,
//! 2. keeps outputs whose confidence exceeds the model's threshold and removes
//!    them from the pools,
//! 3. flips kept outputs into training pairs for the opposite model,
//! 4. reinitializes both models and trains them on gold plus pseudo pairs with
//!    `L_G(D) + lambda * L_G(P) + w * (L_icl + L_ecl)`.

mod config;
mod report;
pub mod rundir;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{percentile, CoTrainConfig, Mode, Threshold};
pub use report::{IterationReport, LossSummary, ModelFingerprints, SelectionSummary, Training};

use crate::domain::{
    fuse, reverse, select, DataPool, Direction, LabeledExample, Orientation, PseudoExample,
    Session, TrainPair,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::genmodel::{GeneratorModel, Origin, StepLosses, StepObjective, TrainBatch, Vocab};
use crate::metrics::{evaluate_corpus, MetricReport};
use crate::seed;
use crate::weaklabel::rule_simplify;

/// `lg_gold + lambda * lg_pseudo + w * lc`.
pub fn total_loss(lg_gold: f64, lg_pseudo: f64, lc: f64, lambda: f64, w: f64) -> f64 {
    lg_gold + lambda * lg_pseudo + w * lc
}

/// Per-iteration initialization seed.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed::derive(seed, iteration as u64)
}

/// Label every unconsumed pool query, in pool order.
pub fn pseudo_label<M: GeneratorModel>(
    model: &M,
    pool: &DataPool,
    direction: Direction,
    max_len: usize,
) -> Result<Vec<PseudoExample>> {
    let items = pool.pending();
    exec::map(&items, |item| {
        let g = model.generate(&item.history, &item.query, max_len)?;
        Ok(PseudoExample {
            id: item.id.clone(),
            history: item.history.clone(),
            source: item.query.clone(),
            generated: g.text,
            confidence: g.confidence,
            direction,
        })
    })
    .into_iter()
    .collect()
}

/// Greedy outputs of `model` for every example's source.
pub fn predict<M: GeneratorModel>(
    model: &M,
    examples: &[LabeledExample],
    max_len: usize,
) -> Result<Vec<String>> {
    exec::map(examples, |e| {
        model
            .generate(&e.history, &e.source, max_len)
            .map(|g| g.text)
    })
    .into_iter()
    .collect()
}

/// Corpus metrics of `model`'s outputs against the examples' targets.
pub fn evaluate_model<M: GeneratorModel>(
    model: &M,
    examples: &[LabeledExample],
    max_len: usize,
) -> Result<MetricReport> {
    let preds = predict(model, examples, max_len)?;
    let pairs: Vec<(&str, &str)> = preds
        .iter()
        .zip(examples)
        .map(|(p, e)| (p.as_str(), e.target.as_str()))
        .collect();
    evaluate_corpus(&pairs)
}

/// Vocabulary over every query and rewrite the models can meet.
pub fn build_vocab(labeled: &[LabeledExample], pools: &[&[Session]]) -> Vocab {
    let labeled_texts = labeled
        .iter()
        .flat_map(|e| e.history.iter().chain([&e.source, &e.target]));
    let pool_texts = pools.iter().flat_map(|p| {
        p.iter().flat_map(|s| {
            s.turns
                .iter()
                .flat_map(|t| std::iter::once(&t.query).chain(t.rewrite.as_ref()))
        })
    });
    Vocab::build(labeled_texts.chain(pool_texts))
}

/// Counters of the invariant checks performed so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditLog {
    pub batches: usize,
    pub gold_pairs: usize,
    pub pseudo_pairs: usize,
    pub reinit_probes: usize,
}

struct Phase<'a> {
    gold: &'a [TrainPair],
    pseudo: &'a [TrainPair],
    orientation: Orientation,
    threshold: f64,
    epochs: usize,
    /// Extra epochs are added until at least this many steps are taken.
    min_steps: usize,
    contrastive: bool,
    seed: u64,
    label: &'a str,
}

/// Positions of batch `step`; the smaller of two sets wraps around.
fn batch_indices(order: &[usize], step: usize, bs: usize) -> Vec<usize> {
    let n = order.len();
    let start = step * bs;
    if start < n {
        order[start..(start + bs).min(n)].to_vec()
    } else {
        (0..bs.min(n)).map(|j| order[(start + j) % n]).collect()
    }
}

fn check_pairs(
    pairs: &[TrainPair],
    origin: Origin,
    phase: &Phase,
    audit: &mut AuditLog,
) -> Result<()> {
    for p in pairs {
        if p.orientation != phase.orientation {
            return Err(Error::contract(format!(
                "{}: {:?} pair in a {:?} batch",
                phase.label, p.orientation, phase.orientation
            )));
        }
        match (origin, p.confidence) {
            (Origin::Gold, None) => audit.gold_pairs += 1,
            (Origin::Pseudo, Some(c)) if c > phase.threshold => audit.pseudo_pairs += 1,
            (Origin::Pseudo, c) => {
                return Err(Error::contract(format!(
                    "{}: pseudo pair with confidence {c:?} not above threshold {}",
                    phase.label, phase.threshold
                )))
            }
            (Origin::Gold, Some(_)) => {
                return Err(Error::contract(format!(
                    "{}: scored pair in a gold batch",
                    phase.label
                )))
            }
        }
    }
    Ok(())
}

fn add_losses(acc: &mut StepLosses, l: &StepLosses) {
    acc.lg_gold += l.lg_gold;
    acc.lg_pseudo += l.lg_pseudo;
    acc.l_icl += l.l_icl;
    acc.l_ecl += l.l_ecl;
    acc.total += l.total;
}

fn train_phase<M: GeneratorModel>(
    model: &mut M,
    phase: &Phase,
    cfg: &CoTrainConfig,
    audit: &mut AuditLog,
) -> Result<LossSummary> {
    let pseudo = if cfg.lambda > 0.0 { phase.pseudo } else { &[] };
    let bs = cfg.batch_size;
    let steps = phase.gold.len().max(pseudo.len()).div_ceil(bs);
    let epochs = phase.epochs.max(phase.min_steps.div_ceil(steps.max(1)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(phase.seed, 0x5348_5546));
    let mut summary = LossSummary {
        gold_examples: phase.gold.len(),
        pseudo_examples: pseudo.len(),
        ..Default::default()
    };
    for epoch in 0..epochs {
        let mut gold_order: Vec<usize> = (0..phase.gold.len()).collect();
        let mut pseudo_order: Vec<usize> = (0..pseudo.len()).collect();
        gold_order.shuffle(&mut rng);
        pseudo_order.shuffle(&mut rng);
        let mut acc = StepLosses::default();
        for step in 0..steps {
            let take = |set: &[TrainPair], order: &[usize]| -> Vec<TrainPair> {
                batch_indices(order, step, bs)
                    .into_iter()
                    .map(|i| set[i].clone())
                    .collect()
            };
            let gold = take(phase.gold, &gold_order);
            let pseudo_batch = take(pseudo, &pseudo_order);
            check_pairs(&gold, Origin::Gold, phase, audit)?;
            check_pairs(&pseudo_batch, Origin::Pseudo, phase, audit)?;
            audit.batches += 1;
            let objective = StepObjective {
                gold: (!gold.is_empty())
                    .then(|| TrainBatch::new(gold, 1.0, Origin::Gold))
                    .transpose()?,
                pseudo: (!pseudo_batch.is_empty())
                    .then(|| TrainBatch::new(pseudo_batch, cfg.lambda, Origin::Pseudo))
                    .transpose()?,
                contrastive: phase.contrastive.then(|| cfg.contrastive()),
                label: format!("{} epoch {epoch} step {step}", phase.label),
            };
            let l = model.train_step(&objective)?;
            add_losses(&mut acc, &l);
        }
        let n = steps.max(1) as f64;
        summary.final_epoch = StepLosses {
            lg_gold: acc.lg_gold / n,
            lg_pseudo: acc.lg_pseudo / n,
            l_icl: acc.l_icl / n,
            l_ecl: acc.l_ecl / n,
            total: acc.total / n,
        };
        summary.epoch_totals.push(summary.final_epoch.total);
        summary.steps += steps;
    }
    Ok(summary)
}

fn selection(
    kept: &[PseudoExample],
    rejected: &[PseudoExample],
    threshold: f64,
) -> SelectionSummary {
    let mean = |v: &[PseudoExample]| {
        (!v.is_empty()).then(|| v.iter().map(|p| p.confidence).sum::<f64>() / v.len() as f64)
    };
    SelectionSummary {
        candidates: kept.len() + rejected.len(),
        kept: kept.len(),
        rejected: rejected.len(),
        threshold: Some(Threshold::Value(threshold)),
        mean_conf_kept: mean(kept),
        mean_conf_rejected: mean(rejected),
    }
}

/// The state of one co-training run between iterations. Cloning it after the
/// warm-up lets several continuations share the same starting point.
#[derive(Debug, Clone)]
pub struct CoTrainer<M> {
    cfg: CoTrainConfig,
    simplifier: M,
    rewriter: M,
    gold: Vec<LabeledExample>,
    dev: Vec<LabeledExample>,
    pool_s: DataPool,
    pool_r: DataPool,
    resolved: Option<(f64, f64)>,
    warm: Option<(M, M)>,
    reports: Vec<IterationReport>,
    last_pseudo: Vec<PseudoExample>,
    audit: AuditLog,
}

impl<M: GeneratorModel + Clone> CoTrainer<M> {
    /// `labeled` is the gold set in few-shot mode and must be empty in
    /// zero-shot mode, where the warm-up set is rule-simplified from `pool_s`.
    pub fn new(
        cfg: CoTrainConfig,
        simplifier: M,
        rewriter: M,
        labeled: Vec<LabeledExample>,
        pool_s: DataPool,
        pool_r: DataPool,
    ) -> Result<Self> {
        cfg.validate()?;
        let warm_set = match cfg.mode {
            Mode::FewShot => {
                if labeled.is_empty() {
                    return Err(Error::invalid("few-shot warm-up needs labeled examples"));
                }
                labeled
            }
            Mode::ZeroShot => {
                if !labeled.is_empty() {
                    return Err(Error::config(
                        "mode",
                        "zero-shot runs take no labeled examples",
                    ));
                }
                let weak: Vec<LabeledExample> =
                    pool_s.sessions().iter().flat_map(rule_simplify).collect();
                if weak.is_empty() {
                    return Err(Error::invalid("no rule fired on the Simplifier pool"));
                }
                weak
            }
        };
        let (gold, dev) = split_dev(warm_set, cfg.dev_fraction, cfg.seed);
        Ok(CoTrainer {
            cfg,
            simplifier,
            rewriter,
            gold,
            dev,
            pool_s,
            pool_r,
            resolved: None,
            warm: None,
            reports: Vec::new(),
            last_pseudo: Vec::new(),
            audit: AuditLog::default(),
        })
    }

    pub fn config(&self) -> &CoTrainConfig {
        &self.cfg
    }

    /// Change selector thresholds for the following iterations.
    pub fn set_thresholds(&mut self, s_s: Threshold, s_r: Threshold) -> Result<()> {
        self.cfg.s_s = s_s;
        self.cfg.s_r = s_r;
        self.cfg.validate()
    }

    pub fn simplifier(&self) -> &M {
        &self.simplifier
    }

    pub fn rewriter(&self) -> &M {
        &self.rewriter
    }

    pub fn into_models(self) -> (M, M) {
        (self.simplifier, self.rewriter)
    }

    pub fn gold(&self) -> &[LabeledExample] {
        &self.gold
    }

    pub fn dev(&self) -> &[LabeledExample] {
        &self.dev
    }

    pub fn pools(&self) -> (&DataPool, &DataPool) {
        (&self.pool_s, &self.pool_r)
    }

    pub fn reports(&self) -> &[IterationReport] {
        &self.reports
    }

    /// Kept pseudo examples of the latest iteration (Simplifier's first).
    pub fn last_pseudo(&self) -> &[PseudoExample] {
        &self.last_pseudo
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// (s_s, s_r) as resolved by the latest iteration.
    pub fn resolved_thresholds(&self) -> Option<(f64, f64)> {
        self.resolved
    }

    /// Co-training iterations completed (the warm-up not included).
    pub fn iterations_done(&self) -> usize {
        self.reports.len().saturating_sub(1)
    }

    pub fn finished(&self) -> bool {
        !self.reports.is_empty()
            && (self.iterations_done() >= self.cfg.max_iterations
                || (self.pool_s.is_empty() && self.pool_r.is_empty()))
    }

    fn gold_pairs(&self, orientation: Orientation) -> Vec<TrainPair> {
        self.gold
            .iter()
            .map(|e| match orientation {
                Orientation::ToFull => TrainPair::gold(e, orientation),
                Orientation::ToReduced => TrainPair::gold(&reverse(e), orientation),
            })
            .collect()
    }

    fn dev_metrics(&self) -> Result<Option<MetricReport>> {
        if self.dev.is_empty() {
            return Ok(None);
        }
        evaluate_model(&self.rewriter, &self.dev, self.cfg.max_len).map(Some)
    }

    fn fingerprints(&self, seed: u64, init: (u64, u64)) -> ModelFingerprints {
        ModelFingerprints {
            init_seed: seed,
            simplifier_init: init.0,
            rewriter_init: init.1,
            simplifier_final: self.simplifier.checksum(),
            rewriter_final: self.rewriter.checksum(),
        }
    }

    /// Reinitialize both models from `seed`, optionally proving the new
    /// parameters do not depend on the trained ones.
    fn reinitialize(&mut self, seed: u64) -> Result<(u64, u64)> {
        let before = (self.simplifier.checksum(), self.rewriter.checksum());
        self.simplifier.reinitialize(seed);
        self.rewriter.reinitialize(seed);
        self.simplifier.set_learning_rate(self.cfg.learning_rate);
        self.rewriter.set_learning_rate(self.cfg.learning_rate);
        let init = (self.simplifier.checksum(), self.rewriter.checksum());
        if self.cfg.audit && !self.reports.is_empty() {
            for (model, old) in [(&self.simplifier, before.0), (&self.rewriter, before.1)] {
                let mut probe = model.clone();
                probe.reinitialize(seed);
                if probe.checksum() != model.checksum() || model.checksum() == old {
                    return Err(Error::contract(
                        "reinitialization did not reset the parameters",
                    ));
                }
                self.audit.reinit_probes += 1;
            }
        }
        Ok(init)
    }

    /// Train both models on the warm-up set (Simplifier on the reversed pairs).
    pub fn warm_up(&mut self) -> Result<&IterationReport> {
        if !self.reports.is_empty() {
            return Err(Error::contract("warm-up already done"));
        }
        let seed = iteration_seed(self.cfg.seed, 0);
        let init = self.reinitialize(seed)?;
        let to_full = self.gold_pairs(Orientation::ToFull);
        let to_reduced = self.gold_pairs(Orientation::ToReduced);
        let phase = |gold, orientation, label| Phase {
            gold,
            pseudo: &[],
            orientation,
            threshold: f64::INFINITY,
            epochs: self.cfg.warmup_epochs,
            min_steps: 0,
            contrastive: false,
            seed,
            label,
        };
        let r_phase = phase(&to_full, Orientation::ToFull, "warm-up rewriter");
        let s_phase = phase(&to_reduced, Orientation::ToReduced, "warm-up simplifier");
        let rewriter_losses =
            train_phase(&mut self.rewriter, &r_phase, &self.cfg, &mut self.audit)?;
        let simplifier_losses =
            train_phase(&mut self.simplifier, &s_phase, &self.cfg, &mut self.audit)?;
        self.warm = Some((self.simplifier.clone(), self.rewriter.clone()));
        let report = IterationReport {
            iteration: 0,
            training: Training::WarmUp,
            simplifier_selection: SelectionSummary::default(),
            rewriter_selection: SelectionSummary::default(),
            pool_s: self.pool_s.len(),
            pool_r: self.pool_r.len(),
            simplifier_losses,
            rewriter_losses,
            fingerprints: self.fingerprints(seed, init),
            dev: self.dev_metrics()?,
        };
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// One pass of pseudo-labeling, selection, fusion and retraining.
    pub fn co_train_iteration(&mut self) -> Result<&IterationReport> {
        let Some(prev) = self.reports.last() else {
            return Err(Error::contract("co-training iteration before warm-up"));
        };
        let (prev_s, prev_r) = (prev.pool_s, prev.pool_r);
        let k = self.reports.len();
        let max_len = self.cfg.max_len;

        let cand_s = pseudo_label(&self.simplifier, &self.pool_s, Direction::Simplify, max_len)?;
        let cand_r = pseudo_label(&self.rewriter, &self.pool_r, Direction::Rewrite, max_len)?;
        let confs = |c: &[PseudoExample]| c.iter().map(|p| p.confidence).collect::<Vec<_>>();
        let (th_s, th_r) = (
            self.cfg.s_s.resolve(&confs(&cand_s)),
            self.cfg.s_r.resolve(&confs(&cand_r)),
        );
        self.resolved = Some((th_s, th_r));
        let (kept_s, rejected_s) = select(cand_s, th_s);
        let (kept_r, rejected_r) = select(cand_r, th_r);
        self.pool_s.remove_consumed(&kept_s)?;
        self.pool_r.remove_consumed(&kept_r)?;
        if self.pool_s.len() > prev_s || self.pool_r.len() > prev_r {
            return Err(Error::contract("a pool grew during co-training"));
        }
        let fused = fuse(&kept_s, &kept_r)?;

        let (training, fingerprints, simplifier_losses, rewriter_losses) = if fused.is_empty() {
            let (s, r) = self
                .warm
                .clone()
                .ok_or_else(|| Error::contract("missing warm-up models"))?;
            self.simplifier = s;
            self.rewriter = r;
            let warm = &self.reports[0];
            (
                Training::GoldOnlyReplay,
                warm.fingerprints.clone(),
                warm.simplifier_losses.clone(),
                warm.rewriter_losses.clone(),
            )
        } else {
            let seed = iteration_seed(self.cfg.seed, k);
            let init = self.reinitialize(seed)?;
            let to_full = self.gold_pairs(Orientation::ToFull);
            let to_reduced = self.gold_pairs(Orientation::ToReduced);
            let r_label = format!("iteration {k} rewriter");
            let s_label = format!("iteration {k} simplifier");
            let r_phase = Phase {
                gold: &to_full,
                pseudo: fused.for_rewriter(),
                orientation: Orientation::ToFull,
                threshold: th_s,
                epochs: self.cfg.iter_epochs,
                min_steps: self.reports[0].rewriter_losses.steps,
                contrastive: self.cfg.w > 0.0,
                seed,
                label: &r_label,
            };
            let s_phase = Phase {
                gold: &to_reduced,
                pseudo: fused.for_simplifier(),
                orientation: Orientation::ToReduced,
                threshold: th_r,
                min_steps: self.reports[0].simplifier_losses.steps,
                label: &s_label,
                ..r_phase
            };
            let rl = train_phase(&mut self.rewriter, &r_phase, &self.cfg, &mut self.audit)?;
            let sl = train_phase(&mut self.simplifier, &s_phase, &self.cfg, &mut self.audit)?;
            (Training::CoTrained, self.fingerprints(seed, init), sl, rl)
        };

        let report = IterationReport {
            iteration: k,
            training,
            simplifier_selection: selection(&kept_s, &rejected_s, th_s),
            rewriter_selection: selection(&kept_r, &rejected_r, th_r),
            pool_s: self.pool_s.len(),
            pool_r: self.pool_r.len(),
            simplifier_losses,
            rewriter_losses,
            fingerprints,
            dev: self.dev_metrics()?,
        };
        self.last_pseudo = kept_s.into_iter().chain(kept_r).collect();
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Warm-up (if not done) and iterations until the cap or both pools are empty.
    pub fn run(&mut self) -> Result<&[IterationReport]> {
        if self.reports.is_empty() {
            self.warm_up()?;
        }
        while !self.finished() {
            self.co_train_iteration()?;
        }
        Ok(&self.reports)
    }
}

/// Hold out `fraction` of the examples (at least one when there are two or
/// more and the fraction is positive). Both halves keep input order.
fn split_dev(
    examples: Vec<LabeledExample>,
    fraction: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let n = examples.len();
    let mut n_dev = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_dev = n_dev.clamp(1, n - 1);
    } else if n < 2 {
        n_dev = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, 0xde5)));
    let mut is_dev = vec![false; n];
    for &i in &order[..n_dev] {
        is_dev[i] = true;
    }
    let (dev, gold): (Vec<_>, Vec<_>) = examples.into_iter().zip(is_dev).partition(|(_, d)| *d);
    (
        gold.into_iter().map(|(e, _)| e).collect(),
        dev.into_iter().map(|(e, _)| e).collect(),
    )
}

/// Models and report trail of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutput<M> {
    pub simplifier: M,
    pub rewriter: M,
    pub reports: Vec<IterationReport>,
}

pub fn run<M: GeneratorModel + Clone>(
    cfg: CoTrainConfig,
    labeled: Vec<LabeledExample>,
    pool_s: DataPool,
    pool_r: DataPool,
    simplifier: M,
    rewriter: M,
) -> Result<RunOutput<M>> {
    let mut trainer = CoTrainer::new(cfg, simplifier, rewriter, labeled, pool_s, pool_r)?;
    trainer.run()?;
    let reports = trainer.reports.clone();
    let (simplifier, rewriter) = trainer.into_models();
    Ok(RunOutput {
        simplifier,
        rewriter,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 3.0, 0.5, 0.1) - 2.3).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
    }

    #[test]
    fn batches_wrap_the_smaller_set() {
        let order = [3, 1, 2];
        assert_eq!(batch_indices(&order, 0, 2), vec![3, 1]);
        assert_eq!(batch_indices(&order, 1, 2), vec![2]);
        assert_eq!(batch_indices(&order, 2, 2), vec![1, 2]);
        assert_eq!(batch_indices(&order, 5, 4), vec![2, 3, 1]);
        assert!(batch_indices(&[], 0, 4).is_empty());
    }

    #[test]
    fn dev_split_is_deterministic_and_disjoint() {
        let ex: Vec<LabeledExample> = (0..32)
            .map(|i| LabeledExample::new(vec![], &format!("q {i}"), &format!("t {i}")).unwrap())
            .collect();
        let (g, d) = split_dev(ex.clone(), 0.1, 4);
        assert_eq!((g.len(), d.len()), (29, 3));
        assert_eq!(split_dev(ex.clone(), 0.1, 4), (g.clone(), d.clone()));
        assert!(d.iter().all(|x| !g.contains(x)));
        assert_eq!(split_dev(ex[..1].to_vec(), 0.1, 4).1.len(), 0);
        assert_eq!(split_dev(ex[..3].to_vec(), 0.1, 4).1.len(), 1);
        assert_eq!(split_dev(ex, 0.0, 4).1.len(), 0);
    }
}
