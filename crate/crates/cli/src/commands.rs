use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cqr_core::cotrain::rundir::RunDir;
use cqr_core::cotrain::{build_vocab, evaluate_model, CoTrainer, Mode};
use cqr_core::dataio::{self, SourceFormat};
use cqr_core::domain::{DataPool, LabeledExample, Session};
use cqr_core::genmodel::{load_checkpoint, GeneratorModel, TinySeq2Seq};
use cqr_core::metrics::evaluate_corpus;
use cqr_core::weaklabel::{synth_generate_with, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::UsageError;

/// One line of `rewrite`/`simplify` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub session_id: String,
    pub turn: usize,
    pub generated: String,
    pub confidence: f64,
}

struct Datasets {
    labeled: Vec<LabeledExample>,
    pool_s: Vec<Session>,
    pool_r: Vec<Session>,
    test: Option<Vec<LabeledExample>>,
}

fn load(path: &Path) -> Result<Vec<Session>> {
    dataio::load_sessions(path).with_context(|| format!("loading {}", path.display()))
}

fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let few_shot = cfg.cotrain.mode == Mode::FewShot;
    if let Some(s) = &d.synthetic {
        let data = synth_generate_with(&SynthSpec {
            n_sessions: s.sessions,
            turns: s.turns,
            labeled_sessions: s.labeled_sessions,
            test_sessions: s.test_sessions,
            seed: s.seed,
        })?;
        let labeled = if few_shot {
            data.labeled_examples()
        } else {
            Vec::new()
        };
        let test = Some(data.test_examples());
        return Ok(Datasets {
            labeled,
            pool_s: data.pool_s,
            pool_r: data.pool_r,
            test,
        });
    }
    let labeled = match &d.labeled {
        Some(p) => dataio::to_labeled(&load(p)?),
        None => Vec::new(),
    };
    let (Some(pool_s), Some(pool_r)) = (&d.pool_s, &d.pool_r) else {
        bail!(UsageError("both pools are required".into()));
    };
    let test = match &d.test {
        Some(p) => Some(dataio::to_labeled(&load(p)?)),
        None => None,
    };
    Ok(Datasets {
        labeled,
        pool_s: load(pool_s)?,
        pool_r: load(pool_r)?,
        test,
    })
}

fn run_one(cfg: &RunConfig) -> Result<()> {
    let data = load_datasets(cfg)?;
    let vocab = build_vocab(&data.labeled, &[&data.pool_s, &data.pool_r]);
    let model = TinySeq2Seq::new(vocab, cfg.model.clone())?;
    let mut trainer = CoTrainer::new(
        cfg.cotrain.clone(),
        model.clone(),
        model,
        data.labeled,
        DataPool::new(data.pool_s)?,
        DataPool::new(data.pool_r)?,
    )?;
    let dir = RunDir::create(&cfg.data.run_dir)?;
    dir.write_config(&cfg.snapshot()?)?;

    let report = trainer.warm_up()?.clone();
    dir.write_iteration(&report, trainer.simplifier(), trainer.rewriter(), &[])?;
    eprintln!(
        "warm-up: {} gold examples, {} dev",
        trainer.gold().len(),
        trainer.dev().len()
    );
    while !trainer.finished() {
        let report = trainer.co_train_iteration()?.clone();
        dir.write_iteration(
            &report,
            trainer.simplifier(),
            trainer.rewriter(),
            trainer.last_pseudo(),
        )?;
        eprintln!(
            "iteration {}: kept {}+{}, pools {}/{}, {:?}{}",
            report.iteration,
            report.simplifier_selection.kept,
            report.rewriter_selection.kept,
            report.pool_s,
            report.pool_r,
            report.training,
            report
                .dev
                .as_ref()
                .map(|m| format!(", dev em {:.4}", m.em))
                .unwrap_or_default()
        );
    }
    if let Some(test) = data.test.filter(|t| !t.is_empty()) {
        let metrics = evaluate_model(trainer.rewriter(), &test, cfg.cotrain.max_len)?;
        let mut json = serde_json::to_string_pretty(&metrics)?;
        json.push('\n');
        fs::write(dir.root().join("metrics.json"), json)?;
        eprintln!(
            "test: em {:.4} bleu4 {:.4} (n = {})",
            metrics.em, metrics.bleu4, metrics.n
        );
    }
    println!("{}", dir.root().display());
    Ok(())
}

pub fn cotrain(config_path: &Path, sweep: Option<&str>) -> Result<()> {
    let cfg = RunConfig::load(config_path, &config::env_overrides())?;
    let Some(spec) = sweep else {
        return run_one(&cfg);
    };
    let grid = config::parse_sweep(spec)?;
    let points = config::grid_points(&grid);
    let mut resolved = Vec::with_capacity(points.len());
    for point in &points {
        let mut table = cfg.to_table()?;
        for (key, value) in point {
            config::set_key(&mut table, "cotrain", key, value)?;
        }
        let run_dir = cfg.data.run_dir.join(config::point_name(point));
        config::set_key(
            &mut table,
            "data",
            "run_dir",
            &toml::Value::String(run_dir.display().to_string()).to_string(),
        )?;
        resolved.push(RunConfig::from_table(table, Path::new("/"))?);
    }
    for (point, cfg) in points.iter().zip(&resolved) {
        eprintln!("sweep point {}", config::point_name(point));
        run_one(cfg)?;
    }
    Ok(())
}

pub fn generate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    max_len: usize,
    simplify: bool,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let sessions = load(input)?;
    let mut out = String::new();
    for session in &sessions {
        for (turn, t) in session.turns.iter().enumerate() {
            let source = match (simplify, &t.rewrite) {
                (true, Some(full)) => full,
                _ => &t.query,
            };
            let g = model.generate(&session.history(turn), source, max_len)?;
            let line = Prediction {
                session_id: session.session_id.clone(),
                turn,
                generated: g.text,
                confidence: g.confidence,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(output, out).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

fn load_predictions(path: &Path) -> Result<BTreeMap<(String, usize), String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut preds = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let key = (p.session_id, p.turn);
        if preds.insert(key.clone(), p.generated).is_some() {
            bail!(UsageError(format!(
                "{}: duplicate prediction for {}#{}",
                path.display(),
                key.0,
                key.1
            )));
        }
    }
    Ok(preds)
}

/// Pair predictions with gold rewrites by (session id, turn). Every gold
/// rewrite needs a prediction; predictions for turns without a rewrite are
/// ignored, predictions for unknown turns are an error.
pub fn evaluate(pred: &Path, gold: &Path) -> Result<()> {
    let mut preds = load_predictions(pred)?;
    let sessions = load(gold)?;
    let known: BTreeSet<(String, usize)> = sessions
        .iter()
        .flat_map(|s| (0..s.turns.len()).map(|t| (s.session_id.clone(), t)))
        .collect();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for s in &sessions {
        for (turn, t) in s.turns.iter().enumerate() {
            let Some(reference) = &t.rewrite else {
                continue;
            };
            match preds.remove(&(s.session_id.clone(), turn)) {
                Some(p) => pairs.push((p, reference.clone())),
                None => missing.push(format!("{}#{turn}", s.session_id)),
            }
        }
    }
    let unknown: Vec<String> = preds
        .keys()
        .filter(|k| !known.contains(*k))
        .map(|(s, t)| format!("{s}#{t}"))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        bail!(UsageError(format!(
            "predictions and gold are not aligned; missing predictions: [{}]; unknown predictions: [{}]",
            missing.join(", "),
            unknown.join(", ")
        )));
    }
    if pairs.is_empty() {
        bail!(UsageError(format!(
            "{}: no gold rewrites to score",
            gold.display()
        )));
    }
    let report = evaluate_corpus(&pairs)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn synth(
    sessions: usize,
    turns: usize,
    seed: u64,
    labeled: usize,
    test: usize,
    out: &Path,
) -> Result<()> {
    let data = synth_generate_with(&SynthSpec {
        n_sessions: sessions,
        turns,
        labeled_sessions: labeled,
        test_sessions: test,
        seed,
    })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, split) in [
        ("labeled", &data.labeled),
        ("pool_s", &data.pool_s),
        ("pool_r", &data.pool_r),
        ("test", &data.test),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        dataio::save_sessions(&path, split)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn adapt(format: SourceFormat, input: &Path, output: &Path) -> Result<()> {
    let sessions = dataio::adapt(format, input)
        .with_context(|| format!("adapting {} as {format}", input.display()))?;
    dataio::save_sessions(output, &sessions)
        .with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}
