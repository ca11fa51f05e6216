use cqr_core::contrastive::ContrastiveConfig;
use cqr_core::domain::{Orientation, TrainPair};
use cqr_core::genmodel::tensor::Tensor;
use cqr_core::genmodel::{
    load_checkpoint, GeneratorModel, ModelConfig, Origin, StepObjective, TinySeq2Seq, TrainBatch,
    Vocab,
};
use cqr_core::Error;
use cqr_testkit::relative_error;

const TEXTS: [&str; 4] = [
    "what is the color of the sun ?",
    "what is the size of it ?",
    "tell me about the moon .",
    "what about the size ?",
];

fn vocab() -> Vocab {
    Vocab::build(TEXTS)
}

fn tiny_config(dropout: f64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout,
        history_budget: 16,
        max_source_len: 12,
        max_target_len: 12,
        learning_rate: 1e-2,
        seed: 11,
    }
}

fn pair(history: &[&str], source: &str, target: &str) -> TrainPair {
    TrainPair {
        history: history.iter().map(|s| s.to_string()).collect(),
        source: source.to_string(),
        target: target.to_string(),
        orientation: Orientation::ToFull,
        confidence: None,
    }
}

fn two_examples() -> Vec<TrainPair> {
    vec![
        pair(&[TEXTS[0]], TEXTS[1], "what is the size of the sun ?"),
        pair(&[TEXTS[2]], TEXTS[3], "what is the size of the moon ?"),
    ]
}

fn objective(examples: Vec<TrainPair>, contrastive: Option<ContrastiveConfig>) -> StepObjective {
    StepObjective {
        gold: Some(TrainBatch::new(examples, 1.0, Origin::Gold).unwrap()),
        pseudo: None,
        contrastive,
        label: "test".into(),
    }
}

fn perturbed(model: &TinySeq2Seq, p: usize, k: usize, delta: f64) -> TinySeq2Seq {
    let mut params: Vec<Tensor> = model.params().to_vec();
    params[p].data[k] += delta;
    model.with_params(params).unwrap()
}

/// Compare analytic gradients of `loss` against central differences on a
/// spread of coordinates of every parameter tensor.
fn gradient_check(model: &TinySeq2Seq, obj: &StepObjective, loss: impl Fn(&TinySeq2Seq) -> f64) {
    let (_, grads) = model.gradients(obj).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (p, t) in model.params().iter().enumerate() {
        let n = t.data.len();
        for k in [0, n / 3, (2 * n) / 3, n - 1] {
            let numeric =
                (loss(&perturbed(model, p, k, h)) - loss(&perturbed(model, p, k, -h))) / (2.0 * h);
            let analytic = grads[p].as_ref().map_or(0.0, |g| g.data[k]);
            let err = relative_error(analytic, numeric, 1e-4);
            assert!(
                err <= 1e-4,
                "param {p} coord {k}: analytic {analytic} numeric {numeric} (rel err {err})"
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn generation_loss_gradient_matches_finite_differences() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.0)).unwrap();
    let obj = objective(two_examples(), None);
    let batch = obj.gold.clone().unwrap();
    gradient_check(&model, &obj, |m| m.generation_loss(&batch).unwrap());
}

#[test]
fn contrastive_objective_gradient_matches_finite_differences() {
    // Dropout 0 makes both stochastic passes deterministic, so the objective is
    // a smooth function of the parameters.
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.0)).unwrap();
    let mut examples = two_examples();
    examples.push(pair(&[], TEXTS[0], TEXTS[0]));
    let obj = objective(
        examples,
        Some(ContrastiveConfig {
            tau: 0.5,
            weight: 0.7,
        }),
    );
    let (losses, _) = model.gradients(&obj).unwrap();
    assert!(losses.l_icl > 0.0 && losses.l_ecl > 0.0);
    gradient_check(&model, &obj, |m| m.gradients(&obj).unwrap().0.total);
}

#[test]
fn step_total_decomposes_into_weighted_components() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let ex = two_examples();
    let mut pseudo = ex.clone();
    for p in &mut pseudo {
        p.confidence = Some(-1.0);
    }
    let obj = StepObjective {
        gold: Some(TrainBatch::new(ex, 1.0, Origin::Gold).unwrap()),
        pseudo: Some(TrainBatch::new(pseudo, 0.5, Origin::Pseudo).unwrap()),
        contrastive: Some(ContrastiveConfig {
            tau: 0.1,
            weight: 0.03,
        }),
        label: "decomposition".into(),
    };
    let (l, _) = model.gradients(&obj).unwrap();
    let expected = l.lg_gold + 0.5 * l.lg_pseudo + 0.03 * (l.l_icl + l.l_ecl);
    assert!((l.total - expected).abs() < 1e-9, "{l:?}");
}

#[test]
fn confidence_matches_teacher_forced_log_probability() {
    let mut model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let obj = objective(two_examples(), None);
    for round in 0..3 {
        for (history, source) in [(vec![TEXTS[0].to_string()], TEXTS[1]), (vec![], TEXTS[3])] {
            for max_len in [1, 4, 32] {
                let g = model.generate(&history, source, max_len).unwrap();
                let cap = max_len.min(model.config().max_target_len);
                let stopped_on_eos = g.token_count < cap;
                let lp = model
                    .sequence_log_prob(&history, source, &g.text, stopped_on_eos)
                    .unwrap();
                assert!(
                    (g.confidence - lp).abs() < 1e-5,
                    "round {round}, max_len {max_len}: {} vs {lp}",
                    g.confidence
                );
                assert!(g.confidence.is_finite() && g.confidence < 0.0);
            }
        }
        for _ in 0..20 {
            model.train_step(&obj).unwrap();
        }
    }
}

#[test]
fn max_len_one_emits_exactly_one_token() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let g = model.generate(&[], TEXTS[0], 1).unwrap();
    assert_eq!(g.token_count, 1);
    assert_eq!(g.text.split_whitespace().count(), 1);
}

#[test]
fn invalid_generation_inputs() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    assert!(model.generate(&[], "", 5).is_err());
    assert!(model.generate(&[], "   ", 5).is_err());
    assert!(model.generate(&[], TEXTS[0], 0).is_err());
    let blank = TinySeq2Seq::uninitialized(vocab(), tiny_config(0.1)).unwrap();
    assert!(matches!(
        blank.generate(&[], TEXTS[0], 5),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        blank.encode(&[], TEXTS[0], false),
        Err(Error::Contract(_))
    ));
}

#[test]
fn uniform_model_loss_is_length_times_log_vocab() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.0)).unwrap();
    let zeros: Vec<Tensor> = model
        .params()
        .iter()
        .map(|t| Tensor::zeros(t.rows, t.cols))
        .collect();
    let uniform = model.with_params(zeros).unwrap();
    let v = uniform.vocab().len() as f64;
    let target = "what is it";
    let lp = uniform
        .sequence_log_prob(&[], TEXTS[0], target, false)
        .unwrap();
    assert!((-lp - 3.0 * v.ln()).abs() < 1e-9, "{lp}");
    let batch = TrainBatch::new(vec![pair(&[], TEXTS[0], target)], 1.0, Origin::Gold).unwrap();
    // The generation loss also scores the end-of-sequence symbol.
    let loss = uniform.generation_loss(&batch).unwrap();
    assert!((loss - 4.0 * v.ln()).abs() < 1e-9, "{loss}");
}

#[test]
fn training_overfits_a_fixed_batch() {
    let mut model = TinySeq2Seq::new(vocab(), tiny_config(0.0)).unwrap();
    let examples: Vec<TrainPair> = (0..8)
        .map(|i| pair(&[TEXTS[i % 4]], TEXTS[(i + 1) % 4], TEXTS[(i + 2) % 4]))
        .collect();
    let obj = objective(examples.clone(), None);
    let batch = obj.gold.clone().unwrap();
    let before = model.generation_loss(&batch).unwrap();
    for _ in 0..200 {
        model.train_step(&obj).unwrap();
    }
    let after = model.generation_loss(&batch).unwrap();
    assert!(after < 0.05 * before, "{before} -> {after}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    model.set_learning_rate(0.0);
    let before = model.checksum();
    model.train_step(&objective(two_examples(), None)).unwrap();
    assert_eq!(model.checksum(), before);
}

#[test]
fn reinitialization_is_seeded_and_forgets_training() {
    let mut a = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let mut b = a.clone();
    a.reinitialize(7);
    let fresh = a.checksum();
    for _ in 0..5 {
        b.train_step(&objective(two_examples(), None)).unwrap();
    }
    let trained = b.checksum();
    b.reinitialize(7);
    assert_eq!(b.checksum(), fresh);
    assert_ne!(trained, fresh);
    b.reinitialize(8);
    assert_ne!(b.checksum(), fresh);
    // The training trajectory after reinitialization is reproducible too.
    a.train_step(&objective(two_examples(), None)).unwrap();
    let mut c = b.clone();
    c.reinitialize(7);
    c.train_step(&objective(two_examples(), None)).unwrap();
    assert_eq!(a.checksum(), c.checksum());
}

#[test]
fn generation_is_deterministic_given_seed() {
    let a = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let b = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let ga = a.generate(&[TEXTS[0].into()], TEXTS[1], 8).unwrap();
    let gb = b.generate(&[TEXTS[0].into()], TEXTS[1], 8).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn encode_dropout_properties() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let h = [TEXTS[0].to_string()];
    let e1 = model.encode(&h, TEXTS[1], false).unwrap();
    let e2 = model.encode(&h, TEXTS[1], false).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.len(), 8);
    let s1 = model.encode(&h, TEXTS[1], true).unwrap();
    let s2 = model.encode(&h, TEXTS[1], true).unwrap();
    assert_ne!(s1, s2);
    assert_ne!(s1, e1);

    let clean = TinySeq2Seq::new(vocab(), tiny_config(0.0)).unwrap();
    assert_eq!(
        clean.encode(&h, TEXTS[1], true).unwrap(),
        clean.encode(&h, TEXTS[1], false).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    for _ in 0..3 {
        model.train_step(&objective(two_examples(), None)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.checksum(), model.checksum());
    assert_eq!(loaded.vocab(), model.vocab());
    assert_eq!(loaded.config(), model.config());
    let h = [TEXTS[2].to_string()];
    assert_eq!(
        loaded.generate(&h, TEXTS[3], 10).unwrap(),
        model.generate(&h, TEXTS[3], 10).unwrap()
    );
}

#[test]
fn checkpoint_version_and_shape_mismatches_are_rejected() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    let wrong_version = dir.path().join("v2.ckpt");
    std::fs::write(
        &wrong_version,
        text.replace("genmodel-ckpt/1", "genmodel-ckpt/2"),
    )
    .unwrap();
    assert!(matches!(
        load_checkpoint(&wrong_version),
        Err(Error::Checkpoint(_))
    ));

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["config"]["d_model"] = 16.into();
    let wrong_shape = dir.path().join("shape.ckpt");
    std::fs::write(&wrong_shape, json.to_string()).unwrap();
    assert!(matches!(
        load_checkpoint(&wrong_shape),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn non_finite_loss_names_the_batch() {
    let model = TinySeq2Seq::new(vocab(), tiny_config(0.1)).unwrap();
    let poisoned: Vec<Tensor> = model
        .params()
        .iter()
        .map(|t| Tensor::from_vec(t.rows, t.cols, vec![f64::NAN; t.data.len()]))
        .collect();
    let mut bad = model.with_params(poisoned).unwrap();
    let mut obj = objective(two_examples(), None);
    obj.label = "batch 17".into();
    match bad.train_step(&obj) {
        Err(Error::NonFiniteLoss(msg)) => assert!(msg.contains("batch 17"), "{msg}"),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
