use std::time::Instant;

use cqr_core::contrastive::{
    combine, contrastive_total, cosine_sim, external_loss, external_loss_grad, in_batch_loss,
    internal_loss, internal_loss_grad, EmbeddingBatch,
};
use cqr_testkit::{central_difference, contrastive as oracle, relative_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let row: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            if row.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
                break row;
            }
        })
        .collect()
}

fn batch(rows: &[Vec<f64>]) -> EmbeddingBatch {
    EmbeddingBatch::from_rows(rows).unwrap()
}

#[test]
fn losses_match_brute_force_oracle_on_random_batches() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=16);
        let tau = rng.random_range(0.05..2.0);
        let q1 = random_rows(&mut rng, n, m);
        let q2 = random_rows(&mut rng, n, m);
        let t = random_rows(&mut rng, n, m);
        let combined = oracle::interleave(&q1, &q2);
        let checks = [
            (
                in_batch_loss(&batch(&combined), tau).unwrap(),
                oracle::in_batch_loss(&combined, tau),
            ),
            (
                internal_loss(&batch(&q1), &batch(&q2), tau).unwrap(),
                oracle::internal_loss(&q1, &q2, tau),
            ),
            (
                external_loss(&batch(&q1), &batch(&q2), &batch(&t), tau).unwrap(),
                oracle::external_loss(&q1, &q2, &t, tau),
            ),
        ];
        for (got, want) in checks {
            assert!((got - want).abs() <= 1e-6, "case {case}: {got} vs {want}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn hand_derived_fixtures() {
    let x = batch(&[
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![0.0, 1.0],
    ]);
    assert!((in_batch_loss(&x, 1.0).unwrap() - 0.55145).abs() < 1e-4);
    let q1 = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!((internal_loss(&q1, &q1, 1.0).unwrap() - 0.55145).abs() < 1e-4);
    assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
    assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}

fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
    for (i, a) in analytic.iter().enumerate() {
        let numeric = central_difference(&f, x, i, 1e-6);
        let err = relative_error(*a, numeric, 1e-4);
        assert!(err <= 1e-4, "coord {i}: {a} vs {numeric}");
    }
}

#[test]
fn internal_and_external_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let n = rng.random_range(2..=4);
        let m = rng.random_range(2..=5);
        let tau = rng.random_range(0.2..1.0);
        let rows = |rng: &mut ChaCha8Rng| random_rows(rng, n, m).concat();
        let (q1, q2, t) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
        let b = |v: &[f64]| EmbeddingBatch::new(n, m, v.to_vec()).unwrap();

        let (_, g1, g2) = internal_loss_grad(&b(&q1), &b(&q2), tau).unwrap();
        check_gradient(|x| internal_loss(&b(x), &b(&q2), tau).unwrap(), &q1, &g1);
        check_gradient(|x| internal_loss(&b(&q1), &b(x), tau).unwrap(), &q2, &g2);

        let (_, e1, e2, et) = external_loss_grad(&b(&q1), &b(&q2), &b(&t), tau).unwrap();
        check_gradient(
            |x| external_loss(&b(x), &b(&q2), &b(&t), tau).unwrap(),
            &q1,
            &e1,
        );
        check_gradient(
            |x| external_loss(&b(&q1), &b(x), &b(&t), tau).unwrap(),
            &q2,
            &e2,
        );
        check_gradient(
            |x| external_loss(&b(&q1), &b(&q2), &b(x), tau).unwrap(),
            &t,
            &et,
        );
    }
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(n, m)| {
        let row = prop::collection::vec(0.1f64..1.0, m);
        let rows = prop::collection::vec(row, n);
        (rows.clone(), rows)
    })
}

proptest! {
    #[test]
    fn combine_interleaves_rows((a, b) in rows_strategy()) {
        let c = combine(&batch(&a), &batch(&b)).unwrap();
        prop_assert_eq!(c.rows(), 2 * a.len());
        for k in 0..a.len() {
            prop_assert_eq!(c.row(2 * k), a[k].as_slice());
            prop_assert_eq!(c.row(2 * k + 1), b[k].as_slice());
        }
    }

    #[test]
    fn loss_is_symmetric_in_pair_members((a, b) in rows_strategy(), tau in 0.05f64..2.0) {
        let ab = internal_loss(&batch(&a), &batch(&b), tau).unwrap();
        let ba = internal_loss(&batch(&b), &batch(&a), tau).unwrap();
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn loss_is_invariant_to_row_scaling(
        (a, b) in rows_strategy(),
        tau in 0.05f64..2.0,
        scale in prop::collection::vec(0.1f64..10.0, 16),
    ) {
        let combined = oracle::interleave(&a, &b);
        let scaled: Vec<Vec<f64>> = combined
            .iter()
            .zip(scale.iter().cycle())
            .map(|(r, s)| r.iter().map(|v| v * s).collect())
            .collect();
        let l1 = in_batch_loss(&batch(&combined), tau).unwrap();
        let l2 = in_batch_loss(&batch(&scaled), tau).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn loss_is_invariant_to_pair_permutation((a, b) in rows_strategy(), tau in 0.05f64..2.0) {
        let l = internal_loss(&batch(&a), &batch(&b), tau).unwrap();
        let ra: Vec<_> = a.iter().rev().cloned().collect();
        let rb: Vec<_> = b.iter().rev().cloned().collect();
        let r = internal_loss(&batch(&ra), &batch(&rb), tau).unwrap();
        prop_assert!((l - r).abs() < 1e-9);
    }

    #[test]
    fn total_is_sum_of_components((a, b) in rows_strategy(), tau in 0.05f64..2.0) {
        let t: Vec<Vec<f64>> = a.iter().map(|r| r.iter().rev().cloned().collect()).collect();
        let out = contrastive_total(&batch(&a), &batch(&b), &batch(&t), tau).unwrap();
        let i = internal_loss(&batch(&a), &batch(&b), tau).unwrap();
        let e = external_loss(&batch(&a), &batch(&b), &batch(&t), tau).unwrap();
        prop_assert!((out.total() - (i + e)).abs() < 1e-9);
    }
}

#[test]
fn pulling_a_positive_closer_lowers_the_loss() {
    // Rows 0 and 1 are a positive pair; negatives sit on the other axes so the
    // rotation of row 1 in the (e0, e1) plane changes only its similarity to
    // row 0 and to nothing else with a nonzero (e0, e1) component.
    let at = |theta: f64| {
        batch(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![theta.cos(), theta.sin(), 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
    };
    let mut prev = f64::INFINITY;
    for step in (0..=10).rev() {
        let theta = step as f64 * 0.15;
        let l = in_batch_loss(&at(theta), 0.5).unwrap();
        assert!(l < prev, "theta {theta}: {l} !< {prev}");
        prev = l;
    }
}
