//! Term-by-term NT-Xent over a materialized similarity matrix.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Full 2N x 2N cosine similarity matrix.
pub fn similarity_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|a| rows.iter().map(|b| cosine(a, b)).collect())
        .collect()
}

/// exp(sim(i,j)/tau) / sum_{k != i} exp(sim(i,k)/tau)
pub fn pair_ratio(sim: &[Vec<f64>], i: usize, j: usize, tau: f64) -> f64 {
    let num = (sim[i][j] / tau).exp();
    let mut den = 0.0;
    for (k, s) in sim[i].iter().enumerate() {
        if k != i {
            den += (s / tau).exp();
        }
    }
    num / den
}

/// -(1/2N) sum_k [ log l(2k-1, 2k) + log l(2k, 2k-1) ] with 1-based pairing.
pub fn in_batch_loss(rows: &[Vec<f64>], tau: f64) -> f64 {
    assert!(rows.len() >= 2 && rows.len().is_multiple_of(2));
    let sim = similarity_matrix(rows);
    let two_n = rows.len();
    let mut total = 0.0;
    for k in 1..=two_n / 2 {
        let a = 2 * k - 2;
        let b = 2 * k - 1;
        total += pair_ratio(&sim, a, b, tau).ln();
        total += pair_ratio(&sim, b, a, tau).ln();
    }
    -total / two_n as f64
}

pub fn interleave(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (x, y) in a.iter().zip(b) {
        out.push(x.clone());
        out.push(y.clone());
    }
    out
}

pub fn internal_loss(q1: &[Vec<f64>], q2: &[Vec<f64>], tau: f64) -> f64 {
    in_batch_loss(&interleave(q1, q2), tau)
}

pub fn external_loss(q1: &[Vec<f64>], q2: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let avg: Vec<Vec<f64>> = q1
        .iter()
        .zip(q2)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect())
        .collect();
    in_batch_loss(&interleave(&avg, t), tau)
}
