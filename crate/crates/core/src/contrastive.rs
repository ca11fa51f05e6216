//! In-batch NT-Xent contrastive losses over sentence embeddings.
//!
//! Rows of a combined batch are laid out pairwise: rows `2k` and `2k + 1`
//! (0-based) are a positive pair and every other row is a negative. For an
//! anchor `i` with partner `p(i)`
//!
//! ```text
//! l(i, p) = exp(sim(i, p) / tau) / sum_{k != i} exp(sim(i, k) / tau)
//! L       = -(1 / 2N) * sum_i log l(i, p(i))
//! ```
//!
//! with cosine similarity. The internal loss pairs two dropout encodings of
//! the same input; the external loss pairs their average with the target
//! encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            weight: 0.03,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", "must be a positive finite number"));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::config("w", "must be a non-negative finite number"));
        }
        Ok(())
    }
}

/// N sentence embeddings of dimension m, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::invalid("embedding batch must be non-empty"));
        }
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "embedding batch of {rows}x{dim} given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding batch contains NaN or infinity"));
        }
        Ok(EmbeddingBatch { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("embedding rows differ in dimension"));
        }
        EmbeddingBatch::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn same_shape(&self, other: &EmbeddingBatch) -> Result<()> {
        if self.rows != other.rows || self.dim != other.dim {
            return Err(Error::invalid(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.dim, other.rows, other.dim
            )));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(
            "cosine similarity of vectors with different dimension",
        ));
    }
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid(
            "cosine similarity with a zero vector is undefined",
        ));
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Interleave rows: (a1, b1, a2, b2, ...).
pub fn combine(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    a.same_shape(b)?;
    let mut data = Vec::with_capacity(2 * a.data.len());
    for k in 0..a.rows {
        data.extend_from_slice(a.row(k));
        data.extend_from_slice(b.row(k));
    }
    Ok(EmbeddingBatch {
        rows: 2 * a.rows,
        dim: a.dim,
        data,
    })
}

fn average(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    a.same_shape(b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    EmbeddingBatch::new(a.rows, a.dim, data)
}

/// Loss value and its gradient with respect to every input entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// NT-Xent over an interleaved 2N x m batch.
pub fn in_batch_loss(x: &EmbeddingBatch, tau: f64) -> Result<f64> {
    in_batch_loss_grad(x, tau).map(|l| l.loss)
}

#[allow(clippy::needless_range_loop)]
pub fn in_batch_loss_grad(x: &EmbeddingBatch, tau: f64) -> Result<LossWithGrad> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n2 = x.rows;
    if n2 < 2 || !n2.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "contrastive batch needs an even row count >= 2, got {n2}"
        )));
    }
    let m = x.dim;
    let norms: Vec<f64> = (0..n2).map(|i| dot(x.row(i), x.row(i)).sqrt()).collect();
    if norms.contains(&0.0) {
        return Err(Error::invalid(
            "contrastive batch contains a zero embedding",
        ));
    }
    let unit: Vec<f64> = (0..n2)
        .flat_map(|i| {
            let n = norms[i];
            x.row(i).iter().map(move |v| v / n).collect::<Vec<_>>()
        })
        .collect();
    let u = |i: usize| &unit[i * m..(i + 1) * m];

    // dL/dsim, accumulated from both anchors of every (i, j) entry.
    let mut dsim = vec![0.0; n2 * n2];
    let mut loss = 0.0;
    let scale = 1.0 / n2 as f64;
    let mut logits = vec![0.0; n2];
    for i in 0..n2 {
        let partner = i ^ 1;
        let mut max = f64::NEG_INFINITY;
        for j in 0..n2 {
            if j != i {
                logits[j] = dot(u(i), u(j)) / tau;
                max = max.max(logits[j]);
            }
        }
        let mut z = 0.0;
        for j in 0..n2 {
            if j != i {
                z += (logits[j] - max).exp();
            }
        }
        let lse = max + z.ln();
        loss += scale * (lse - logits[partner]);
        for j in 0..n2 {
            if j == i {
                continue;
            }
            let softmax = (logits[j] - lse).exp();
            let target = if j == partner { 1.0 } else { 0.0 };
            let g = scale * (softmax - target) / tau;
            dsim[i * n2 + j] += g;
            dsim[j * n2 + i] += g;
        }
    }

    let mut grad = vec![0.0; n2 * m];
    for i in 0..n2 {
        // dL/du_i
        let mut du = vec![0.0; m];
        for j in 0..n2 {
            let g = dsim[i * n2 + j];
            if g != 0.0 {
                for (d, v) in du.iter_mut().zip(u(j)) {
                    *d += g * v;
                }
            }
        }
        // project out the radial component: (I - u u^T) / |x|
        let radial = dot(&du, u(i));
        for k in 0..m {
            grad[i * m + k] = (du[k] - radial * u(i)[k]) / norms[i];
        }
    }
    Ok(LossWithGrad { loss, grad })
}

/// Gradients of a combined contrastive loss split back onto its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub internal: f64,
    pub external: f64,
    pub grads: ContrastiveGrads,
}

impl ContrastiveOutput {
    pub fn total(&self) -> f64 {
        self.internal + self.external
    }
}

fn split_pairs(grad: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut even = Vec::with_capacity(rows * dim);
    let mut odd = Vec::with_capacity(rows * dim);
    for k in 0..rows {
        even.extend_from_slice(&grad[2 * k * dim..(2 * k + 1) * dim]);
        odd.extend_from_slice(&grad[(2 * k + 1) * dim..(2 * k + 2) * dim]);
    }
    (even, odd)
}

pub fn internal_loss_grad(
    q1: &EmbeddingBatch,
    q2: &EmbeddingBatch,
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let out = in_batch_loss_grad(&combine(q1, q2)?, tau)?;
    let (g1, g2) = split_pairs(&out.grad, q1.rows, q1.dim);
    Ok((out.loss, g1, g2))
}

pub fn internal_loss(q1: &EmbeddingBatch, q2: &EmbeddingBatch, tau: f64) -> Result<f64> {
    in_batch_loss(&combine(q1, q2)?, tau)
}

/// Returns (loss, dL/dq1, dL/dq2, dL/dtarget).
#[allow(clippy::type_complexity)]
pub fn external_loss_grad(
    q1: &EmbeddingBatch,
    q2: &EmbeddingBatch,
    target: &EmbeddingBatch,
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    q1.same_shape(target)?;
    let avg = average(q1, q2)?;
    let out = in_batch_loss_grad(&combine(&avg, target)?, tau)?;
    let (g_avg, g_t) = split_pairs(&out.grad, q1.rows, q1.dim);
    let half: Vec<f64> = g_avg.iter().map(|g| 0.5 * g).collect();
    Ok((out.loss, half.clone(), half, g_t))
}

pub fn external_loss(
    q1: &EmbeddingBatch,
    q2: &EmbeddingBatch,
    target: &EmbeddingBatch,
    tau: f64,
) -> Result<f64> {
    q1.same_shape(target)?;
    in_batch_loss(&combine(&average(q1, q2)?, target)?, tau)
}

/// L_C = L_icl + L_ecl with gradients for all three inputs.
pub fn contrastive_total(
    q1: &EmbeddingBatch,
    q2: &EmbeddingBatch,
    target: &EmbeddingBatch,
    tau: f64,
) -> Result<ContrastiveOutput> {
    let (internal, i1, i2) = internal_loss_grad(q1, q2, tau)?;
    let (external, e1, e2, et) = external_loss_grad(q1, q2, target, tau)?;
    Ok(ContrastiveOutput {
        internal,
        external,
        grads: ContrastiveGrads {
            q1: i1.iter().zip(&e1).map(|(a, b)| a + b).collect(),
            q2: i2.iter().zip(&e2).map(|(a, b)| a + b).collect(),
            target: et,
        },
    })
}
