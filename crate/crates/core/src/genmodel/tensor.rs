//! Dense row-major f64 matrices and the forward kernels shared by the
//! autodiff graph and the cached inference path.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_slice(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.cols..(start + len) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// c = alpha * op(a) * op(b) + beta * c, where op transposes when the flag is set.
pub fn gemm(alpha: f64, a: &Tensor, ta: bool, b: &Tensor, tb: bool, beta: f64, c: &mut Tensor) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (k2, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides and extents describe exactly the backing vectors checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

/// x W + b with `b` a 1 x out row broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.rows, w.cols);
    for r in 0..y.rows {
        y.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut y);
    y
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; also returns per-row mean and reciprocal std.
pub fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.cols as f64;
    let mut y = Tensor::zeros(x.rows, x.cols);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for (c, out) in y.row_mut(r).iter_mut().enumerate() {
            *out = (row[c] - mean) * rstd * g.data[c] + b.data[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Multi-head scaled dot-product attention for one sequence.
///
/// `q` holds `lq` rows and `k`/`v` hold `lk` rows, all of width `d`, head
/// `h` using columns `h*dh..(h+1)*dh`. With `causal`, query `i` only sees
/// keys `j <= i`. Returns the `lq x d` output and the attention weights laid
/// out as `[head][i][j]`.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; lq * d];
    let mut probs = vec![0.0; heads * lq * lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let visible = if causal { (i + 1).min(lk) } else { lk };
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let kj = &k[j * d + off..j * d + off + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for pj in p.iter_mut().take(visible) {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let o = &mut out[i * d + off..i * d + off + dh];
            for j in 0..visible {
                p[j] /= z;
                let vj = &v[j * d + off..j * d + off + dh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += p[j] * vc;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attend`]: returns (dq, dk, dv) for one sequence.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; lq * d];
    let mut dk = vec![0.0; lk * d];
    let mut dv = vec![0.0; lk * d];
    let mut dp = vec![0.0; lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let visible = if causal { (i + 1).min(lk) } else { lk };
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut dot_pdp = 0.0;
            for j in 0..visible {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot_pdp += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (a, b) in dvj.iter_mut().zip(doi) {
                    *a += p[j] * b;
                }
            }
            for j in 0..visible {
                let ds = p[j] * (dp[j] - dot_pdp) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}
