//! A small tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Sequences of a batch are packed row-wise into one matrix; ops that need
//! per-sequence structure (attention, pooling) take explicit segment lists.
//! Parameters are borrowed, never copied, and their gradients come back as a
//! vector aligned with the parameter slice.

use super::tensor::{self, Tensor};
use crate::contrastive::{in_batch_loss_grad, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::exec;

pub type NodeId = usize;

/// (first row, row count) of one packed sequence.
pub type Segment = (usize, usize);

enum Op {
    Input,
    Param(usize),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        g: NodeId,
        b: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Attention(Box<AttentionOp>),
    Nll {
        logits: NodeId,
        targets: Vec<usize>,
        softmax: Tensor,
    },
    RowWeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    SegmentMean {
        x: NodeId,
        segs: Vec<Segment>,
    },
    Interleave(NodeId, NodeId),
    NtXent {
        x: NodeId,
        grad: Vec<f64>,
    },
    Sum(Vec<(NodeId, f64)>),
}

struct AttentionOp {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    q_segs: Vec<Segment>,
    k_segs: Vec<Segment>,
    heads: usize,
    causal: bool,
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id].op {
            Op::Param(p) => &self.params[p],
            _ => &self.nodes[id].value,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Tensor::zeros(0, 0), Op::Param(index))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = tensor::linear(self.value(x), self.value(w), self.value(b));
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let y = self.value(a).scaled(c);
        self.push(y, Op::Scale(a, c))
    }

    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut y = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(y, Op::Embed { table, ids })
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let (y, mean, rstd) = tensor::layer_norm(self.value(x), self.value(g), self.value(b));
        self.push(
            y,
            Op::LayerNorm {
                x,
                g,
                b,
                mean,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = Tensor::from_vec(
            v.rows,
            v.cols,
            v.data.iter().map(|&z| tensor::gelu(z)).collect(),
        );
        self.push(y, Op::Gelu(x))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        let v = self.value(x);
        debug_assert_eq!(mask.len(), v.data.len());
        let y = Tensor::from_vec(
            v.rows,
            v.cols,
            v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        self.push(y, Op::Dropout { x, mask })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        q_segs: Vec<Segment>,
        k_segs: Vec<Segment>,
        heads: usize,
        causal: bool,
    ) -> NodeId {
        assert_eq!(q_segs.len(), k_segs.len(), "attention segment lists differ");
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let parts = exec::map_range(q_segs.len(), |s| {
            let (qs, lq) = q_segs[s];
            let (ks, lk) = k_segs[s];
            tensor::attend(
                qv.rows_slice(qs, lq),
                kv.rows_slice(ks, lk),
                vv.rows_slice(ks, lk),
                lq,
                lk,
                d,
                heads,
                causal,
            )
        });
        let mut y = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::with_capacity(parts.len());
        for ((out, p), &(qs, lq)) in parts.into_iter().zip(&q_segs) {
            y.data[qs * d..(qs + lq) * d].copy_from_slice(&out);
            probs.push(p);
        }
        let op = AttentionOp {
            q,
            k,
            v,
            q_segs,
            k_segs,
            heads,
            causal,
            probs,
        };
        self.push(y, Op::Attention(Box::new(op)))
    }

    /// Per-row negative log-likelihood of `targets`, shape rows x 1.
    pub fn nll(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let mut softmax = Tensor::zeros(l.rows, l.cols);
        let mut y = Tensor::zeros(l.rows, 1);
        for r in 0..l.rows {
            let ls = tensor::log_softmax_row(l.row(r));
            y.data[r] = -ls[targets[r]];
            for (s, v) in softmax.row_mut(r).iter_mut().zip(&ls) {
                *s = v.exp();
            }
        }
        self.push(
            y,
            Op::Nll {
                logits,
                targets,
                softmax,
            },
        )
    }

    /// Scalar sum_r weights[r] * x[r] over a column vector.
    pub fn row_weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.cols, 1);
        assert_eq!(v.rows, weights.len());
        let s = v.data.iter().zip(&weights).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::RowWeightedSum { x, weights })
    }

    pub fn segment_mean(&mut self, x: NodeId, segs: Vec<Segment>) -> NodeId {
        let v = self.value(x);
        let mut y = Tensor::zeros(segs.len(), v.cols);
        for (s, &(start, len)) in segs.iter().enumerate() {
            let out = y.row_mut(s);
            for r in start..start + len {
                for (o, a) in out.iter_mut().zip(v.row(r)) {
                    *o += a;
                }
            }
            for o in out.iter_mut() {
                *o /= len as f64;
            }
        }
        self.push(y, Op::SegmentMean { x, segs })
    }

    pub fn interleave(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let mut y = Tensor::zeros(2 * av.rows, av.cols);
        for k in 0..av.rows {
            y.row_mut(2 * k).copy_from_slice(av.row(k));
            y.row_mut(2 * k + 1).copy_from_slice(bv.row(k));
        }
        self.push(y, Op::Interleave(a, b))
    }

    /// NT-Xent over an interleaved batch (see [`crate::contrastive`]).
    pub fn nt_xent(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let v = self.value(x);
        let batch = EmbeddingBatch::new(v.rows, v.cols, v.data.clone())?;
        let out = in_batch_loss_grad(&batch, tau)?;
        Ok(self.push(Tensor::scalar(out.loss), Op::NtXent { x, grad: out.grad }))
    }

    /// Weighted sum of same-shaped nodes.
    pub fn sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let shape = self.value(terms[0].0).shape();
        let mut y = Tensor::zeros(shape.0, shape.1);
        for &(id, c) in &terms {
            for (o, a) in y.data.iter_mut().zip(&self.value(id).data) {
                *o += c * a;
            }
        }
        self.push(y, Op::Sum(terms))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    /// Gradients of scalar `root` with respect to every parameter that took
    /// part in the computation (`None` for untouched parameters).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        let root_val = self.scalar(root);
        if !root_val.is_finite() {
            return Err(Error::NonFiniteLoss(format!("graph root {root}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(gy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => match &mut param_grads[*p] {
                    Some(existing) => existing.add_assign(&gy),
                    slot => *slot = Some(gy),
                },
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    tensor::gemm(1.0, &gy, false, wv, true, 0.0, &mut dx);
                    let mut dw = Tensor::zeros(wv.rows, wv.cols);
                    tensor::gemm(1.0, xv, true, &gy, false, 0.0, &mut dw);
                    let mut db = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, a) in db.data.iter_mut().zip(gy.row(r)) {
                            *o += a;
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gy.clone());
                    acc(&mut grads, *a, gy);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy.scaled(*c)),
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Tensor::zeros(t.rows, t.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, a) in dt.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *o += a;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::LayerNorm {
                    x,
                    g,
                    b,
                    mean,
                    rstd,
                } => {
                    let (xv, gv) = (self.value(*x), self.value(*g));
                    let d = xv.cols;
                    let mut dx = Tensor::zeros(xv.rows, d);
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..xv.rows {
                        let row = xv.row(r);
                        let gr = gy.row(r);
                        for c in 0..d {
                            xhat[c] = (row[c] - mean[r]) * rstd[r];
                            dxhat[c] = gr[c] * gv.data[c];
                            dg.data[c] += gr[c] * xhat[c];
                            db.data[c] += gr[c];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *g, dg);
                    acc(&mut grads, *b, db);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = xv
                        .data
                        .iter()
                        .zip(&gy.data)
                        .map(|(a, g)| g * tensor::gelu_grad(*a))
                        .collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.rows, xv.cols, dx));
                }
                Op::Dropout { x, mask } => {
                    let dx = gy.data.iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads, *x, Tensor::from_vec(gy.rows, gy.cols, dx));
                }
                Op::Attention(op) => {
                    let (qv, kv, vv) = (self.value(op.q), self.value(op.k), self.value(op.v));
                    let d = qv.cols;
                    let parts = exec::map_range(op.q_segs.len(), |s| {
                        let (qs, lq) = op.q_segs[s];
                        let (ks, lk) = op.k_segs[s];
                        tensor::attend_backward(
                            qv.rows_slice(qs, lq),
                            kv.rows_slice(ks, lk),
                            vv.rows_slice(ks, lk),
                            &op.probs[s],
                            gy.rows_slice(qs, lq),
                            lq,
                            lk,
                            d,
                            op.heads,
                            op.causal,
                        )
                    });
                    let mut dq = Tensor::zeros(qv.rows, d);
                    let mut dk = Tensor::zeros(kv.rows, d);
                    let mut dv = Tensor::zeros(vv.rows, d);
                    for (s, (pq, pk, pv)) in parts.into_iter().enumerate() {
                        let (qs, lq) = op.q_segs[s];
                        let (ks, lk) = op.k_segs[s];
                        dq.data[qs * d..(qs + lq) * d].copy_from_slice(&pq);
                        // key segments may be shared between query segments
                        for (o, a) in dk.data[ks * d..(ks + lk) * d].iter_mut().zip(&pk) {
                            *o += a;
                        }
                        for (o, a) in dv.data[ks * d..(ks + lk) * d].iter_mut().zip(&pv) {
                            *o += a;
                        }
                    }
                    acc(&mut grads, op.q, dq);
                    acc(&mut grads, op.k, dk);
                    acc(&mut grads, op.v, dv);
                }
                Op::Nll {
                    logits,
                    targets,
                    softmax,
                } => {
                    let mut dl = softmax.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let g = gy.data[r];
                        let row = dl.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= g;
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::RowWeightedSum { x, weights } => {
                    let g = gy.data[0];
                    let dx = weights.iter().map(|w| w * g).collect();
                    acc(&mut grads, *x, Tensor::from_vec(weights.len(), 1, dx));
                }
                Op::SegmentMean { x, segs } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        for r in start..start + len {
                            for (o, a) in dx.row_mut(r).iter_mut().zip(gy.row(s)) {
                                *o += a / len as f64;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Interleave(a, b) => {
                    let n = gy.rows / 2;
                    let mut da = Tensor::zeros(n, gy.cols);
                    let mut db = Tensor::zeros(n, gy.cols);
                    for k in 0..n {
                        da.row_mut(k).copy_from_slice(gy.row(2 * k));
                        db.row_mut(k).copy_from_slice(gy.row(2 * k + 1));
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::NtXent { x, grad } => {
                    let xv = self.value(*x);
                    let g = gy.data[0];
                    acc(
                        &mut grads,
                        *x,
                        Tensor::from_vec(xv.rows, xv.cols, grad.iter().map(|v| v * g).collect()),
                    );
                }
                Op::Sum(terms) => {
                    for &(t, c) in terms {
                        acc(&mut grads, t, gy.scaled(c));
                    }
                }
            }
        }
        Ok(param_grads)
    }
}
