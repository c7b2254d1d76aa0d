//! A small reverse-mode tape over matrix-valued nodes.
//!
//! Only the operations needed to push gradients from the hybrid loss back
//! through the frozen transformer into the codec are supported. Model weights
//! are borrowed constants; the only parameters that receive gradients are the
//! codec's.

use crate::codec::{CodecParams, CodecTrace};
use crate::error::Result;
use crate::model::{attention, attention_backward, concat_cols, log_sum_exp, rms_inv, AttentionOutput, ModelConfig};
use crate::tensor::{matmul, swish, swish_grad, Matrix, Real};

pub type NodeId = usize;

enum Op<'a, T> {
    Leaf,
    MatMulW { x: NodeId, w: &'a Matrix<T> },
    Add(NodeId, NodeId),
    SwiGlu { gate: NodeId, up: NodeId },
    RmsNorm { x: NodeId, gain: &'a [T] },
    Concat(NodeId, NodeId),
    Row { x: NodeId, row: usize },
    Stack(Vec<NodeId>),
    Mean(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Codec { kv: NodeId, bar: NodeId, trace: Box<CodecTrace<T>> },
    SqErr { x: NodeId, target: Vec<T> },
    Attention { q: NodeId, kv: NodeId, out: Box<AttentionOutput<T>> },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node<'a, T> {
    value: Matrix<T>,
    op: Op<'a, T>,
}

pub struct Tape<'a, T> {
    config: &'a ModelConfig,
    codec: &'a CodecParams<T>,
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(config: &'a ModelConfig, codec: &'a CodecParams<T>) -> Self {
        Self { config, codec, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<'a, T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul_w(&mut self, x: NodeId, w: &'a Matrix<T>) -> Result<NodeId> {
        let v = matmul(self.value(x), w)?;
        Ok(self.push(v, Op::MatMulW { x, w }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn swiglu(&mut self, gate: NodeId, up: NodeId) -> Result<NodeId> {
        let v = self.value(gate).zip_map(self.value(up), |g, u| swish(g) * u)?;
        Ok(self.push(v, Op::SwiGlu { gate, up }))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: &'a [T]) -> NodeId {
        let v = crate::model::rms_norm(self.value(x), gain);
        self.push(v, Op::RmsNorm { x, gain })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = concat_cols(self.value(a), self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    pub fn row(&mut self, x: NodeId, row: usize) -> NodeId {
        let v = Matrix::row_vector(self.value(x).row(row));
        self.push(v, Op::Row { x, row })
    }

    pub fn stack(&mut self, rows: Vec<NodeId>) -> Result<NodeId> {
        let data: Vec<Vec<T>> = rows.iter().map(|&r| self.value(r).data().to_vec()).collect();
        let v = Matrix::from_rows(&data)?;
        Ok(self.push(v, Op::Stack(rows)))
    }

    /// Elementwise mean: sum in order, then divide by the count.
    pub fn mean(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x))?;
        }
        let n = T::c(xs.len() as f64);
        let v = acc.map(|a| a / n);
        Ok(self.push(v, Op::Mean(xs)))
    }

    pub fn sum(&mut self, xs: Vec<NodeId>) -> Result<NodeId> {
        let mut acc = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            acc.add_assign(self.value(x))?;
        }
        Ok(self.push(acc, Op::Sum(xs)))
    }

    /// Compress then reconstruct one `1 × 2d_k` row against a reference mean.
    pub fn codec_round_trip(&mut self, kv: NodeId, bar: NodeId) -> Result<NodeId> {
        let trace = self.codec.forward_traced(self.value(kv).data(), self.value(bar).data())?;
        let v = Matrix::row_vector(&trace.out);
        Ok(self.push(v, Op::Codec { kv, bar, trace: Box::new(trace) }))
    }

    /// `‖x − target‖²` as a `1 × 1` node.
    pub fn sq_err(&mut self, x: NodeId, target: &[T]) -> NodeId {
        let s = self.value(x).data().iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push(Matrix::row_vector(&[s]), Op::SqErr { x, target: target.to_vec() })
    }

    /// Causal attention with queries and keys at positions `0..rows`.
    pub fn attention(&mut self, q: NodeId, kv: NodeId) -> Result<NodeId> {
        let pos: Vec<usize> = (0..self.value(q).rows()).collect();
        let out = attention(self.config, self.value(q), &pos, self.value(kv), &pos)?;
        let v = out.context.clone();
        Ok(self.push(v, Op::Attention { q, kv, out: Box::new(out) }))
    }

    /// Mean cross-entropy as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let l = crate::model::ntp_loss(self.value(logits), targets)?;
        Ok(self.push(Matrix::row_vector(&[l]), Op::CrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Seeds each listed scalar node with the given upstream gradient and
    /// returns the accumulated codec parameter gradients.
    pub fn backward(&self, seeds: &[(NodeId, T)]) -> Result<CodecParams<T>> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut codec_grads = self.codec.zeros_like();
        let top = seeds.iter().map(|s| s.0).max().map_or(0, |m| m + 1);
        for &(id, g) in seeds {
            accumulate(&mut grads[id], &Matrix::row_vector(&[g]))?;
        }
        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMulW { x, w } => {
                    let dx = matmul(&g, &w.transpose())?;
                    accumulate(&mut grads[*x], &dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g)?;
                    accumulate(&mut grads[*b], &g)?;
                }
                Op::SwiGlu { gate, up } => {
                    let gv = self.value(*gate);
                    let uv = self.value(*up);
                    let dg = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * uv.get(i, j) * swish_grad(gv.get(i, j)));
                    let du = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * swish(gv.get(i, j)));
                    accumulate(&mut grads[*gate], &dg)?;
                    accumulate(&mut grads[*up], &du)?;
                }
                Op::RmsNorm { x, gain } => {
                    let xv = self.value(*x);
                    let n = T::c(xv.cols() as f64);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let r = rms_inv(row);
                        let gg: Vec<T> = g.row(i).iter().zip(gain.iter()).map(|(&a, &b)| a * b).collect();
                        let proj: T = gg.iter().zip(row).map(|(&a, &b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = r * gg[j] - r * r * r * row[j] * proj / n;
                        }
                    }
                    accumulate(&mut grads[*x], &dx)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let ga = Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                    let gb = Matrix::from_fn(g.rows(), g.cols() - ca, |i, j| g.get(i, ca + j));
                    accumulate(&mut grads[*a], &ga)?;
                    accumulate(&mut grads[*b], &gb)?;
                }
                Op::Row { x, row } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    dx.row_mut(*row).copy_from_slice(g.data());
                    accumulate(&mut grads[*x], &dx)?;
                }
                Op::Stack(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        accumulate(&mut grads[r], &Matrix::row_vector(g.row(i)))?;
                    }
                }
                Op::Mean(xs) => {
                    let share = g.scale(T::one() / T::c(xs.len() as f64));
                    for &x in xs {
                        accumulate(&mut grads[x], &share)?;
                    }
                }
                Op::Sum(xs) => {
                    for &x in xs {
                        accumulate(&mut grads[x], &g)?;
                    }
                }
                Op::Codec { kv, bar, trace } => {
                    let (d_kv, d_bar) = self.codec.backward(trace, g.data(), &mut codec_grads)?;
                    accumulate(&mut grads[*kv], &Matrix::row_vector(&d_kv))?;
                    accumulate(&mut grads[*bar], &Matrix::row_vector(&d_bar))?;
                }
                Op::SqErr { x, target } => {
                    let s = g.data()[0] * T::c(2.0);
                    let d: Vec<T> = self.value(*x).data().iter().zip(target).map(|(&a, &b)| s * (a - b)).collect();
                    accumulate(&mut grads[*x], &Matrix::row_vector(&d))?;
                }
                Op::Attention { q, kv, out } => {
                    let pos: Vec<usize> = (0..self.value(*q).rows()).collect();
                    let (dq, dkv) = attention_backward(self.config, out, self.value(*kv), &pos, &pos, &g);
                    accumulate(&mut grads[*q], &dq)?;
                    accumulate(&mut grads[*kv], &dkv)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = g.data()[0] / T::c(targets.len().max(1) as f64);
                    let mut d = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, &t) in targets.iter().enumerate() {
                        let lse = log_sum_exp(lv.row(i));
                        for (j, x) in d.row_mut(i).iter_mut().enumerate() {
                            let p = (lv.get(i, j) - lse).exp();
                            *x = scale * (p - if j == t as usize { T::one() } else { T::zero() });
                        }
                    }
                    accumulate(&mut grads[*logits], &d)?;
                }
            }
        }
        Ok(codec_grads)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, g: &Matrix<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}
