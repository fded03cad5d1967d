//! Reverse-mode differentiation over a recorded tape.
//!
//! Model code is written once against [`Backend`]. [`Eval`] runs it
//! directly on tensors with nothing recorded (the query path); [`Tape`]
//! records every primitive so [`Tape::backward`] can replay it in reverse.

use crate::error::{Error, Result};
use crate::tensor::{self as k, ConvGeom, Tensor};

/// Primitive set shared by eager evaluation and recording.
pub trait Backend {
    type V: Clone;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A value whose gradient is tracked.
    fn param(&mut self, t: &Tensor) -> Self::V;

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    fn matmul_t(&mut self, a: &Self::V, b: &Self::V, trans_b: bool) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_row(&mut self, x: &Self::V, r: &Self::V) -> Result<Self::V>;
    fn mul_row(&mut self, x: &Self::V, r: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f64) -> Result<Self::V>;
    fn add_scalar(&mut self, x: &Self::V, c: f64) -> Result<Self::V>;
    fn mul_scalar(&mut self, x: &Self::V, s: &Self::V) -> Result<Self::V>;
    fn exp(&mut self, x: &Self::V) -> Result<Self::V>;
    fn log(&mut self, x: &Self::V) -> Result<Self::V>;
    fn recip(&mut self, x: &Self::V) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn log_softmax(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, eps: f64) -> Result<Self::V>;
    fn embedding(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;
    fn masked_fill(&mut self, x: &Self::V, mask: &[bool], value: f64) -> Result<Self::V>;
    fn sum(&mut self, x: &Self::V) -> Result<Self::V>;
    fn mean(&mut self, x: &Self::V) -> Result<Self::V>;
    fn mean_rows(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_cols(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn slice_rows(&mut self, x: &Self::V, start: usize, end: usize) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn transpose(&mut self, x: &Self::V) -> Result<Self::V>;
    fn pick(&mut self, x: &Self::V, idx: &[usize]) -> Result<Self::V>;
    fn im2col(&mut self, x: &Self::V, k: usize, stride: usize, pad: usize) -> Result<Self::V>;
    fn depthwise_conv(&mut self, x: &Self::V, w: &Self::V) -> Result<Self::V>;
    fn upsample2x(&mut self, x: &Self::V) -> Result<Self::V>;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.matmul_t(a, b, false)
    }

    /// `x · w + b` for a row batch `x`.
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        let y = self.matmul(x, w)?;
        self.add_row(&y, b)
    }
}

/// Eager, tape-free evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }
    fn matmul_t(&mut self, a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
        k::gemm(a, false, b, trans_b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        k::mul(a, b)
    }
    fn add_row(&mut self, x: &Tensor, r: &Tensor) -> Result<Tensor> {
        k::add_row(x, r)
    }
    fn mul_row(&mut self, x: &Tensor, r: &Tensor) -> Result<Tensor> {
        k::mul_row(x, r)
    }
    fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        k::scale(x, c)
    }
    fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        k::add_scalar(x, c)
    }
    fn mul_scalar(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        k::mul_scalar(x, s)
    }
    fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        k::exp(x)
    }
    fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        k::log(x)
    }
    fn recip(&mut self, x: &Tensor) -> Result<Tensor> {
        k::recip(x)
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        k::relu(x)
    }
    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        k::gelu(x)
    }
    fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        k::softmax(x, axis)
    }
    fn log_softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        k::log_softmax(x, axis)
    }
    fn layer_norm(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(k::layer_norm(x, eps)?.0)
    }
    fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        k::embedding(table, ids)
    }
    fn masked_fill(&mut self, x: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
        k::masked_fill(x, mask, value)
    }
    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        k::sum(x)
    }
    fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        k::mean(x)
    }
    fn mean_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        k::mean_rows(x)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        k::concat_rows(&parts.iter().collect::<Vec<_>>())
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        k::concat_cols(&parts.iter().collect::<Vec<_>>())
    }
    fn slice_cols(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        k::slice_cols(x, start, end)
    }
    fn slice_rows(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        k::slice_rows(x, start, end)
    }
    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        k::reshape(x, shape)
    }
    fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        k::transpose(x)
    }
    fn pick(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        k::pick(x, idx)
    }
    fn im2col(&mut self, x: &Tensor, kk: usize, stride: usize, pad: usize) -> Result<Tensor> {
        Ok(k::im2col(x, kk, stride, pad)?.0)
    }
    fn depthwise_conv(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        k::depthwise_conv(x, w)
    }
    fn upsample2x(&mut self, x: &Tensor) -> Result<Tensor> {
        k::upsample2x(x)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Pick { x: Var, idx: Vec<usize> },
    Im2Col { x: Var, geom: ConvGeom },
    DepthwiseConv { x: Var, w: Var },
    Upsample(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording context. Nodes are appended in execution order, so every
/// input precedes its output.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients indexed by node id; nodes the loss does not reach read as zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether the loss depends on `v` at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Runs the reverse sweep and marks the tape consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        let g = self.backward_retained(loss)?;
        self.consumed = true;
        Ok(g)
    }

    /// Reverse sweep that leaves the tape reusable.
    pub fn backward_retained(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "node {} does not belong to this tape",
                loss.0
            )));
        }
        if !self.val(loss).is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g)).transpose())
            .collect::<Result<_>>()?;
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let gt = || Tensor::new(node.value.shape(), g.to_vec());
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let gt = gt()?;
                if self.tracks(*a) {
                    let ga = k::gemm(&gt, false, self.val(*b), !trans_b)?;
                    self.acc(grads, *a, |s| add_into(s, ga.data()));
                }
                if self.tracks(*b) {
                    let gb = if *trans_b {
                        k::gemm(&gt, true, self.val(*a), false)?
                    } else {
                        k::gemm(self.val(*a), true, &gt, false)?
                    };
                    self.acc(grads, *b, |s| add_into(s, gb.data()));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                self.acc(grads, *x, |s| add_into(s, g));
                let c = self.val(*r).len();
                self.acc(grads, *r, |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.val(*x).data(), self.val(*r).data());
                let c = rv.len();
                self.acc(grads, *x, |s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i] * rv[i % c];
                    }
                });
                self.acc(grads, *r, |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % c] += gi * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
            }),
            Op::AddScalar(x) => self.acc(grads, *x, |s| add_into(s, g)),
            Op::MulScalar(x, sc) => {
                let (xv, c) = (self.val(*x).data(), self.val(*sc).item());
                self.acc(grads, *x, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
                self.acc(grads, *sc, |s| {
                    s[0] += g.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>()
                });
            }
            Op::Exp(x) => self.acc(grads, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Log(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / xv[i];
                    }
                })
            }
            Op::Recip(x) => self.acc(grads, *x, |s| {
                for i in 0..s.len() {
                    s[i] -= g[i] * y[i] * y[i];
                }
            }),
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = self.val(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * k::gelu_grad(xv[i]);
                    }
                })
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                self.acc(grads, *x, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                self.acc(grads, *x, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            sr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let c = node.value.cols();
                self.acc(grads, *x, |s| {
                    for (((sr, gr), yr), is) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            sr[j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                })
            }
            Op::Embedding { table, ids } => {
                let e = self.val(*table).cols();
                self.acc(grads, *table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                    }
                })
            }
            Op::MaskedFill { x, mask } => self.acc(grads, *x, |s| {
                for i in 0..s.len() {
                    if !mask[i] {
                        s[i] += g[i];
                    }
                }
            }),
            Op::Sum(x) => self.acc(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.val(*x).len() as f64;
                self.acc(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::MeanRows(x) => {
                let xv = self.val(*x);
                let (r, c) = (xv.rows() as f64, xv.cols());
                self.acc(grads, *x, |s| {
                    for row in s.chunks_mut(c) {
                        for (v, gi) in row.iter_mut().zip(g) {
                            *v += gi / r;
                        }
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    self.acc(grads, *p, |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.val(*p).cols();
                    self.acc(grads, *p, |s| {
                        for (i, row) in s.chunks_mut(c).enumerate() {
                            add_into(row, &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let c = node.value.cols();
                let total = self.val(*x).cols();
                self.acc(grads, *x, |s| {
                    for (i, row) in g.chunks(c).enumerate() {
                        add_into(&mut s[i * total + start..i * total + start + c], row);
                    }
                })
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                self.acc(grads, *x, |s| {
                    add_into(&mut s[start * c..start * c + g.len()], g)
                })
            }
            Op::Reshape(x) => self.acc(grads, *x, |s| add_into(s, g)),
            Op::Transpose(x) => {
                let gt = k::transpose(&gt()?)?;
                self.acc(grads, *x, |s| add_into(s, gt.data()))
            }
            Op::Pick { x, idx } => {
                let c = self.val(*x).cols();
                self.acc(grads, *x, |s| {
                    for (i, &j) in idx.iter().enumerate() {
                        s[i * c + j] += g[i];
                    }
                })
            }
            Op::Im2Col { x, geom } => {
                let back = k::col2im(&gt()?, *geom);
                self.acc(grads, *x, |s| add_into(s, back.data()))
            }
            Op::DepthwiseConv { x, w } => {
                let (gx, gw) = k::depthwise_conv_grads(self.val(*x), self.val(*w), &gt()?);
                self.acc(grads, *x, |s| add_into(s, gx.data()));
                self.acc(grads, *w, |s| add_into(s, gw.data()));
            }
            Op::Upsample(x) => {
                let back = k::downsample_sum2x(&gt()?);
                self.acc(grads, *x, |s| add_into(s, back.data()))
            }
        }
        Ok(())
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracks(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Backend for Tape {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }
    fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Param,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }
    fn matmul_t(&mut self, a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
        let v = k::gemm(self.val(*a), false, self.val(*b), trans_b)?;
        Ok(self.push(
            v,
            Op::MatMul {
                a: *a,
                b: *b,
                trans_b,
            },
            &[*a, *b],
        ))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::add(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b), &[*a, *b]))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Sub(*a, *b), &[*a, *b]))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = k::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Mul(*a, *b), &[*a, *b]))
    }
    fn add_row(&mut self, x: &Var, r: &Var) -> Result<Var> {
        let v = k::add_row(self.val(*x), self.val(*r))?;
        Ok(self.push(v, Op::AddRow(*x, *r), &[*x, *r]))
    }
    fn mul_row(&mut self, x: &Var, r: &Var) -> Result<Var> {
        let v = k::mul_row(self.val(*x), self.val(*r))?;
        Ok(self.push(v, Op::MulRow(*x, *r), &[*x, *r]))
    }
    fn scale(&mut self, x: &Var, c: f64) -> Result<Var> {
        let v = k::scale(self.val(*x), c)?;
        Ok(self.push(v, Op::Scale(*x, c), &[*x]))
    }
    fn add_scalar(&mut self, x: &Var, c: f64) -> Result<Var> {
        let v = k::add_scalar(self.val(*x), c)?;
        Ok(self.push(v, Op::AddScalar(*x), &[*x]))
    }
    fn mul_scalar(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let v = k::mul_scalar(self.val(*x), self.val(*s))?;
        Ok(self.push(v, Op::MulScalar(*x, *s), &[*x, *s]))
    }
    fn exp(&mut self, x: &Var) -> Result<Var> {
        let v = k::exp(self.val(*x))?;
        Ok(self.push(v, Op::Exp(*x), &[*x]))
    }
    fn log(&mut self, x: &Var) -> Result<Var> {
        let v = k::log(self.val(*x))?;
        Ok(self.push(v, Op::Log(*x), &[*x]))
    }
    fn recip(&mut self, x: &Var) -> Result<Var> {
        let v = k::recip(self.val(*x))?;
        Ok(self.push(v, Op::Recip(*x), &[*x]))
    }
    fn relu(&mut self, x: &Var) -> Result<Var> {
        let v = k::relu(self.val(*x))?;
        Ok(self.push(v, Op::Relu(*x), &[*x]))
    }
    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let v = k::gelu(self.val(*x))?;
        Ok(self.push(v, Op::Gelu(*x), &[*x]))
    }
    fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        if axis == 0 {
            let t = self.transpose(x)?;
            let s = self.softmax(&t, 1)?;
            return self.transpose(&s);
        }
        let v = k::softmax(self.val(*x), axis)?;
        Ok(self.push(v, Op::Softmax(*x), &[*x]))
    }
    fn log_softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        if axis == 0 {
            let t = self.transpose(x)?;
            let s = self.log_softmax(&t, 1)?;
            return self.transpose(&s);
        }
        let v = k::log_softmax(self.val(*x), axis)?;
        Ok(self.push(v, Op::LogSoftmax(*x), &[*x]))
    }
    fn layer_norm(&mut self, x: &Var, eps: f64) -> Result<Var> {
        let (v, inv_std) = k::layer_norm(self.val(*x), eps)?;
        Ok(self.push(v, Op::LayerNorm { x: *x, inv_std }, &[*x]))
    }
    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let v = k::embedding(self.val(*table), ids)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table: *table,
                ids: ids.to_vec(),
            },
            &[*table],
        ))
    }
    fn masked_fill(&mut self, x: &Var, mask: &[bool], value: f64) -> Result<Var> {
        let v = k::masked_fill(self.val(*x), mask, value)?;
        Ok(self.push(
            v,
            Op::MaskedFill {
                x: *x,
                mask: mask.to_vec(),
            },
            &[*x],
        ))
    }
    fn sum(&mut self, x: &Var) -> Result<Var> {
        let v = k::sum(self.val(*x))?;
        Ok(self.push(v, Op::Sum(*x), &[*x]))
    }
    fn mean(&mut self, x: &Var) -> Result<Var> {
        let v = k::mean(self.val(*x))?;
        Ok(self.push(v, Op::Mean(*x), &[*x]))
    }
    fn mean_rows(&mut self, x: &Var) -> Result<Var> {
        let v = k::mean_rows(self.val(*x))?;
        Ok(self.push(v, Op::MeanRows(*x), &[*x]))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = k::concat_rows(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }
    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = k::concat_cols(&parts.iter().map(|p| self.val(*p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }
    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let v = k::slice_cols(self.val(*x), start, end)?;
        Ok(self.push(v, Op::SliceCols { x: *x, start }, &[*x]))
    }
    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let v = k::slice_rows(self.val(*x), start, end)?;
        Ok(self.push(v, Op::SliceRows { x: *x, start }, &[*x]))
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = k::reshape(self.val(*x), shape)?;
        Ok(self.push(v, Op::Reshape(*x), &[*x]))
    }
    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let v = k::transpose(self.val(*x))?;
        Ok(self.push(v, Op::Transpose(*x), &[*x]))
    }
    fn pick(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let v = k::pick(self.val(*x), idx)?;
        Ok(self.push(
            v,
            Op::Pick {
                x: *x,
                idx: idx.to_vec(),
            },
            &[*x],
        ))
    }
    fn im2col(&mut self, x: &Var, kk: usize, stride: usize, pad: usize) -> Result<Var> {
        let (v, geom) = k::im2col(self.val(*x), kk, stride, pad)?;
        Ok(self.push(v, Op::Im2Col { x: *x, geom }, &[*x]))
    }
    fn depthwise_conv(&mut self, x: &Var, w: &Var) -> Result<Var> {
        let v = k::depthwise_conv(self.val(*x), self.val(*w))?;
        Ok(self.push(v, Op::DepthwiseConv { x: *x, w: *w }, &[*x, *w]))
    }
    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let v = k::upsample2x(self.val(*x))?;
        Ok(self.push(v, Op::Upsample(*x), &[*x]))
    }
}
