//! Dense row-major f64 tensors and the forward kernels of every primitive.
//!
//! Tensors share their buffer through an `Arc`, so cloning is cheap and a
//! tensor is immutable unless the caller holds the only handle. Every
//! kernel rejects non-finite output instead of propagating it.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a kernel output; shape is trusted, finiteness is checked.
    fn from_op(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !all_finite(&data) {
            return Err(Error::NonFinite { op });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; shape.iter().product()]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("from_rows", "ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::from_op(
            op,
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_op(op, self.shape.clone(), data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `x - x` is 0 for finite x and NaN otherwise; four lanes vectorize.
#[allow(clippy::eq_op)]
fn all_finite(d: &[f64]) -> bool {
    let mut acc = [0.0f64; 4];
    let chunks = d.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..4 {
            acc[i] += c[i] - c[i];
        }
    }
    acc.iter().all(|&a| a == 0.0) && rest.iter().all(|v| v.is_finite())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected 2-d input, got {:?}", t.shape),
        )),
    }
}

fn expect_3d(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::invalid(
            op,
            format!("expected H×W×C input, got {:?}", t.shape),
        )),
    }
}

/// `op(a) · op(b)` where `op` optionally transposes a 2-d operand.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = expect_2d("matmul", a)?;
    let (br, bc) = expect_2d("matmul", b)?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if trans_a {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the row-major buffers checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::from_op("matmul", vec![m, n], out)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, "mul", |x, y| x * y)
}

fn row_broadcast(
    op: &'static str,
    x: &Tensor,
    r: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let c = x.cols();
    if r.len() != c {
        return Err(Error::Shape {
            op,
            lhs: x.shape.clone(),
            rhs: r.shape.clone(),
        });
    }
    let mut data = x.data.to_vec();
    if c > 0 {
        for row in data.chunks_exact_mut(c) {
            for (a, &b) in row.iter_mut().zip(r.data.iter()) {
                *a = f(*a, b);
            }
        }
    }
    Tensor::from_op(op, x.shape.clone(), data)
}

/// Adds a length-`cols` vector to every row (last-axis broadcast).
pub fn add_row(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    row_broadcast("add_row", x, r, |a, b| a + b)
}

pub fn mul_row(x: &Tensor, r: &Tensor) -> Result<Tensor> {
    row_broadcast("mul_row", x, r, |a, b| a * b)
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor> {
    x.map("scale", |v| v * c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Result<Tensor> {
    x.map("add_scalar", |v| v + c)
}

/// Multiplies every element by the single value held in `s`.
pub fn mul_scalar(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    if !s.is_scalar() {
        return Err(Error::Shape {
            op: "mul_scalar",
            lhs: x.shape.clone(),
            rhs: s.shape.clone(),
        });
    }
    let c = s.data[0];
    x.map("mul_scalar", |v| v * c)
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    x.map("exp", f64::exp)
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    if x.data.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("log", "non-positive input"));
    }
    x.map("log", f64::ln)
}

pub fn recip(x: &Tensor) -> Result<Tensor> {
    if x.data.contains(&0.0) {
        return Err(Error::invalid("recip", "division by zero"));
    }
    x.map("recip", |v| 1.0 / v)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.map("relu", |v| v.max(0.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map("gelu", |v| {
        0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
    })
}

pub(crate) fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<(usize, usize)> {
    let (r, c) = expect_2d(op, x)?;
    if axis > 1 {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for 2-d input"),
        ));
    }
    Ok((r, c))
}

fn rowwise(x: &Tensor, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        f(src, dst);
    }
    Tensor::from_op(op, x.shape.clone(), out)
}

fn softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_slice(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// Softmax along `axis` of a 2-d tensor (1 = within each row).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    if axis == 0 {
        return transpose(&softmax(&transpose(x)?, 1)?);
    }
    rowwise(x, "softmax", softmax_slice)
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("log_softmax", x, axis)?;
    if axis == 0 {
        return transpose(&log_softmax(&transpose(x)?, 1)?);
    }
    rowwise(x, "log_softmax", log_softmax_slice)
}

/// Row-wise normalization to zero mean and unit variance; also returns the
/// per-row inverse standard deviation.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let c = x.cols();
    let mut inv = Vec::with_capacity(x.len() / c.max(1));
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        let mean = src.iter().sum::<f64>() / c as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    Ok((Tensor::from_op("layer_norm", x.shape.clone(), out)?, inv))
}

/// Gathers rows of a `[V, e]` table.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, e) = expect_2d("embedding", table)?;
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        if id >= v {
            return Err(Error::invalid(
                "embedding",
                format!("id {id} out of range for {v} rows"),
            ));
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::from_op("embedding", vec![ids.len(), e], out)
}

pub fn masked_fill(x: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
    if mask.len() != x.len() {
        return Err(Error::Shape {
            op: "masked_fill",
            lhs: x.shape.clone(),
            rhs: vec![mask.len()],
        });
    }
    let data = x
        .data
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { value } else { v })
        .collect();
    Tensor::from_op("masked_fill", x.shape.clone(), data)
}

/// Strictly-upper-triangular mask of an `n × n` score matrix: entry (i, j)
/// is masked iff j > i.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n > k / n).collect()
}

pub fn sum(x: &Tensor) -> Result<Tensor> {
    Tensor::from_op("sum", vec![1], vec![x.data.iter().sum()])
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::invalid("mean", "empty input"));
    }
    Tensor::from_op(
        "mean",
        vec![1],
        vec![x.data.iter().sum::<f64>() / x.len() as f64],
    )
}

/// Mean over axis 0 of a 2-d tensor, giving `[1, cols]`.
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_2d("mean_rows", x)?;
    if r == 0 {
        return Err(Error::invalid("mean_rows", "no rows"));
    }
    let mut out = vec![0.0; c];
    for row in x.data.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= r as f64;
    }
    Tensor::from_op("mean_rows", vec![1, c], out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts
        .first()
        .map(|t| t.cols())
        .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, pc) = expect_2d("concat_rows", p)?;
        if pc != c {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        rows += r;
        data.extend_from_slice(&p.data);
    }
    Tensor::from_op("concat_rows", vec![rows, c], data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts
        .first()
        .map(|t| t.rows())
        .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
    let mut cols = 0;
    for p in parts {
        let (pr, pc) = expect_2d("concat_cols", p)?;
        if pr != r {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        cols += pc;
    }
    let mut data = Vec::with_capacity(r * cols);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::from_op("concat_cols", vec![r, cols], data)
}

pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = expect_2d("slice_cols", x)?;
    if start > end || end > c {
        return Err(Error::invalid(
            "slice_cols",
            format!("range {start}..{end} out of {c} columns"),
        ));
    }
    let mut data = Vec::with_capacity(r * (end - start));
    for i in 0..r {
        data.extend_from_slice(&x.row(i)[start..end]);
    }
    Tensor::from_op("slice_cols", vec![r, end - start], data)
}

pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = expect_2d("slice_rows", x)?;
    if start > end || end > r {
        return Err(Error::invalid(
            "slice_rows",
            format!("range {start}..{end} out of {r} rows"),
        ));
    }
    Tensor::from_op(
        "slice_rows",
        vec![end - start, c],
        x.data[start * c..end * c].to_vec(),
    )
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != x.len() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: x.shape.clone(),
            rhs: shape.to_vec(),
        });
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data: Arc::clone(&x.data),
    })
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_2d("transpose", x)?;
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor::from_op("transpose", vec![c, r], data)
}

/// Picks `x[i, idx[i]]` for every row, giving `[rows, 1]`.
pub fn pick(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = expect_2d("pick", x)?;
    if idx.len() != r {
        return Err(Error::Shape {
            op: "pick",
            lhs: x.shape.clone(),
            rhs: vec![idx.len()],
        });
    }
    let mut data = Vec::with_capacity(r);
    for (i, &j) in idx.iter().enumerate() {
        if j >= c {
            return Err(Error::invalid(
                "pick",
                format!("index {j} out of {c} columns"),
            ));
        }
        data.push(x.data[i * c + j]);
    }
    Tensor::from_op("pick", vec![r, 1], data)
}

/// Geometry of a square-kernel convolution over an H×W×C map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds patches: output row per output pixel, columns ordered (ky, kx, c).
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, ConvGeom)> {
    let (h, w, c) = expect_3d("im2col", x)?;
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::invalid(
            "im2col",
            format!("kernel {k} stride {stride} does not fit {h}×{w}"),
        ));
    }
    let g = ConvGeom {
        h,
        w,
        c,
        k,
        stride,
        pad,
    };
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; oh * ow * k * k * c];
    let mut p = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        let s = (y * w + xx) * c;
                        out[p..p + c].copy_from_slice(&x.data[s..s + c]);
                    }
                    p += c;
                }
            }
        }
    }
    Ok((Tensor::from_op("im2col", vec![oh * ow, k * k * c], out)?, g))
}

/// Inverse scatter-add of `im2col`, used for its gradient.
pub(crate) fn col2im(cols: &Tensor, g: ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.h * g.w * g.c];
    let mut p = 0;
    for oy in 0..g.out_h() {
        for ox in 0..g.out_w() {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((y, x)) = g.src(oy, ox, ky, kx) {
                        let d = (y * g.w + x) * g.c;
                        for ch in 0..g.c {
                            out[d + ch] += cols.data[p + ch];
                        }
                    }
                    p += g.c;
                }
            }
        }
    }
    Tensor {
        shape: vec![g.h, g.w, g.c],
        data: Arc::new(out),
    }
}

/// Per-channel k×k convolution with "same" zero padding; `w` is `[k, k, C]`.
pub fn depthwise_conv(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (h, wd, c) = expect_3d("depthwise_conv", x)?;
    let (k, k2, wc) = expect_3d("depthwise_conv", w)?;
    if k != k2 || wc != c || k % 2 == 0 {
        return Err(Error::Shape {
            op: "depthwise_conv",
            lhs: x.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let g = ConvGeom {
        h,
        w: wd,
        c,
        k,
        stride: 1,
        pad: k / 2,
    };
    let mut out = vec![0.0; h * wd * c];
    for oy in 0..h {
        for ox in 0..wd {
            let o = (oy * wd + ox) * c;
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        let s = (y * wd + xx) * c;
                        let wo = (ky * k + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data[s + ch] * w.data[wo + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op("depthwise_conv", vec![h, wd, c], out)
}

/// Gradients of `depthwise_conv` with respect to input and kernel.
pub(crate) fn depthwise_conv_grads(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (h, wd, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let k = w.shape[0];
    let g = ConvGeom {
        h,
        w: wd,
        c,
        k,
        stride: 1,
        pad: k / 2,
    };
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for oy in 0..h {
        for ox in 0..wd {
            let o = (oy * wd + ox) * c;
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        let s = (y * wd + xx) * c;
                        let wo = (ky * k + kx) * c;
                        for ch in 0..c {
                            let go = gout.data[o + ch];
                            gx[s + ch] += go * w.data[wo + ch];
                            gw[wo + ch] += go * x.data[s + ch];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: Arc::new(gx),
        },
        Tensor {
            shape: w.shape.clone(),
            data: Arc::new(gw),
        },
    )
}

/// 2× nearest-neighbour upsampling of an H×W×C map.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = expect_3d("upsample2x", x)?;
    let mut out = vec![0.0; 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let s = ((y / 2) * w + xx / 2) * c;
            let d = (y * 2 * w + xx) * c;
            out[d..d + c].copy_from_slice(&x.data[s..s + c]);
        }
    }
    Tensor::from_op("upsample2x", vec![2 * h, 2 * w, c], out)
}

/// Sum-pools 2×2 blocks; the adjoint of `upsample2x`.
pub(crate) fn downsample_sum2x(g: &Tensor) -> Tensor {
    let (h2, w2, c) = (g.shape[0], g.shape[1], g.shape[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h2 {
        for x in 0..w2 {
            let s = (y * w2 + x) * c;
            let d = ((y / 2) * w + x / 2) * c;
            for ch in 0..c {
                out[d + ch] += g.data[s + ch];
            }
        }
    }
    Tensor {
        shape: vec![h, w, c],
        data: Arc::new(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_softmax_of_uniform_input() {
        let x = Tensor::zeros(&[1, 4]);
        let y = log_softmax(&x, 1).unwrap();
        for &v in y.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = Tensor::new(&[3, 5], data).unwrap();
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&add_scalar(&x, 123.0).unwrap(), 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for i in 0..3 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let c = softmax(&x, 0).unwrap();
        for j in 0..5 {
            let s: f64 = (0..3).map(|i| c.at(i, j)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let x = Tensor::new(&[1, 3], vec![1000.0, 1001.0, 999.0]).unwrap();
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        let ls = log_softmax(&x, 1).unwrap();
        assert!(ls.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matmul_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = matmul(
            &Tensor::new(&[2, 3], a.clone()).unwrap(),
            &Tensor::new(&[3, 2], b.clone()).unwrap(),
        )
        .unwrap();
        let expect = [
            a[0] * b[0] + a[1] * b[2] + a[2] * b[4],
            a[0] * b[1] + a[1] * b[3] + a[2] * b[5],
            a[3] * b[0] + a[4] * b[2] + a[5] * b[4],
            a[3] * b[1] + a[4] * b[3] + a[5] * b[5],
        ];
        for (x, y) in c.data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors_name_primitive_and_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let err = add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
        let big = Tensor::scalar(1000.0);
        assert!(matches!(exp(&big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn upsample_and_its_adjoint() {
        let x = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let up = upsample2x(&x).unwrap();
        assert_eq!(up.shape(), &[2, 4, 1]);
        assert_eq!(up.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(downsample_sum2x(&up).data(), &[4.0, 8.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::new(
            &[5, 5, 2],
            (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (cols, g) = im2col(&x, 3, 2, 1).unwrap();
        assert_eq!(cols.shape(), &[9, 18]);
        let y = Tensor::new(
            cols.shape(),
            (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, g);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_layout() {
        assert_eq!(causal_mask(2), vec![false, true, false, false]);
    }
}
