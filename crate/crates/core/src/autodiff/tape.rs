use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::linear_map::LinearMap;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    /// `max(x, c)`; ties route the gradient to `x`.
    MaxScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
    },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    LogSoftmax(Var),
    Softmax(Var),
    MaxLast { input: Var, argmax: Vec<usize> },
    Pick { input: Var, flat: Vec<usize> },
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    Linear { input: Var, map: Arc<LinearMap> },
}

/// One recorded operation: cached forward value plus the rule for
/// propagating gradients to its parents.
#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so the tape order is already a
/// topological order and `backward` visits each node once, newest first.
/// Leaf gradients accumulate across `backward` calls until [`Tape::zero_grad`]
/// or [`Tape::reset`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a copy of `t` as a gradient-tracking leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of `v` as a tensor, carrying its accumulated gradient if any.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone())
            .expect("node shape matches its value")
            .with_requires_grad(n.requires_grad);
        if let Some(g) = &n.grad {
            t.accumulate_grad(g).expect("grad shape matches value");
        }
        t
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- unary

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xs = &self.nodes[x.0].value;
        let value: Vec<f64> = match kind {
            UnaryKind::Log => {
                if let Some(bad) = xs.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("argument {bad} is not strictly positive"),
                    });
                }
                xs.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::PowScalar(p) => {
                if p.fract() != 0.0 {
                    if let Some(bad) = xs.iter().find(|&&v| v < 0.0) {
                        return Err(Error::Domain {
                            op: "pow",
                            msg: format!("negative base {bad} with fractional exponent {p}"),
                        });
                    }
                }
                xs.iter().map(|v| v.powf(p)).collect()
            }
            _ => xs.iter().map(|&v| unary_forward(kind, v)).collect(),
        };
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }
    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MulScalar(c), x)
    }
    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::PowScalar(p), x)
    }
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::MaxScalar(c), x)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }

    // --------------------------------------------------------------- binary

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: binary_name(kind),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value: Vec<f64> = if sa == sb {
            va.iter()
                .zip(vb)
                .map(|(&x, &y)| binary_forward(kind, x, y))
                .collect()
        } else {
            let ma = kernels::broadcast_index_map(&out_shape, sa);
            let mb = kernels::broadcast_index_map(&out_shape, sb);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| binary_forward(kind, va[i], vb[j]))
                .collect()
        };
        match kind {
            BinaryKind::Div => {
                if vb.iter().any(|&y| y == 0.0) {
                    return Err(Error::Domain {
                        op: "div",
                        msg: "division by zero".into(),
                    });
                }
            }
            BinaryKind::Pow => {
                if va.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Domain {
                        op: "pow",
                        msg: "tensor exponentiation needs a strictly positive base".into(),
                    });
                }
            }
            _ => {}
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Pow, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xs[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .nodes[x.0]
            .shape
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    // --------------------------------------------------------------- linalg

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.0].value,
            (k as isize, 1),
            &self.nodes[b.0].value,
            (n as isize, 1),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// 2-D cross-correlation. `input` is `B×C×H×W`, `kernel` is `O×C×KH×KW`,
    /// `bias` (optional) is `O`; zero padding on every side.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, channels, height, width) = (si[0], si[1], si[2], si[3]);
        let (out_channels, kernel_h, kernel_w) = (sk[0], sk[2], sk[3]);
        if kernel_h > height + 2 * padding || kernel_w > width + 2 * padding {
            return Err(Error::invalid(format!(
                "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.len() != out_channels {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![out_channels],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let image_len = channels * height * width;
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; batch * out_channels * ncols];
        let xs = &self.nodes[input.0].value;
        let ks = &self.nodes[kernel.0].value;
        for b in 0..batch {
            kernels::im2col(&xs[b * image_len..(b + 1) * image_len], &geom, &mut cols);
            let dst = &mut out[b * out_channels * ncols..(b + 1) * out_channels * ncols];
            if let Some(bv) = bias {
                let bs = &self.nodes[bv.0].value;
                for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.fill(bs[o]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            kernels::gemm(
                out_channels,
                rows,
                ncols,
                1.0,
                ks,
                (rows as isize, 1),
                &cols,
                (ncols as isize, 1),
                beta,
                dst,
                (ncols as isize, 1),
            );
        }
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        Ok(self.push(
            vec![batch, out_channels, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over a `B×C×H×W` tensor (odd trailing
    /// rows/columns are dropped). Ties pick the first element in row-major
    /// window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::invalid(format!("max_pool2d needs B×C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![s[0], s[1], oh, ow],
            out,
            Op::MaxPool2d { input: x, argmax },
            rg,
        ))
    }

    // -------------------------------------------------------- last-axis ops

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.rows_last(x)?;
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmax(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.rows_last(x)?;
        let xs = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            softmax_into(&xs[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Maximum over the last axis, dropping it (rank-1 input gives `[1]`).
    /// Ties resolve to the lowest index.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.rows_last(x)?;
        let xs = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let i = argmax_first(row);
            out.push(row[i]);
            argmax.push(r * n + i);
        }
        let shape = self.nodes[x.0].shape.clone();
        let out_shape = if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::MaxLast { input: x, argmax }, rg))
    }

    /// Selects element `indices[r]` from row `r` of the last axis.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, n) = self.rows_last(x)?;
        if indices.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pick",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("pick index {bad} ≥ {n}")));
        }
        let flat: Vec<usize> = indices.iter().enumerate().map(|(r, &i)| r * n + i).collect();
        let xs = &self.nodes[x.0].value;
        let out: Vec<f64> = flat.iter().map(|&f| xs[f]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows], out, Op::Pick { input: x, flat }, rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = {
            let s = &self.nodes[first.0].shape;
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = &self.nodes[v.0].shape;
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.nodes[first.0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[v.0].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Applies a fixed sparse linear map to every sample of a batch.
    /// `x` must be `[B] ++ map.in_shape()`.
    pub fn linear_map(&mut self, x: Var, map: Arc<LinearMap>) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != map.in_shape().len() + 1 || s[1..] != *map.in_shape() {
            return Err(Error::ShapeMismatch {
                op: "linear_map",
                lhs: s.clone(),
                rhs: map.in_shape().to_vec(),
            });
        }
        let batch = s[0];
        let xs = &self.nodes[x.0].value;
        let (il, ol) = (map.in_len(), map.out_len());
        let mut out = vec![0.0; batch * ol];
        for b in 0..batch {
            map.apply(&xs[b * il..(b + 1) * il], &mut out[b * ol..(b + 1) * ol]);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(map.out_shape());
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Linear { input: x, map }, rg))
    }

    fn rows_last(&self, x: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[x.0].shape;
        let n = *s
            .last()
            .ok_or_else(|| Error::invalid("last-axis op on a rank-0 tensor"))?;
        if n == 0 {
            return Err(Error::invalid("last-axis op on an empty axis"));
        }
        Ok((self.nodes[x.0].value.len() / n, n))
    }

    // ------------------------------------------------------------- backward

    /// Back-propagates from a single-element `loss`, accumulating into every
    /// gradient-tracking leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Lazily allocates the parent's buffer; returns None if the parent
        // does not track gradients.
        fn slot<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
        }
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xs = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * unary_derivative(*kind, xs[j], node.value[j]);
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let same = nodes[a.0].shape == node.shape && nodes[b.0].shape == node.shape;
                let (ma, mb) = if same {
                    (None, None)
                } else {
                    (
                        Some(kernels::broadcast_index_map(&node.shape, &nodes[a.0].shape)),
                        Some(kernels::broadcast_index_map(&node.shape, &nodes[b.0].shape)),
                    )
                };
                let ia = |j: usize| ma.as_ref().map_or(j, |m| m[j]);
                let ib = |j: usize| mb.as_ref().map_or(j, |m| m[j]);
                if nodes[a.0].requires_grad {
                    let mut buf = vec![0.0; va.len()];
                    for j in 0..g.len() {
                        let (x, y) = (va[ia(j)], vb[ib(j)]);
                        buf[ia(j)] += g[j] * binary_partials(*kind, x, y, node.value[j]).0;
                    }
                    let gx = slot(nodes, grads, *a).unwrap();
                    gx.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                }
                if nodes[b.0].requires_grad {
                    let mut buf = vec![0.0; vb.len()];
                    for j in 0..g.len() {
                        let (x, y) = (va[ia(j)], vb[ib(j)]);
                        buf[ib(j)] += g[j] * binary_partials(*kind, x, y, node.value[j]).1;
                    }
                    let gy = slot(nodes, grads, *b).unwrap();
                    gy.iter_mut().zip(&buf).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { input, axis } => {
                let (outer, n, inner) = split_axis(&nodes[input.0].shape, *axis);
                if let Some(gx) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = G · Bᵀ
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        (n as isize, 1),
                        vb,
                        (1, n as isize),
                        1.0,
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB = Aᵀ · G
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        va,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
            } => {
                let oc = *out_channels;
                let batch = nodes[input.0].shape[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let image_len = geom.channels * geom.height * geom.width;
                let xs = &nodes[input.0].value;
                let ks = &nodes[kernel.0].value;
                let need_k = nodes[kernel.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                if let Some(bv) = bias {
                    if let Some(gb) = slot(nodes, grads, *bv) {
                        for b in 0..batch {
                            for (o, acc) in gb.iter_mut().enumerate() {
                                let start = (b * oc + o) * ncols;
                                *acc += g[start..start + ncols].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let mut cols = vec![0.0; rows * ncols];
                if need_k {
                    let mut gk = vec![0.0; ks.len()];
                    for b in 0..batch {
                        kernels::im2col(&xs[b * image_len..(b + 1) * image_len], geom, &mut cols);
                        let gb = &g[b * oc * ncols..(b + 1) * oc * ncols];
                        // dK += G_b · colsᵀ
                        kernels::gemm(
                            oc,
                            ncols,
                            rows,
                            1.0,
                            gb,
                            (ncols as isize, 1),
                            &cols,
                            (1, ncols as isize),
                            1.0,
                            &mut gk,
                            (rows as isize, 1),
                        );
                    }
                    let dst = slot(nodes, grads, *kernel).unwrap();
                    dst.iter_mut().zip(&gk).for_each(|(d, s)| *d += s);
                }
                if need_x {
                    let mut gx = vec![0.0; xs.len()];
                    for b in 0..batch {
                        let gb = &g[b * oc * ncols..(b + 1) * oc * ncols];
                        // dcols = Kᵀ · G_b
                        kernels::gemm(
                            rows,
                            oc,
                            ncols,
                            1.0,
                            ks,
                            (1, rows as isize),
                            gb,
                            (ncols as isize, 1),
                            0.0,
                            &mut cols,
                            (ncols as isize, 1),
                        );
                        kernels::col2im_add(
                            &cols,
                            geom,
                            &mut gx[b * image_len..(b + 1) * image_len],
                        );
                    }
                    let dst = slot(nodes, grads, *input).unwrap();
                    dst.iter_mut().zip(&gx).for_each(|(d, s)| *d += s);
                }
            }
            Op::MaxPool2d { input, argmax } | Op::MaxLast { input, argmax } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (j, &src) in argmax.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Pick { input, flat } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (j, &src) in flat.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..g.len() / n {
                        let gs = &g[r * n..(r + 1) * n];
                        let ys = &node.value[r * n..(r + 1) * n];
                        let total: f64 = gs.iter().sum();
                        for j in 0..n {
                            gx[r * n + j] += gs[j] - ys[j].exp() * total;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for r in 0..g.len() / n {
                        let gs = &g[r * n..(r + 1) * n];
                        let ys = &node.value[r * n..(r + 1) * n];
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (v, &w) in inputs.iter().zip(widths) {
                    if let Some(gx) = slot(nodes, grads, *v) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gx[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Linear { input, map } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    let (il, ol) = (map.in_len(), map.out_len());
                    for b in 0..g.len() / ol {
                        map.apply_transpose_add(
                            &g[b * ol..(b + 1) * ol],
                            &mut gx[b * il..(b + 1) * il],
                        );
                    }
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Index of the first maximal element (lowest index wins ties).
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
        BinaryKind::Pow => "pow",
        BinaryKind::Max => "max",
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::MulScalar(c) => x * c,
        UnaryKind::PowScalar(p) => x.powf(p),
        UnaryKind::MaxScalar(c) => x.max(c),
        UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

/// d(output)/d(input) given input `x` and cached output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::MulScalar(c) => c,
        UnaryKind::PowScalar(p) => {
            if x == 0.0 {
                // derivative taken as 0 at the origin unless p == 1
                if p == 1.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                p * x.powf(p - 1.0)
            }
        }
        UnaryKind::MaxScalar(c) => {
            if x >= c {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn binary_forward(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
        BinaryKind::Pow => a.powf(b),
        BinaryKind::Max => a.max(b),
    }
}

fn binary_partials(kind: BinaryKind, a: f64, b: f64, y: f64) -> (f64, f64) {
    match kind {
        BinaryKind::Add => (1.0, 1.0),
        BinaryKind::Sub => (1.0, -1.0),
        BinaryKind::Mul => (b, a),
        BinaryKind::Div => (1.0 / b, -a / (b * b)),
        BinaryKind::Pow => (b * a.powf(b - 1.0), y * a.ln()),
        BinaryKind::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
