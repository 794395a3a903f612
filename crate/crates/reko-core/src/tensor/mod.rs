//! Arena-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] records every operation as it executes (define-by-run) and
//! stores nodes in a flat arena addressed by [`TensorId`]. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse and fills
//! per-node gradient buffers; a graph can only be differentiated once.

mod conv;
pub mod checkpoint;
pub mod gradcheck;

use crate::{Error, Result};

/// Slope used by every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Guard used by [`Graph::l2_normalize`] against division by tiny norms.
pub const NORM_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`] arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    Relu(TensorId),
    LeakyRelu(TensorId),
    Tanh(TensorId),
    Abs(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Sum(TensorId, Option<usize>),
    Mean(TensorId, Option<usize>),
    LogSumExp(TensorId, usize),
    L2Normalize(TensorId, usize),
    GatherColumns(TensorId, Vec<usize>),
    ConcatColumns(Vec<TensorId>),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording arena. All tensor values live here; ops return [`TensorId`]s.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target w.r.t. `id`, if it was
    /// tracked and reached by the backward sweep.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Result<TensorId> {
        debug_assert_eq!(data.len(), numel(&shape));
        let op_name = op_name(&op);
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Inserts a tracked or untracked leaf tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        if data.len() != numel(shape) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{} values do not fill shape {shape:?}", data.len()),
            });
        }
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Inserts an untracked constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// Untracked scalar constant.
    pub fn scalar(&mut self, value: f64) -> Result<TensorId> {
        self.constant(vec![value], &[1])
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, shape, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::MulScalar(a, s))
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, op)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Leaky ReLU with the crate-wide slope [`LEAKY_SLOPE`].
    pub fn leaky_relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, |x| if x > 0.0 { x } else { LEAKY_SLOPE * x }, Op::LeakyRelu(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Matrix product of two rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(data, vec![m, n], rg, Op::MatMul(a, b))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape { op: "transpose", detail: format!("rank {} input", sa.len()) });
        }
        let (m, n) = (sa[0], sa[1]);
        let x = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        self.push(data, vec![n, m], rg, Op::Transpose(a))
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || numel(shape) != numel(self.shape(a)) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(a)),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape.to_vec(), rg, Op::Reshape(a))
    }

    fn check_axis(&self, op: &'static str, a: TensorId, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    /// Sum over one axis, or over all elements when `axis` is `None`.
    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let rg = self.requires_grad(a);
        match axis {
            None => {
                let total = self.data(a).iter().sum();
                self.push(vec![total], vec![1], rg, Op::Sum(a, None))
            }
            Some(ax) => {
                self.check_axis("sum", a, ax)?;
                let shape = self.shape(a).to_vec();
                let (outer, mid, inner) = axis_split(&shape, ax);
                let x = self.data(a);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += x[base + i];
                        }
                    }
                }
                self.push(data, reduced_shape(&shape, ax), rg, Op::Sum(a, Some(ax)))
            }
        }
    }

    /// Mean over one axis, or over all elements when `axis` is `None`.
    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let rg = self.requires_grad(a);
        match axis {
            None => {
                let n = self.data(a).len() as f64;
                let total: f64 = self.data(a).iter().sum();
                self.push(vec![total / n], vec![1], rg, Op::Mean(a, None))
            }
            Some(ax) => {
                self.check_axis("mean", a, ax)?;
                let shape = self.shape(a).to_vec();
                let (outer, mid, inner) = axis_split(&shape, ax);
                let x = self.data(a);
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += x[base + i];
                        }
                    }
                }
                let inv = 1.0 / mid as f64;
                data.iter_mut().for_each(|v| *v *= inv);
                self.push(data, reduced_shape(&shape, ax), rg, Op::Mean(a, Some(ax)))
            }
        }
    }

    /// Numerically stable `log(sum(exp(x)))` along `axis` (max-shifted, so
    /// large magnitudes never overflow).
    pub fn logsumexp(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("logsumexp", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, mid, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for m in 0..mid {
                    mx = mx.max(x[(o * mid + m) * inner + i]);
                }
                let mut s = 0.0;
                for m in 0..mid {
                    s += (x[(o * mid + m) * inner + i] - mx).exp();
                }
                data[o * inner + i] = mx + s.ln();
            }
        }
        let rg = self.requires_grad(a);
        self.push(data, reduced_shape(&shape, axis), rg, Op::LogSumExp(a, axis))
    }

    /// Normalizes every fiber along `axis` to unit L2 norm, guarding tiny
    /// norms with [`NORM_EPS`].
    pub fn l2_normalize(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("l2_normalize", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, mid, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut sq = 0.0;
                for m in 0..mid {
                    let v = x[(o * mid + m) * inner + i];
                    sq += v * v;
                }
                let n = sq.sqrt().max(NORM_EPS);
                for m in 0..mid {
                    let idx = (o * mid + m) * inner + i;
                    data[idx] = x[idx] / n;
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::L2Normalize(a, axis))
    }

    /// Selects columns of a rank-2 tensor; repeats are allowed.
    pub fn gather_columns(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape { op: "gather_columns", detail: format!("rank {} input", sa.len()) });
        }
        if indices.is_empty() {
            return Err(Error::InvalidArg("gather_columns: empty index list".into()));
        }
        let (rows, cols) = (sa[0], sa[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::IndexOutOfRange { op: "gather_columns", index: bad, bound: cols });
        }
        let x = self.data(a);
        let k = indices.len();
        let mut data = vec![0.0; rows * k];
        for r in 0..rows {
            for (j, &c) in indices.iter().enumerate() {
                data[r * k + j] = x[r * cols + c];
            }
        }
        let rg = self.requires_grad(a);
        self.push(data, vec![rows, k], rg, Op::GatherColumns(a, indices.to_vec()))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_columns(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_columns: no inputs".into()));
        }
        let rows = match self.shape(parts[0]) {
            [r, _] => *r,
            other => {
                return Err(Error::Shape { op: "concat_columns", detail: format!("rank {} input", other.len()) })
            }
        };
        let mut cols = 0;
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => cols += c,
                other => {
                    return Err(Error::Shape {
                        op: "concat_columns",
                        detail: format!("expected {rows} rows, got {other:?}"),
                    })
                }
            }
        }
        let mut data = vec![0.0; rows * cols];
        let mut col0 = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let x = self.data(p);
            for r in 0..rows {
                data[r * cols + col0..r * cols + col0 + c].copy_from_slice(&x[r * c..(r + 1) * c]);
            }
            col0 += c;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        self.push(data, vec![rows, cols], rg, Op::ConcatColumns(parts.to_vec()))
    }

    /// 2-D convolution over `[c_in, h, w]` with weight `[c_out, c_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::InvalidArg("conv2d: stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input {si:?} weight {sw:?}"),
            });
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = conv::conv_out_dim(h, kh, stride, pad);
        let ow = conv::conv_out_dim(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            });
        };
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} for {co} output channels", self.shape(b)),
                });
            }
        }
        let data = conv::conv2d_fwd(
            self.data(input),
            (ci, h, w),
            self.data(weight),
            (co, kh, kw),
            bias.map(|b| self.data(b)),
            stride,
            pad,
            (oh, ow),
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(data, vec![co, oh, ow], rg, Op::Conv2d { input, weight, bias, stride, pad })
    }

    /// Transposed 2-D convolution over `[c_in, h, w]` with weight
    /// `[c_in, c_out, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::InvalidArg("conv_transpose2d: stride must be positive".into()));
        }
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[0] {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                detail: format!("input {si:?} weight {sw:?}"),
            });
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let oh = conv::convt_out_dim(h, kh, stride, pad);
        let ow = conv::convt_out_dim(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh.filter(|&v| v > 0), ow.filter(|&v| v > 0)) else {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                detail: format!("padding {pad} swallows the {h}x{w} output"),
            });
        };
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::Shape {
                    op: "conv_transpose2d",
                    detail: format!("bias {:?} for {co} output channels", self.shape(b)),
                });
            }
        }
        let data = conv::convt2d_fwd(
            self.data(input),
            (ci, h, w),
            self.data(weight),
            (co, kh, kw),
            bias.map(|b| self.data(b)),
            stride,
            pad,
            (oh, ow),
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        self.push(data, vec![co, oh, ow], rg, Op::ConvTranspose2d { input, weight, bias, stride, pad })
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            debug_assert_eq!(g.len(), contribution.len());
            for (gv, cv) in g.iter_mut().zip(contribution) {
                *gv += cv;
            }
        }
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].grad.is_some()
    }

    /// Reverse sweep from a scalar `loss`. Fills gradients for every tracked
    /// node on the path; consumes the graph's one backward pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let n = self.nodes[loss.0].data.len();
        if n != 1 {
            return Err(Error::NonScalarLoss { numel: n });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::InvalidArg(
                "backward: loss does not depend on any tracked tensor".into(),
            ));
        }
        self.backward_done = true;
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = TensorId(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.accumulate(a, &g);
                    if self.wants_grad(b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    if self.wants_grad(a) {
                        let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(gv, bv)| gv * bv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.wants_grad(b) {
                        let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(gv, av)| gv * av).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::AddScalar(a) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.accumulate(a, &g);
                }
                Op::MulScalar(a, s) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g.iter().map(|v| v * s).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::MatMul(a, b) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let nn = self.shape(b)[1];
                    if self.wants_grad(a) {
                        // dA = dC * B^T, accumulated row-dot-row.
                        let bd = self.data(b);
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..nn {
                                    acc += g[r * nn + j] * bd[l * nn + j];
                                }
                                da[r * k + l] = acc;
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.wants_grad(b) {
                        // dB = A^T * dC, accumulated as rank-1 row updates.
                        let ad = self.data(a);
                        let mut db = vec![0.0; k * nn];
                        for r in 0..m {
                            for l in 0..k {
                                let av = ad[r * k + l];
                                let row = &mut db[l * nn..(l + 1) * nn];
                                for (dv, gv) in row.iter_mut().zip(&g[r * nn..(r + 1) * nn]) {
                                    *dv += av * gv;
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let (n2, m2) = (self.shape(out)[0], self.shape(out)[1]);
                        let mut da = vec![0.0; m2 * n2];
                        for r in 0..n2 {
                            for c in 0..m2 {
                                da[c * n2 + r] = g[r * m2 + c];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::Reshape(a) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    self.accumulate(a, &g);
                }
                Op::Relu(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.data(a))
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::LeakyRelu(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.data(a))
                            .map(|(gv, &x)| if x > 0.0 { *gv } else { LEAKY_SLOPE * gv })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Tanh(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.data(out))
                            .map(|(gv, &y)| gv * (1.0 - y * y))
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Abs(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g
                            .iter()
                            .zip(self.data(a))
                            .map(|(gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Exp(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g.iter().zip(self.data(out)).map(|(gv, &y)| gv * y).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Log(a) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.as_ref().unwrap();
                        let da: Vec<f64> = g.iter().zip(self.data(a)).map(|(gv, &x)| gv / x).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Sum(a, axis) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.clone().unwrap();
                        let da = spread_reduction_grad(&g, self.shape(a), axis, 1.0);
                        self.accumulate(a, &da);
                    }
                }
                Op::Mean(a, axis) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.clone().unwrap();
                        let scale = match axis {
                            None => 1.0 / self.data(a).len() as f64,
                            Some(ax) => 1.0 / self.shape(a)[ax] as f64,
                        };
                        let da = spread_reduction_grad(&g, self.shape(a), axis, scale);
                        self.accumulate(a, &da);
                    }
                }
                Op::LogSumExp(a, axis) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.clone().unwrap();
                        let shape = self.shape(a).to_vec();
                        let (outer, mid, inner) = axis_split(&shape, axis);
                        let x = self.data(a);
                        let y = self.data(out);
                        let mut da = vec![0.0; x.len()];
                        for o in 0..outer {
                            for ii in 0..inner {
                                let lse = y[o * inner + ii];
                                let gv = g[o * inner + ii];
                                for m in 0..mid {
                                    let idx = (o * mid + m) * inner + ii;
                                    da[idx] = gv * (x[idx] - lse).exp();
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::L2Normalize(a, axis) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.clone().unwrap();
                        let shape = self.shape(a).to_vec();
                        let (outer, mid, inner) = axis_split(&shape, axis);
                        let x = self.data(a);
                        let y = self.data(out);
                        let mut da = vec![0.0; x.len()];
                        for o in 0..outer {
                            for ii in 0..inner {
                                let mut sq = 0.0;
                                for m in 0..mid {
                                    let v = x[(o * mid + m) * inner + ii];
                                    sq += v * v;
                                }
                                let n = sq.sqrt().max(NORM_EPS);
                                let mut dot = 0.0;
                                for m in 0..mid {
                                    let idx = (o * mid + m) * inner + ii;
                                    dot += g[idx] * y[idx];
                                }
                                for m in 0..mid {
                                    let idx = (o * mid + m) * inner + ii;
                                    da[idx] = (g[idx] - y[idx] * dot) / n;
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::GatherColumns(a, indices) => {
                    if self.wants_grad(a) {
                        let g = self.nodes[i].grad.clone().unwrap();
                        let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                        let k = indices.len();
                        let mut da = vec![0.0; rows * cols];
                        for r in 0..rows {
                            for (j, &c) in indices.iter().enumerate() {
                                da[r * cols + c] += g[r * k + j];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::ConcatColumns(parts) => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let rows = self.shape(out)[0];
                    let cols = self.shape(out)[1];
                    let mut col0 = 0;
                    for &p in &parts {
                        let c = self.shape(p)[1];
                        if self.wants_grad(p) {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c]
                                    .copy_from_slice(&g[r * cols + col0..r * cols + col0 + c]);
                            }
                            self.accumulate(p, &dp);
                        }
                        col0 += c;
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let si = self.shape(input).to_vec();
                    let sw = self.shape(weight).to_vec();
                    let so = self.shape(out).to_vec();
                    let in_dims = (si[0], si[1], si[2]);
                    let k_dims = (sw[0], sw[2], sw[3]);
                    let out_sp = (so[1], so[2]);
                    if self.wants_grad(input) {
                        let dx = conv::conv2d_dx(&g, self.data(weight), in_dims, k_dims, stride, pad, out_sp);
                        self.accumulate(input, &dx);
                    }
                    if self.wants_grad(weight) {
                        let dw = conv::conv2d_dw(self.data(input), &g, in_dims, k_dims, stride, pad, out_sp);
                        self.accumulate(weight, &dw);
                    }
                    if let Some(b) = bias {
                        if self.wants_grad(b) {
                            let db = conv::reduce_channel_sums(&g, so[0], so[1] * so[2]);
                            self.accumulate(b, &db);
                        }
                    }
                }
                Op::ConvTranspose2d { input, weight, bias, stride, pad } => {
                    let g = self.nodes[i].grad.clone().unwrap();
                    let si = self.shape(input).to_vec();
                    let sw = self.shape(weight).to_vec();
                    let so = self.shape(out).to_vec();
                    let in_dims = (si[0], si[1], si[2]);
                    let k_dims = (sw[1], sw[2], sw[3]);
                    let out_sp = (so[1], so[2]);
                    if self.wants_grad(input) {
                        let dx = conv::convt2d_dx(&g, self.data(weight), in_dims, k_dims, stride, pad, out_sp);
                        self.accumulate(input, &dx);
                    }
                    if self.wants_grad(weight) {
                        let dw = conv::convt2d_dw(self.data(input), &g, in_dims, k_dims, stride, pad, out_sp);
                        self.accumulate(weight, &dw);
                    }
                    if let Some(b) = bias {
                        if self.wants_grad(b) {
                            let db = conv::reduce_channel_sums(&g, so[0], so[1] * so[2]);
                            self.accumulate(b, &db);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Tanh(..) => "tanh",
        Op::Abs(..) => "abs",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::LogSumExp(..) => "logsumexp",
        Op::L2Normalize(..) => "l2_normalize",
        Op::GatherColumns(..) => "gather_columns",
        Op::ConcatColumns(..) => "concat_columns",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
    }
}

/// Broadcasts a reduced gradient back over the reduced axis (axis `None`
/// means the whole tensor), scaling by `scale`.
fn spread_reduction_grad(g: &[f64], in_shape: &[usize], axis: Option<usize>, scale: f64) -> Vec<f64> {
    match axis {
        None => vec![g[0] * scale; numel(in_shape)],
        Some(ax) => {
            let (outer, mid, inner) = axis_split(in_shape, ax);
            let mut da = vec![0.0; outer * mid * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        da[base + i] = g[o * inner + i] * scale;
                    }
                }
            }
            da
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ascalar(g: &Graph, id: TensorId) -> f64 {
        g.value(id)
    }

    #[test]
    fn abs_handles_signs_and_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 0.0], &[3], false).unwrap();
        let y = g.abs(x).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
        let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 8], &[2, 4], false).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    }

    #[test]
    fn conv_ones_kernel_example() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0; 9], &[1, 3, 3], false).unwrap();
        let w = g.leaf(vec![1.0; 9], &[1, 1, 3, 3], false).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        assert_eq!(g.data(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn logsumexp_is_stable_for_huge_inputs() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1000.0, 1000.0], &[2], false).unwrap();
        let y = g.logsumexp(x, 0).unwrap();
        let expect = 1000.0 + 2.0_f64.ln();
        assert!((ascalar(&g, y) - expect).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_rows_of_matrix() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0, (2.0_f64).ln(), 1.0, 1.0], &[2, 2], false).unwrap();
        let y = g.logsumexp(x, 1).unwrap();
        assert_eq!(g.shape(y), &[2]);
        assert!((g.data(y)[0] - 3.0_f64.ln()).abs() < 1e-12);
        assert!((g.data(y)[1] - (1.0 + 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sum_backward_broadcasts_ones() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0], &[3], true).unwrap();
        let s = g.sum(x, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0], &[1], true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { numel: 2 })));
    }

    #[test]
    fn log_of_nonpositive_is_nonfinite_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0], &[1], false).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn l2_normalize_handles_zero_vector() {
        let mut g = Graph::new();
        // Columns along axis 0 are (0, 0) and (3, 4).
        let x = g.leaf(vec![0.0, 3.0, 0.0, 4.0], &[2, 2], false).unwrap();
        let y = g.l2_normalize(x, 0).unwrap();
        // The all-zero column stays zero instead of dividing by zero.
        assert_eq!(g.data(y)[0], 0.0);
        assert_eq!(g.data(y)[2], 0.0);
        assert!((g.data(y)[1] - 0.6).abs() < 1e-12);
        assert!((g.data(y)[3] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gather_then_scatter_grad_accumulates_repeats() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let picked = g.gather_columns(x, &[1, 1]).unwrap();
        let s = g.sum(picked, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_columns_roundtrip_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 2.0], &[2, 1], false).unwrap();
        let b = g.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2], false).unwrap();
        let c = g.concat_columns(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0], &[1], true).unwrap();
        let w = g.constant(vec![3.0], &[1]).unwrap();
        let y = g.mul(x, w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn reshape_rejects_element_count_change() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        assert!(g.reshape(x, &[4, 2]).is_err());
        assert!(g.reshape(x, &[3, 2]).is_ok());
    }

    #[test]
    fn invalid_axis_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        assert!(matches!(
            g.sum(x, Some(2)),
            Err(Error::InvalidAxis { op: "sum", axis: 2, rank: 2 })
        ));
    }
}
