use std::fmt::Write as _;
use std::rc::Rc;

use super::kernels;
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage layout tag for nearest-neighbour upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// channels, rows, cols
    Chw,
    /// rows, cols, channels
    Hwc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, pad: 0, dilation: 1 }
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grads[i]` is `Some` (pre-zeroed, input-sized) exactly when input `i`
/// needs a gradient; implementations add their contribution into it.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    );
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    BroadcastCols { x: Var, k: usize },
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, p: Conv2dParams },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, k: usize, layout: Layout },
    Bilinear { grid: Var, coords: Rc<Vec<(f64, f64)>> },
    Softlike { x: Var, tau: f64 },
    Blur { x: Var, kernel: Rc<Vec<f64>> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::MulConst(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Clamp { x, .. }
            | Op::BroadcastCols { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Softlike { x, .. }
            | Op::Blur { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Bilinear { grid, .. } => vec![*grid],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::Softlike { .. } => "softlike",
            Op::Blur { .. } => "gaussian_blur",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode gradient tape. Values are recorded in execution order, so
/// every node's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: gradients of the seed w.r.t. every leaf
/// that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; `None` when the value did not reach the seed or is
    /// not a grad-requiring leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when disconnected from the seed.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    /// Drops every recorded node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.needs_grad(),
            Op::Constant => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        debug_assert!(value.is_finite(), "non-finite output from {}", op.name());
        let value = value.requires_grad(false);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("shape preserved");
        self.push(value, op)
    }

    /// Records a tensor; it receives a gradient iff `tensor.needs_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, TensorError> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite("leaf".into()));
        }
        Ok(self.push(tensor, Op::Leaf))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var, TensorError> {
        self.leaf(tensor.requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, TensorError> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite("constant".into()));
        }
        Ok(self.push(tensor, Op::Constant))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite("scale factor".into()));
        }
        Ok(self.unary(x, Op::Scale(x, c), |v| v * c))
    }

    /// `x + offset` with a constant, same-shaped offset.
    pub fn add_const(&mut self, x: Var, offset: &[f64]) -> Result<Var, TensorError> {
        let src = self.value(x);
        if offset.len() != src.len() {
            return Err(TensorError::Shape(format!(
                "add_const: offset of length {} for shape {:?}",
                offset.len(),
                src.shape()
            )));
        }
        let data = src.data().iter().zip(offset).map(|(a, b)| a + b).collect();
        let value = Tensor::new(src.shape(), data)?;
        Ok(self.push(value, Op::AddConst(x)))
    }

    /// `x * factor` elementwise with a constant, same-shaped factor.
    pub fn mul_const(&mut self, x: Var, factor: Rc<Vec<f64>>) -> Result<Var, TensorError> {
        let src = self.value(x);
        if factor.len() != src.len() {
            return Err(TensorError::Shape(format!(
                "mul_const: factor of length {} for shape {:?}",
                factor.len(),
                src.shape()
            )));
        }
        let data = src.data().iter().zip(factor.iter()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(src.shape(), data)?;
        Ok(self.push(value, Op::MulConst(x, factor)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        Ok(self.unary(x, Op::Sigmoid(x), kernels::sigmoid))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        Ok(self.unary(x, Op::Relu(x), |v| v.max(0.0)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.data(x).iter().any(|&v| v > 700.0) {
            return Err(TensorError::NonFinite("exp overflow".into()));
        }
        Ok(self.unary(x, Op::Exp(x), f64::exp))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain("ln of non-positive value".into()));
        }
        Ok(self.unary(x, Op::Ln(x), f64::ln))
    }

    /// Clamp into `[lo, hi]`. Gradient passes for inputs inside the closed
    /// interval so values parked on a bound can still move back inward.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::Parameter(format!("clamp bounds {lo} > {hi}")));
        }
        Ok(self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[n] -> [n, k]`, repeating each entry across the new axis.
    pub fn broadcast_cols(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let src = self.value(x);
        if src.shape().len() != 1 || k == 0 {
            return Err(TensorError::Shape(format!(
                "broadcast_cols expects a vector, got {:?}",
                src.shape()
            )));
        }
        let n = src.len();
        let data = src.data().iter().flat_map(|&v| std::iter::repeat(v).take(k)).collect();
        let value = Tensor::new(&[n, k], data)?;
        Ok(self.push(value, Op::BroadcastCols { x, k }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// 2D convolution of a `[C, H, W]` input with `[O, C, kh, kw]` weights and
    /// optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
    ) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let geo = kernels::ConvGeometry::new(tx.shape(), tw.shape(), p)?;
        if let Some(b) = b {
            if self.value(b).shape() != [geo.out_c] {
                return Err(TensorError::Shape(format!(
                    "conv2d bias {:?}, expected [{}]",
                    self.value(b).shape(),
                    geo.out_c
                )));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&geo, tx.data(), tw.data(), bias);
        let value = Tensor::new(&[geo.out_c, geo.out_h, geo.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, p }))
    }

    /// Mean over non-overlapping `k x k` windows of a `[C, H, W]` tensor.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(TensorError::Shape(format!("avg_pool k={k} on {s:?}")));
        }
        let out = kernels::avg_pool(t.data(), s[0], s[1], s[2], k);
        let value = Tensor::new(&[s[0], s[1] / k, s[2] / k], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }))
    }

    pub fn upsample_nearest(&mut self, x: Var, k: usize, layout: Layout) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || k == 0 {
            return Err(TensorError::Shape(format!("upsample k={k} on {s:?}")));
        }
        let (out, shape) = match layout {
            Layout::Chw => {
                (kernels::upsample_chw(t.data(), s[0], s[1], s[2], k), [s[0], s[1] * k, s[2] * k])
            }
            Layout::Hwc => {
                (kernels::upsample_hwc(t.data(), s[0], s[1], s[2], k), [s[0] * k, s[1] * k, s[2]])
            }
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Upsample { x, k, layout }))
    }

    /// Samples a `[H, W]` grid at each `(u, v)` with wrap-around bilinear
    /// interpolation, producing a vector.
    pub fn bilinear_sample(
        &mut self,
        grid: Var,
        coords: Rc<Vec<(f64, f64)>>,
    ) -> Result<Var, TensorError> {
        let t = self.value(grid);
        if t.shape().len() != 2 {
            return Err(TensorError::Shape(format!("bilinear grid {:?}", t.shape())));
        }
        if coords.is_empty() {
            return Err(TensorError::Shape("bilinear_sample without coordinates".into()));
        }
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let out: Vec<f64> = coords
            .iter()
            .map(|&(u, v)| {
                kernels::bilinear_taps(h, w, u, v).iter().map(|&(i, wt)| wt * t.data()[i]).sum()
            })
            .collect();
        let value = Tensor::new(&[coords.len()], out)?;
        Ok(self.push(value, Op::Bilinear { grid, coords }))
    }

    /// Temperature-sharpened normalization applied along the last axis.
    pub fn softlike(&mut self, x: Var, tau: f64) -> Result<Var, TensorError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Parameter(format!("softlike temperature {tau}")));
        }
        let t = self.value(x);
        let n = *t.shape().last().expect("non-empty shape");
        let mut out = vec![0.0; t.len()];
        for (row, dst) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softlike_row(row, tau, dst);
        }
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::Softlike { x, tau }))
    }

    /// Per-channel separable Gaussian blur of a `[C, H, W]` tensor with zero
    /// padding.
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var, TensorError> {
        let kernel = Rc::new(kernels::gaussian_kernel(sigma)?);
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(TensorError::Shape(format!("gaussian_blur on {s:?}")));
        }
        let out = kernels::blur_chw(t.data(), s[0], s[1], s[2], &kernel);
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::Blur { x, kernel }))
    }

    /// Records the output of an externally defined operation.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var, TensorError> {
        if !output.is_finite() {
            return Err(TensorError::NonFinite(op.name().into()));
        }
        Ok(self.push(output, Op::Custom { inputs, op }))
    }

    /// Reverse sweep from a scalar seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients, TensorError> {
        let seed_len = self.nodes[seed.0].value.len();
        if seed_len != 1 {
            return Err(TensorError::Contract(format!(
                "backward seed must be scalar, has {seed_len} values"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![1.0]);
        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, lens })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    add_into(d, g);
                }
            }
            Op::MulConst(a, f) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(f.iter()).for_each(|((d, g), f)| *d += g * f);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(out).for_each(|((d, g), s)| *d += g * s * (1.0 - s));
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| {
                        if *x > 0.0 {
                            *d += g
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(out).for_each(|((d, g), e)| *d += g * e);
                }
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).zip(x).for_each(|((d, g), x)| *d += g / x);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.data(*x);
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), v)| {
                        if *v >= *lo && *v <= *hi {
                            *d += g
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::BroadcastCols { x, k } => {
                if let Some(d) = self.acc(grads, *x) {
                    for (d, row) in d.iter_mut().zip(g.chunks(*k)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(d) = self.acc(grads, *a) {
                    kernels::matmul_grad_a(g, vb, m, k, n, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    kernels::matmul_grad_b(g, va, m, k, n, d);
                }
            }
            Op::Conv2d { x, w, b, p } => {
                let geo = kernels::ConvGeometry::new(self.shape(*x), self.shape(*w), *p)
                    .expect("validated in forward");
                let (vx, vw) = (self.data(*x), self.data(*w));
                if let Some(d) = self.acc(grads, *x) {
                    kernels::conv2d_grad_input(&geo, g, vw, d);
                }
                if let Some(d) = self.acc(grads, *w) {
                    kernels::conv2d_grad_weight(&geo, g, vx, d);
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        let plane = geo.out_h * geo.out_w;
                        for (d, ch) in d.iter_mut().zip(g.chunks(plane)) {
                            *d += ch.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x).to_vec();
                if let Some(d) = self.acc(grads, *x) {
                    kernels::avg_pool_grad(g, s[0], s[1], s[2], *k, d);
                }
            }
            Op::Upsample { x, k, layout } => {
                let s = self.shape(*x).to_vec();
                if let Some(d) = self.acc(grads, *x) {
                    match layout {
                        Layout::Chw => kernels::upsample_chw_grad(g, s[0], s[1], s[2], *k, d),
                        Layout::Hwc => kernels::upsample_hwc_grad(g, s[0], s[1], s[2], *k, d),
                    }
                }
            }
            Op::Bilinear { grid, coords } => {
                let s = self.shape(*grid).to_vec();
                if let Some(d) = self.acc(grads, *grid) {
                    for (&(u, v), gv) in coords.iter().zip(g) {
                        for (i, wt) in kernels::bilinear_taps(s[0], s[1], u, v) {
                            d[i] += wt * gv;
                        }
                    }
                }
            }
            Op::Softlike { x, tau } => {
                let xv = self.data(*x);
                let n = *self.shape(*x).last().expect("non-empty");
                if let Some(d) = self.acc(grads, *x) {
                    for (((d, r), s), g) in
                        d.chunks_mut(n).zip(xv.chunks(n)).zip(out.chunks(n)).zip(g.chunks(n))
                    {
                        kernels::softlike_row_grad(r, s, g, *tau, d);
                    }
                }
            }
            Op::Blur { x, kernel } => {
                let s = self.shape(*x).to_vec();
                if let Some(d) = self.acc(grads, *x) {
                    // Symmetric kernel with zero padding is self-adjoint.
                    let back = kernels::blur_chw(g, s[0], s[1], s[2], kernel);
                    add_into(d, &back);
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let mut local: Vec<Option<Vec<f64>>> = inputs
                    .iter()
                    .map(|v| self.nodes[v.0].needs_grad.then(|| vec![0.0; self.value(*v).len()]))
                    .collect();
                op.backward(&values, &node.value, g, &mut local);
                for (v, contrib) in inputs.iter().zip(local) {
                    if let (Some(c), Some(d)) = (contrib, self.acc(grads, *v)) {
                        add_into(d, &c);
                    }
                }
            }
        }
    }

    /// Text rendering of the recorded graph, one node per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<String> = n.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let _ = writeln!(
                s,
                "%{i} = {}({}) shape={:?}{}",
                n.op.name(),
                ins.join(", "),
                n.value.shape(),
                if n.needs_grad { " grad" } else { "" }
            );
        }
        s
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2], 1.5)).unwrap();
        let b = tape.param(Tensor::full(&[2], -0.5)).unwrap();
        let s = tape.sigmoid(a).unwrap();
        let out = tape.sum(s).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), vec![0.0, 0.0]);
        assert!(g.wrt(a).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0)).unwrap();
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.wrt(x), vec![4.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::from_fn(&[8], |i| i as f64 * 0.3 - 1.0)).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let m = tape.mul(s, x).unwrap();
            let o = tape.mean(m).unwrap();
            tape.backward(o).unwrap().wrt(x)
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn dump_lists_nodes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        tape.sum(y).unwrap();
        let text = tape.dump();
        assert!(text.contains("%1 = sigmoid(%0)"));
        assert_eq!(text.lines().count(), 3);
        tape.clear();
        assert!(tape.is_empty());
    }
}
