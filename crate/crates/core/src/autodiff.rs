//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly, appends a node holding its value and the
//! ids of its operands, and [`Tape::backward`] walks the nodes once in
//! reverse, accumulating adjoints into every operand that requires them.

use crate::chunking::{self, ChunkLayout};
use crate::error::{Error, Result};
use crate::tensor::{self, MatView, MatmulPlan, NormStats, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Prelu(Var, Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Conv1dTranspose {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Frame(Var, ChunkLayout),
    OverlapAdd(Var, ChunkLayout),
    Select(Var, usize),
    Window { x: Var, offset: usize, len: usize },
    Sum(Var),
    /// Scalar function of one operand whose gradient was computed eagerly.
    ScalarFn { x: Var, grad: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Relu(..) => "relu",
            Op::Prelu(..) => "prelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv1dTranspose { .. } => "conv1d_transpose",
            Op::Frame(..) => "chunk",
            Op::OverlapAdd(..) => "overlap_add",
            Op::Select(..) => "select",
            Op::Window { .. } => "window",
            Op::Sum(..) => "sum",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of executed ops.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = value.ensure_finite(op.name())?;
        let rg = self.needs(inputs);
        Ok(self.push(value, op, rg))
    }

    /// Learnable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.record(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.record(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.record(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = T::lit(factor);
        let y = self.value(a).map(|v| v * c);
        self.record(y, Op::Scale(a, c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        self.record(y, Op::MatMul(a, b), &[a, b])
    }

    /// `x·w + bias` with `bias` broadcast over leading axes.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        self.record(y, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let y = tensor::permute(self.value(a), axes)?;
        self.record(y, Op::Permute(a, axes.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(y, Op::Relu(a), &[a])
    }

    /// Leaky ReLU with a learnable slope per channel of the last axis.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let y = tensor::broadcast_binary("prelu", self.value(x), self.value(slope), |v, a| {
            if v > T::zero() {
                v
            } else {
                a * v
            }
        })?;
        if y.shape() != self.shape(x) {
            return Err(Error::shape("prelu", self.shape(x), self.shape(slope)));
        }
        self.record(y, Op::Prelu(x, slope), &[x, slope])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = tensor::softmax(self.value(a), axis)?;
        self.record(y, Op::Softmax(a, axis), &[a])
    }

    /// Normalises over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, stats) = tensor::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.record(y, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = tensor::conv1d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        self.record(y, Op::Conv1d { x, w, b, stride, padding }, &[x, w, b])
    }

    pub fn conv1d_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let y = tensor::conv1d_transpose(self.value(x), self.value(w), self.value(b), stride)?;
        self.record(y, Op::Conv1dTranspose { x, w, b, stride }, &[x, w, b])
    }

    /// `[T, D]` → `[N_C, C, D]` following `layout`.
    pub fn chunk(&mut self, x: Var, layout: ChunkLayout) -> Result<Var> {
        let y = chunking::frame(self.value(x), &layout)?;
        self.record(y, Op::Frame(x, layout), &[x])
    }

    /// `[N_C, C, D]` → `[T, D]` with coverage normalisation.
    pub fn overlap_add(&mut self, x: Var, layout: ChunkLayout) -> Result<Var> {
        let y = chunking::overlap_add(self.value(x), &layout)?;
        self.record(y, Op::OverlapAdd(x, layout), &[x])
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::shape("select", shape, &[index]));
        }
        let inner: usize = shape[1..].iter().product();
        let y = Tensor::from_parts(shape[1..].to_vec(), v.data()[index * inner..(index + 1) * inner].to_vec());
        self.record(y, Op::Select(x, index), &[x])
    }

    /// Takes `len` frames of the last axis starting at `offset`; frames
    /// past the end of the input read as zero.
    pub fn window(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        let Some(&t) = shape.last() else {
            return Err(Error::shape("window", shape, &[offset, len]));
        };
        if len == 0 {
            return Err(Error::shape("window", shape, &[offset, len]));
        }
        let rows = v.numel() / t;
        let mut data = vec![T::zero(); rows * len];
        for r in 0..rows {
            for j in 0..len {
                if offset + j < t {
                    data[r * len + j] = v.data()[r * t + offset + j];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let y = Tensor::from_parts(out_shape, data);
        self.record(y, Op::Window { x, offset, len }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.record(y, Op::Sum(x), &[x])
    }

    /// Records a scalar `value = f(x)` whose gradient `df/dx` the caller
    /// computed alongside the value.
    pub fn scalar_fn(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(Error::shape("scalar_fn", self.shape(x), grad.shape()));
        }
        self.record(Tensor::scalar(value), Op::ScalarFn { x, grad }, &[x])
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidConfig("backward on an empty tape".into()));
        }
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::NonScalarLoss(seed.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(seed.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (var, g) in self.adjoints(node, &dy) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(format!("{} (node {i})", node.op.name())));
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaves keep their adjoints.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoints(&self, node: &Node<T>, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, tensor::reduce_to_shape(dy, val(*a).shape())),
                (*b, tensor::reduce_to_shape(dy, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, tensor::reduce_to_shape(dy, val(*a).shape())),
                (*b, tensor::reduce_to_shape(&dy.map(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    let g = tensor::broadcast_binary("mul", dy, val(*b), |x, y| x * y).expect("forward shapes");
                    out.push((*a, tensor::reduce_to_shape(&g, val(*a).shape())));
                }
                if self.requires_grad(*b) {
                    let g = tensor::broadcast_binary("mul", dy, val(*a), |x, y| x * y).expect("forward shapes");
                    out.push((*b, tensor::reduce_to_shape(&g, val(*b).shape())));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, dy.map(|v| v * *c))],
            Op::MatMul(a, b) => self.matmul_adjoints(*a, *b, dy),
            Op::Reshape(a) => vec![(*a, dy.reshape(val(*a).shape()).expect("same numel"))],
            Op::Permute(a, axes) => vec![(
                *a,
                tensor::permute(dy, &tensor::inverse_permutation(axes)).expect("valid permutation"),
            )],
            Op::Relu(a) => {
                let x = val(*a);
                let g = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), g))]
            }
            Op::Prelu(x, slope) => {
                let xv = val(*x);
                let sv = val(*slope);
                let dx = tensor::broadcast_binary("prelu", xv, sv, |v, a| if v > T::zero() { T::one() } else { a })
                    .expect("forward shapes");
                let dx = Tensor::from_parts(
                    xv.shape().to_vec(),
                    dx.data().iter().zip(dy.data()).map(|(&s, &d)| s * d).collect(),
                );
                let ds = Tensor::from_parts(
                    xv.shape().to_vec(),
                    xv.data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &d)| if v > T::zero() { T::zero() } else { v * d })
                        .collect(),
                );
                vec![(*x, dx), (*slope, tensor::reduce_to_shape(&ds, sv.shape()))]
            }
            Op::Softmax(a, axis) => vec![(*a, tensor::softmax_backward(&node.value, dy, *axis))],
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (dx, dg, db) = tensor::layer_norm_backward(stats, val(*gamma), dy);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Conv1d { x, w, b, stride, padding } => {
                let (dx, dw, db) = tensor::conv1d_backward(val(*x), val(*w), dy, *stride, *padding);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Conv1dTranspose { x, w, b, stride } => {
                let (dx, dw, db) = tensor::conv1d_transpose_backward(val(*x), val(*w), dy, *stride);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Frame(x, layout) => vec![(*x, chunking::frame_adjoint(dy, layout))],
            Op::OverlapAdd(x, layout) => vec![(*x, chunking::overlap_add_adjoint(dy, layout))],
            Op::Select(x, index) => {
                let xv = val(*x);
                let inner = dy.numel();
                let mut g = Tensor::zeros(xv.shape());
                g.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(dy.data());
                vec![(*x, g)]
            }
            Op::Window { x, offset, len } => {
                let xv = val(*x);
                let t = *xv.shape().last().expect("rank checked");
                let rows = xv.numel() / t;
                let mut g = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    for j in 0..*len {
                        if offset + j < t {
                            g.data_mut()[r * t + offset + j] = dy.data()[r * len + j];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Sum(x) => {
                let d = dy.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), d))]
            }
            Op::ScalarFn { x, grad } => {
                let d = dy.data()[0];
                vec![(*x, grad.map(|g| g * d))]
            }
        }
    }

    fn matmul_adjoints(&self, a: Var, b: Var, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let av = self.value(a);
        let bv = self.value(b);
        let plan = MatmulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = Vec::with_capacity(2);
        if plan.rhs_shared() {
            let rows = av.numel() / k;
            if self.requires_grad(a) {
                let mut da = vec![T::zero(); av.numel()];
                T::gemm(rows, n, k, dy.data(), (n, 1), bv.data(), (1, n), T::zero(), &mut da, (k, 1));
                out.push((a, Tensor::from_parts(av.shape().to_vec(), da)));
            }
            if self.requires_grad(b) {
                let mut db = vec![T::zero(); bv.numel()];
                T::gemm(k, rows, n, av.data(), (1, k), dy.data(), (n, 1), T::zero(), &mut db, (n, 1));
                out.push((b, Tensor::from_parts(bv.shape().to_vec(), db)));
            }
            return out;
        }
        let dy_strides = plan.strides(&plan.batch, m * n);
        let a_strides = plan.strides(&plan.a_batch, m * k);
        let b_strides = plan.strides(&plan.b_batch, k * n);
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); av.numel()];
            tensor::batched_gemm(
                &plan.batch,
                m,
                n,
                k,
                MatView { data: dy.data(), batch_strides: dy_strides.clone(), mat: (n, 1) },
                MatView { data: bv.data(), batch_strides: b_strides.clone(), mat: (1, n) },
                &mut da,
                &a_strides,
                (k, 1),
            );
            out.push((a, Tensor::from_parts(av.shape().to_vec(), da)));
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); bv.numel()];
            tensor::batched_gemm(
                &plan.batch,
                k,
                m,
                n,
                MatView { data: av.data(), batch_strides: a_strides, mat: (1, k) },
                MatView { data: dy.data(), batch_strides: dy_strides, mat: (n, 1) },
                &mut db,
                &b_strides,
                (n, 1),
            );
            out.push((b, Tensor::from_parts(bv.shape().to_vec(), db)));
        }
        out
    }
}
