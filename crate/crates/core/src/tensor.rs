//! Dense row-major tensors and the forward kernels behind every tape op.
//!
//! Kernels here are pure functions of their inputs. The tape in
//! [`crate::autodiff`] calls them for the forward pass and reuses the same
//! building blocks (batched gemm, broadcast reduction) for the adjoints.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training and inference, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = a·b + beta·c` over strided `m×k` and `k×n` views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

fn view_end(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:ident) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(view_end(m, k, a_strides) <= a.len(), "gemm: lhs view out of bounds");
                assert!(view_end(k, n, b_strides) <= b.len(), "gemm: rhs view out of bounds");
                assert!(view_end(m, n, c_strides) <= c.len(), "gemm: out view out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: all three views were bounds-checked above and `c`
                // is uniquely borrowed, so no aliasing with `a` or `b`.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Advances a row-major multi-index; returns false after the last index.
fn advance(index: &mut [usize], shape: &[usize]) -> bool {
    for axis in (0..shape.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return true;
        }
        index[axis] = 0;
    }
    false
}

/// Numpy-style broadcast of two shapes.
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

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

pub(crate) fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let n: usize = out.iter().product();
    // Fast path: one operand is a trailing block repeated over leading axes.
    if b.numel() > 0 && out == a.shape && a.shape.ends_with(trim_leading_ones(&b.shape)) {
        let m = b.numel();
        let data = a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % m])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if a.numel() > 0 && out == b.shape && b.shape.ends_with(trim_leading_ones(&a.shape)) {
        let m = a.numel();
        let data = b.data.iter().enumerate().map(|(i, &y)| f(a.data[i % m], y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(n);
    let mut index = vec![0; out.len()];
    loop {
        let oa: usize = index.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = index.iter().zip(&sb).map(|(i, s)| i * s).sum();
        data.push(f(a.data[oa], b.data[ob]));
        if !advance(&mut index, &out) {
            break;
        }
    }
    Ok(Tensor::from_parts(out, data))
}

fn trim_leading_ones(shape: &[usize]) -> &[usize] {
    let start = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[start..]
}

/// Sums `grad` (of a broadcast output shape) down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    if grad.shape.ends_with(trim_leading_ones(shape)) {
        let m = out.len();
        for (i, &g) in grad.data.iter().enumerate() {
            out[i % m] += g;
        }
        return Tensor::from_parts(shape.to_vec(), out);
    }
    let strides = broadcast_strides(shape, &grad.shape);
    let mut index = vec![0; grad.shape.len()];
    for &g in &grad.data {
        let o: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[o] += g;
        advance(&mut index, &grad.shape);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Operand description for [`batched_gemm`]: data, per-batch-axis strides
/// (0 where broadcast) and the row/column strides of each matrix.
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub batch_strides: Vec<usize>,
    pub mat: (usize, usize),
}

/// `c[batch] += a[batch]·b[batch]` over every index of `batch`. `c` may use
/// zero batch strides to accumulate across broadcast axes; accumulation
/// order is row-major over the batch and therefore deterministic.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_gemm<T: Scalar>(
    batch: &[usize],
    m: usize,
    k: usize,
    n: usize,
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    c: &mut [T],
    c_batch_strides: &[usize],
    c_mat: (usize, usize),
) {
    let mut index = vec![0; batch.len()];
    loop {
        let oa: usize = index.iter().zip(&a.batch_strides).map(|(i, s)| i * s).sum();
        let ob: usize = index.iter().zip(&b.batch_strides).map(|(i, s)| i * s).sum();
        let oc: usize = index.iter().zip(c_batch_strides).map(|(i, s)| i * s).sum();
        T::gemm(
            m,
            k,
            n,
            &a.data[oa..],
            a.mat,
            &b.data[ob..],
            b.mat,
            T::one(),
            &mut c[oc..],
            c_mat,
        );
        if !advance(&mut index, batch) {
            break;
        }
    }
}

/// Shape bookkeeping shared by the matmul forward and adjoint passes.
pub(crate) struct MatmulPlan {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batch: Vec<usize>,
    pub b_batch: Vec<usize>,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let a_batch = a[..a.len() - 2].to_vec();
        let b_batch = b[..b.len() - 2].to_vec();
        let batch = broadcast_shape(&a_batch, &b_batch).ok_or_else(|| Error::shape("matmul", a, b))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            batch,
            m,
            k,
            n,
            a_batch,
            b_batch,
            out_shape,
        })
    }

    /// Batch strides (in elements) of an operand whose matrices hold `mat` values.
    pub fn strides(&self, own_batch: &[usize], mat: usize) -> Vec<usize> {
        broadcast_strides(own_batch, &self.batch)
            .into_iter()
            .map(|s| s * mat)
            .collect()
    }

    /// True when the rhs is a single matrix shared across a dense lhs batch,
    /// so the whole product collapses into one gemm.
    pub fn rhs_shared(&self) -> bool {
        self.b_batch.iter().all(|&d| d == 1) && self.a_batch == self.batch
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = MatmulPlan::new(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.out_shape.iter().product()];
    if plan.rhs_shared() {
        let rows = a.numel() / k;
        T::gemm(rows, k, n, &a.data, (k, 1), &b.data, (n, 1), T::zero(), &mut out, (n, 1));
    } else {
        let c_strides = plan.strides(&plan.batch, m * n);
        batched_gemm(
            &plan.batch,
            m,
            k,
            n,
            MatView {
                data: &a.data,
                batch_strides: plan.strides(&plan.a_batch, m * k),
                mat: (k, 1),
            },
            MatView {
                data: &b.data,
                batch_strides: plan.strides(&plan.b_batch, k * n),
                mat: (n, 1),
            },
            &mut out,
            &c_strides,
            (n, 1),
        );
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", &x.shape, axes));
    }
    let in_strides = contiguous_strides(&x.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    if rank == 0 {
        return Ok(x.clone());
    }
    // Copy contiguous runs when the innermost axis stays in place.
    let (outer_shape, run) = if axes[rank - 1] == rank - 1 {
        (&out_shape[..rank - 1], out_shape[rank - 1])
    } else {
        (&out_shape[..], 1)
    };
    let mut data = Vec::with_capacity(x.numel());
    let mut index = vec![0; outer_shape.len()];
    loop {
        let base: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.extend_from_slice(&x.data[base..base + run]);
        if !advance(&mut index, outer_shape) {
            break;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", &x.shape, &[axis]));
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x.data[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out).ensure_finite("softmax")
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(&y.shape, axis);
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let s: T = (0..len).map(|j| dy.data[at(j)] * y.data[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y.data[at(j)] * (dy.data[at(j)] - s);
            }
        }
    }
    Tensor::from_parts(y.shape.clone(), dx)
}

/// Per-row statistics saved by the layer-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let f = *x.shape.last().ok_or_else(|| Error::shape("layer_norm", &x.shape, gamma.shape()))?;
    if gamma.shape != [f] || beta.shape != [f] {
        return Err(Error::shape("layer_norm", &x.shape, &gamma.shape));
    }
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidConfig(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.numel() / f;
    let inv_f = T::lit(1.0 / f as f64);
    let eps = T::lit(eps);
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x.data[r * f..(r + 1) * f];
        let mean = row.iter().copied().sum::<T>() * inv_f;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_f;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..f {
            let h = (row[j] - mean) * rs;
            xhat[r * f + j] = h;
            y[r * f + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    let y = Tensor::from_parts(x.shape.clone(), y).ensure_finite("layer_norm")?;
    Ok((y, NormStats { xhat, rstd }))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let f = gamma.numel();
    let rows = dy.numel() / f;
    let inv_f = T::lit(1.0 / f as f64);
    let mut dx = vec![T::zero(); dy.numel()];
    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    let mut dxhat = vec![T::zero(); f];
    for r in 0..rows {
        let g = &dy.data[r * f..(r + 1) * f];
        let xh = &stats.xhat[r * f..(r + 1) * f];
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..f {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma.data[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xh[j];
        }
        let rs = stats.rstd[r];
        for j in 0..f {
            dx[r * f + j] = rs * (dxhat[j] - inv_f * sum_d - xh[j] * inv_f * sum_dx);
        }
    }
    (
        Tensor::from_parts(dy.shape.clone(), dx),
        Tensor::from_parts(vec![f], dgamma),
        Tensor::from_parts(vec![f], dbeta),
    )
}

/// Geometry of a 1-D convolution over `[batch?, channels, time]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub ch_in: usize,
    pub ch_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub t_in: usize,
    pub t_out: usize,
}

fn split_batch(shape: &[usize], op: &'static str, other: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::shape(op, shape, other)),
    }
}

fn conv_out_shape(x_shape: &[usize], ch: usize, t: usize) -> Vec<usize> {
    if x_shape.len() == 3 {
        vec![x_shape[0], ch, t]
    } else {
        vec![ch, t]
    }
}

pub(crate) fn conv1d_geom(x: &[usize], w: &[usize], b: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if stride < 1 {
        return Err(Error::InvalidConfig("conv1d stride must be at least 1".into()));
    }
    let (batch, ch_in, t_in) = split_batch(x, "conv1d", w)?;
    let &[ch_out, w_in, kernel] = w else {
        return Err(Error::shape("conv1d", x, w));
    };
    if w_in != ch_in || b != [ch_out] {
        return Err(Error::shape("conv1d", x, w));
    }
    if t_in + 2 * padding < kernel {
        return Err(Error::InputTooShort { len: t_in + 2 * padding, kernel });
    }
    let t_out = (t_in + 2 * padding - kernel) / stride + 1;
    Ok(ConvGeom { batch, ch_in, ch_out, kernel, stride, padding, t_in, t_out })
}

/// Cross-correlation: `y[o,t] = b[o] + Σ_{c,k} w[o,c,k]·x[c, t·stride + k − padding]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv1d_geom(&x.shape, &w.shape, &b.shape, stride, padding)?;
    let mut y = vec![T::zero(); g.batch * g.ch_out * g.t_out];
    for n in 0..g.batch {
        let xb = &x.data[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let yb = &mut y[n * g.ch_out * g.t_out..(n + 1) * g.ch_out * g.t_out];
        for o in 0..g.ch_out {
            let row = &mut yb[o * g.t_out..(o + 1) * g.t_out];
            row.fill(b.data[o]);
            for c in 0..g.ch_in {
                let xc = &xb[c * g.t_in..(c + 1) * g.t_in];
                for k in 0..g.kernel {
                    let wv = w.data[(o * g.ch_in + c) * g.kernel + k];
                    for (t, out) in row.iter_mut().enumerate() {
                        let pos = t * g.stride + k;
                        if pos >= g.padding && pos - g.padding < g.t_in {
                            *out += wv * xc[pos - g.padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(conv_out_shape(&x.shape, g.ch_out, g.t_out), y).ensure_finite("conv1d")
}

pub(crate) fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ch_out = w.shape[0];
    let g = conv1d_geom(&x.shape, &w.shape, &[ch_out], stride, padding).expect("validated in forward");
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.ch_out];
    for n in 0..g.batch {
        let xb = &x.data[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let dxb = &mut dx[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let dyb = &dy.data[n * g.ch_out * g.t_out..(n + 1) * g.ch_out * g.t_out];
        for o in 0..g.ch_out {
            let grow = &dyb[o * g.t_out..(o + 1) * g.t_out];
            db[o] += grow.iter().copied().sum();
            for c in 0..g.ch_in {
                for k in 0..g.kernel {
                    let wi = (o * g.ch_in + c) * g.kernel + k;
                    let wv = w.data[wi];
                    let mut acc = T::zero();
                    for (t, &gv) in grow.iter().enumerate() {
                        let pos = t * g.stride + k;
                        if pos >= g.padding && pos - g.padding < g.t_in {
                            let xi = c * g.t_in + pos - g.padding;
                            acc += gv * xb[xi];
                            dxb[xi] += gv * wv;
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape.clone(), dx),
        Tensor::from_parts(w.shape.clone(), dw),
        Tensor::from_parts(vec![g.ch_out], db),
    )
}

pub(crate) fn conv1d_transpose_geom(x: &[usize], w: &[usize], b: &[usize], stride: usize) -> Result<ConvGeom> {
    if stride < 1 {
        return Err(Error::InvalidConfig("conv1d_transpose stride must be at least 1".into()));
    }
    let (batch, ch_in, t_in) = split_batch(x, "conv1d_transpose", w)?;
    let &[w_in, ch_out, kernel] = w else {
        return Err(Error::shape("conv1d_transpose", x, w));
    };
    if w_in != ch_in || b != [ch_out] {
        return Err(Error::shape("conv1d_transpose", x, w));
    }
    let t_out = (t_in - 1) * stride + kernel;
    Ok(ConvGeom { batch, ch_in, ch_out, kernel, stride, padding: 0, t_in, t_out })
}

/// Adjoint of [`conv1d`] with zero padding: every input frame stamps the
/// kernel at `t·stride`.
pub fn conv1d_transpose<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv1d_transpose_geom(&x.shape, &w.shape, &b.shape, stride)?;
    let mut y = vec![T::zero(); g.batch * g.ch_out * g.t_out];
    for n in 0..g.batch {
        let xb = &x.data[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let yb = &mut y[n * g.ch_out * g.t_out..(n + 1) * g.ch_out * g.t_out];
        for o in 0..g.ch_out {
            let row = &mut yb[o * g.t_out..(o + 1) * g.t_out];
            row.fill(b.data[o]);
            for c in 0..g.ch_in {
                let xc = &xb[c * g.t_in..(c + 1) * g.t_in];
                for k in 0..g.kernel {
                    let wv = w.data[(c * g.ch_out + o) * g.kernel + k];
                    for (t, &xv) in xc.iter().enumerate() {
                        row[t * g.stride + k] += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(conv_out_shape(&x.shape, g.ch_out, g.t_out), y).ensure_finite("conv1d_transpose")
}

pub(crate) fn conv1d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ch_out = w.shape[1];
    let g = conv1d_transpose_geom(&x.shape, &w.shape, &[ch_out], stride).expect("validated in forward");
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.ch_out];
    for n in 0..g.batch {
        let xb = &x.data[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let dxb = &mut dx[n * g.ch_in * g.t_in..(n + 1) * g.ch_in * g.t_in];
        let dyb = &dy.data[n * g.ch_out * g.t_out..(n + 1) * g.ch_out * g.t_out];
        for o in 0..g.ch_out {
            let grow = &dyb[o * g.t_out..(o + 1) * g.t_out];
            db[o] += grow.iter().copied().sum();
            for c in 0..g.ch_in {
                for k in 0..g.kernel {
                    let wi = (c * g.ch_out + o) * g.kernel + k;
                    let wv = w.data[wi];
                    let mut acc = T::zero();
                    for t in 0..g.t_in {
                        let gv = grow[t * g.stride + k];
                        acc += gv * xb[c * g.t_in + t];
                        dxb[c * g.t_in + t] += gv * wv;
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape.clone(), dx),
        Tensor::from_parts(w.shape.clone(), dw),
        Tensor::from_parts(vec![g.ch_out], db),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_from_one() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 4, 5], |i| (i % 7) as f64 - 3.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for n in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.data()[n * 8 + i * 4 + k] * b.data()[k * 5 + j]).sum();
                    assert_eq!(c.data()[n * 10 + i * 5 + j], want);
                }
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], 4.0);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcasting_add_and_reduce() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = t(&[3], &[10., 20., 30.]);
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[10., 21., 32., 13., 24., 35.]);
        let col = t(&[2, 1], &[1., 2.]);
        let d = broadcast_binary("mul", &a, &col, |x, y| x * y).unwrap();
        assert_eq!(d.data(), &[0., 1., 2., 6., 8., 10.]);
        assert_eq!(reduce_to_shape(&d, &[2, 1]).data(), &[3., 24.]);
        assert_eq!(reduce_to_shape(&c, &[3]).data(), &[23., 45., 67.]);
        assert!(broadcast_binary("add", &a, &t(&[2], &[1., 2.]), |x, y| x + y).is_err());
    }

    #[test]
    fn activations_by_definition() {
        let s = softmax(&Tensor::<f64>::zeros(&[3]), 0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::<f64>::from_fn(&[2, 3], |i| i as f64), 0).unwrap();
        for col in 0..3 {
            assert!((s.data()[col] + s.data()[3 + col] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let ones = Tensor::<f64>::ones(&[3]);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let (y, _) = layer_norm_forward(&ones, &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);
        let g = Tensor::<f64>::ones(&[2]);
        let (y, _) = layer_norm_forward(&t(&[2], &[-1., 1.]), &g, &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert!(layer_norm_forward(&ones, &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn conv1d_hand_example() {
        let x = t(&[1, 5], &[1., 2., 3., 4., 5.]);
        let w = t(&[1, 1, 3], &[1., 0., -1.]);
        let y = conv1d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.data(), &[-2., -2., -2.]);
        assert!(matches!(
            conv1d(&x, &w, &Tensor::zeros(&[1]), 0, 0),
            Err(Error::InvalidConfig(_))
        ));
        let g = conv1d_geom(&[1, 16000], &[256, 1, 3], &[256], 1, 0).unwrap();
        assert_eq!(g.t_out, 15998);
    }

    #[test]
    fn conv1d_transpose_stamps_kernel() {
        let y = conv1d_transpose(&t(&[1, 1], &[1.]), &t(&[1, 1, 3], &[1., 2., 3.]), &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), &[1., 2., 3.]);
        let g = conv1d_transpose_geom(&[256, 15998], &[256, 1, 3], &[1], 1).unwrap();
        assert_eq!(g.t_out, 16000);
    }
}
