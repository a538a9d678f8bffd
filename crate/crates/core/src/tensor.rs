//! Dense row-major tensors and the primitive operations the rest of the
//! crate composes.
//!
//! Every operation is pure: inputs are borrowed immutably and a fresh tensor
//! is returned. Reductions accumulate in a fixed left-to-right order so that
//! results are bit-reproducible. Any operation that could overflow checks its
//! output and reports non-finite values as [`Error::Numeric`].

use std::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f64` (the default) and `f32`.
pub trait Scalar: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {} has a zero extent",
                shape_str(&shape)
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {} needs {} elements, got {}",
                shape_str(&shape),
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {}",
                shape_str(&self.shape)
            ))),
        }
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Passes the tensor through if every element is finite.
    pub fn ensure_finite(self, op: &str) -> Result<Self> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(self),
            Some(i) => Err(Error::Numeric(format!(
                "{op} produced non-finite value {} at flat index {i} (shape {})",
                self.data[i],
                shape_str(&self.shape)
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {} and {} differ",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .ensure_finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map(|v| v * c).ensure_finite("scale")
    }

    /// Adds a bias vector along the last axis of `self`.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let d = *self.shape.last().unwrap();
        if bias.rank() != 1 || bias.shape[0] != d {
            return Err(Error::Dimension(format!(
                "add_bias: bias {} does not match last axis of {}",
                shape_str(&bias.shape),
                shape_str(&self.shape)
            )));
        }
        let data = self
            .data
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&bias.data).map(|(&x, &b)| x + b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .ensure_finite("add_bias")
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || {
            Error::Dimension(format!(
                "matmul: cannot multiply {} by {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            ))
        };
        let (m, k) = self.dims2().map_err(|_| mismatch())?;
        let (k2, p) = other.dims2().map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        // i-k-j order: each output element accumulates over k ascending.
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor {
            shape: vec![m, p],
            data: out,
        }
        .ensure_finite("matmul")
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {} as {}",
                shape_str(&self.shape),
                shape_str(shape)
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn check_axis(&self, axis: usize, op: &str) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::Dimension(format!(
                "{op}: axis {axis} out of range for shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(())
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(self.data[idx(k)]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (self.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / sum;
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .ensure_finite("softmax")
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * x_hat + beta`. Uses the biased variance.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        Ok(self.layer_norm_parts(gamma, beta, eps)?.0)
    }

    /// Layer norm returning `(output, x_hat, inv_std per row)`.
    pub(crate) fn layer_norm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: T,
    ) -> Result<(Self, Self, Vec<T>)> {
        let d = *self.shape.last().unwrap();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {} / beta {} do not match last axis of {}",
                shape_str(&gamma.shape),
                shape_str(&beta.shape),
                shape_str(&self.shape)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm: eps must be positive".into()));
        }
        let dn = T::from_f64(d as f64);
        let mut out = Vec::with_capacity(self.numel());
        let mut x_hat = Vec::with_capacity(self.numel());
        let mut inv_stds = Vec::with_capacity(self.numel() / d);
        for row in self.data.chunks_exact(d) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let inv_std = T::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv_std;
                x_hat.push(xh);
                out.push(gamma.data[j] * xh + beta.data[j]);
            }
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data: out,
        }
        .ensure_finite("layer_norm")?;
        let x_hat = Tensor {
            shape: self.shape.clone(),
            data: x_hat,
        };
        Ok((out, x_hat, inv_stds))
    }

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&self) -> Result<Self> {
        self.map(gelu_scalar).ensure_finite("gelu")
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no inputs".into()))?;
        first.check_axis(axis, "concat")?;
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_other = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: shapes {} and {} are incompatible",
                    shape_str(&first.shape),
                    shape_str(&p.shape)
                )));
            }
        }
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Contiguous sub-range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis(axis, "slice")?;
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::Dimension(format!(
                "slice {start}..{} out of range for axis {axis} of {}",
                start + len,
                shape_str(&self.shape)
            )));
        }
        let (outer, full, inner) = axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Repeats a matrix `times` times along the column axis.
    pub fn tile_cols(&self, times: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if times == 0 {
            return Err(Error::Dimension("tile_cols: zero repetitions".into()));
        }
        let mut data = Vec::with_capacity(r * c * times);
        for row in self.data.chunks_exact(c) {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        Ok(Tensor {
            shape: vec![r, c * times],
            data,
        })
    }

    /// Index of the maximum along `axis` for every other position; ties
    /// resolve to the lowest index.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        self.check_axis(axis, "argmax")?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for k in 1..len {
                    if self.data[(o * len + k) * inner + i] > self.data[(o * len + best) * inner + i] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &v| a + v)
    }

    /// Mean along `axis`; the axis is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "mean")?;
        let (outer, len, inner) = axis_split(&self.shape, axis);
        let n = T::from_f64(len as f64);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..len {
                    acc = acc + self.data[(o * len + k) * inner + i];
                }
                data.push(acc / n);
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data })
    }

    /// Entrywise L1 norm: sum of absolute values.
    pub fn l1_entrywise(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &v| a + v.abs())
    }

    /// Absolute column sums of a matrix.
    pub fn abs_col_sums(&self) -> Result<Vec<T>> {
        let (_, c) = self.dims2()?;
        let mut sums = vec![T::zero(); c];
        for row in self.data.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s = *s + v.abs();
            }
        }
        Ok(sums)
    }

    /// Induced L1 operator norm: maximum absolute column sum.
    pub fn l1_induced(&self) -> Result<T> {
        Ok(self
            .abs_col_sums()?
            .into_iter()
            .fold(T::zero(), |a, v| a.max(v)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "max_abs_diff: shapes {} and {} differ",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |a, (&x, &y)| a.max((x - y).abs())))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
