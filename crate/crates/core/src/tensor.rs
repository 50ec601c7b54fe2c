//! Dense row-major tensors and the small set of reductions the pipeline needs.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// Dense N-dimensional array of finite `f64` values in row-major order.
///
/// Tensors are immutable once built; operations return new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting empty extents, length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Internal constructor for values produced by finite arithmetic on
    /// finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Flat offset of a multi-index. Panics on out-of-range indices.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &extent)| {
            assert!(i < extent, "index {i} out of extent {extent}");
            acc * extent + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Left-to-right sum.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

/// Elementwise operations. `Add`, `Sub` and `Mul` are binary; the rest unary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Abs,
    Log,
    Sigmoid,
    Relu,
}

impl ElementwiseOp {
    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Abs => "abs",
            Self::Log => "log",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let data: Vec<f64> = if op.is_binary() {
        let b = b.ok_or(Error::MissingOperand(op.name()))?;
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                expected: a.shape.clone(),
                actual: b.shape.clone(),
            });
        }
        let f = match op {
            ElementwiseOp::Add => |x: f64, y: f64| x + y,
            ElementwiseOp::Sub => |x: f64, y: f64| x - y,
            _ => |x: f64, y: f64| x * y,
        };
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        if b.is_some() {
            return Err(Error::UnexpectedOperand(op.name()));
        }
        match op {
            ElementwiseOp::Abs => a.data.iter().map(|v| v.abs()).collect(),
            ElementwiseOp::Relu => a.data.iter().map(|&v| relu(v)).collect(),
            ElementwiseOp::Sigmoid => a.data.iter().map(|&v| sigmoid(v)).collect(),
            ElementwiseOp::Log => {
                if let Some((index, &value)) = a.data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
                    return Err(Error::LogDomain { index, value });
                }
                a.data.iter().map(|&v| libm::log(v)).collect()
            }
            _ => unreachable!("binary ops handled above"),
        }
    };
    Tensor::new(a.shape.clone(), data)
}

/// ReLU with subgradient convention `relu'(0) = 0`.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Logistic sigmoid, evaluated on the branch that avoids overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Correctly rounded sum of `values` (Shewchuk's partials algorithm).
///
/// The result does not depend on the order of the inputs, which keeps pooled
/// reductions deterministic under permutation.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials (non-overlapping, increasing magnitude) to one value,
    // correcting for half-way cases.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Population mean, variance and skewness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
}

/// Population moments of the tensor's values. Skewness is `E[(x - mu)^3] /
/// sigma^3`, and 0 when `sigma = 0`.
pub fn moments(x: &Tensor) -> Result<Moments> {
    moments_of(x.data())
}

pub fn moments_of(values: &[f64]) -> Result<Moments> {
    if values.is_empty() {
        return Err(Error::Empty);
    }
    let n = values.len() as f64;
    let mean = exact_sum(values.iter().copied()) / n;
    let variance = exact_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    let third = exact_sum(values.iter().map(|v| {
        let d = v - mean;
        d * d * d
    })) / n;
    let skewness = if variance > 0.0 {
        third / (variance * libm::sqrt(variance))
    } else {
        0.0
    };
    Ok(Moments {
        mean,
        variance,
        skewness,
    })
}

/// The `k` largest values with their flat indices, in descending order.
/// Ties go to the lower index.
pub fn topk_values(x: &Tensor, k: usize) -> Result<Vec<(f64, usize)>> {
    topk_slice(x.data(), k)
}

pub fn topk_slice(values: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
    if k == 0 || k > values.len() {
        return Err(Error::KOutOfRange { k, len: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    let by_rank = |&a: &usize, &b: &usize| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < values.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);
    Ok(order.into_iter().map(|i| (values[i], i)).collect())
}
