//! Dense tensors, a reverse-mode tape, the operators the gaze architectures
//! need, and the Adam update.
//!
//! Tensors are row-major. Spatial tensors use the `N x C x H x W` layout and
//! token tensors use `N x L x C`.

mod adam;
mod conv;
mod dense;
mod elementwise;
pub mod gradcheck;
mod norm;
mod pool;
mod tape;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use norm::{BatchNormMode, BN_EPSILON, BN_MOMENTUM};
pub use tape::{Tape, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got dims {dims:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of scalars with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) || numel(dims) != data.len() {
            return Err(TensorError::DataLength {
                dims: dims.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        Self::from_vec(dims, vec![value; numel(dims)]).expect("dims must be non-empty and positive")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    /// Samples `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(dims))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self::from_vec(dims, data).expect("dims must be non-empty and positive")
    }

    /// Samples entries uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(dims))
            .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
            .collect();
        Self::from_vec(dims, data).expect("dims must be non-empty and positive")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    /// Element access by multi-index; panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of range on axis {i} of extent {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    /// Converts element type, e.g. to run an `f32` network in `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on different dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn expect_rank(op: &'static str, dims: &[usize], rank: usize) -> Result<()> {
    if dims.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn expect_eq(op: &'static str, axis: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: axis.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// `floor((size + 2*padding - kernel) / stride) + 1`, or an error when the
/// window does not fit.
pub fn window_output_size(
    op: &'static str,
    axis: &str,
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::Invalid {
            op,
            reason: format!("kernel ({kernel}) and stride ({stride}) must be positive"),
        });
    }
    let padded = size + 2 * padding;
    if kernel > padded {
        return Err(TensorError::Invalid {
            op,
            reason: format!("kernel {kernel} exceeds padded {axis} extent {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}
