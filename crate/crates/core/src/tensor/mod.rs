//! Dense N-dimensional tensors with a tape-based reverse-mode autograd.
//!
//! Layout is row-major and channel-first: a video feature volume is
//! `[C, T, H, W]`, a convolution kernel `[C_out, C_in, kT, kH, kW]`.
//!
//! A [`Tensor`] is a plain value. Differentiable computation happens on a
//! [`Tape`], which owns every intermediate value and replays the recorded
//! operations backwards when [`Tape::backward`] is called.

mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod tape;

pub use element::Real;
pub use error::TensorError;
pub use kernels::{
    conv3d, conv_transpose3d, maxpool3d, trilinear_sample_axis, trilinear_upsample, AxisSample,
    Conv3dGeometry, PoolGeometry,
};
pub use tape::{Branches, Tape, Var};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<T>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Converts to another working precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Reshape {
                from: self.shape,
                to: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let shape = concat_shape(parts.iter().map(|t| t.shape()), axis)?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for part in parts {
                let block = part.shape[axis] * inner;
                data.extend_from_slice(&part.data[o * block..(o + 1) * block]);
            }
        }
        Self::new(&shape, data)
    }

    /// Splits along `axis` into pieces of the given sizes. Inverse of [`Tensor::concat`].
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::Split {
                shape: self.shape.clone(),
                axis,
                sizes: sizes.to_vec(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &size in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = size;
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                let start = o * full + offset * inner;
                data.extend_from_slice(&self.data[start..start + size * inner]);
            }
            out.push(Self::new(&shape, data)?);
            offset += size;
        }
        Ok(out)
    }
}

pub(crate) fn concat_shape<'a>(
    mut shapes: impl Iterator<Item = &'a [usize]>,
    axis: usize,
) -> Result<Vec<usize>> {
    let first = shapes.next().ok_or(TensorError::EmptyConcat)?;
    if axis >= first.len() {
        return Err(TensorError::Axis {
            axis,
            rank: first.len(),
        });
    }
    let mut shape = first.to_vec();
    for s in shapes {
        let compatible = s.len() == shape.len()
            && s.iter()
                .zip(&shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::Incompatible {
                op: "concat",
                lhs: shape,
                rhs: s.to_vec(),
            });
        }
        shape[axis] += s[axis];
    }
    Ok(shape)
}
