//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is an immutable shaped view over a shared buffer. All
//! differentiable computation happens on a [`crate::autodiff::Tape`];
//! tensors themselves are plain values and cheap to clone.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::TensorError;

/// Immutable dense tensor, row-major, 32-bit floats.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f32]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel].into(),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel].into(),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl rand::Rng) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a scalar-shaped tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Element by multi-index (test convenience, bounds-checked).
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (ax, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(i < d, "index {i} out of range for axis {ax} (dim {d})");
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// NumPy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

fn broadcast_strides(operand: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let op_strides = strides_for(operand);
    let mut strides = vec![0; rank];
    let pad = rank - operand.len();
    for i in 0..operand.len() {
        strides[pad + i] = if operand[i] == 1 { 0 } else { op_strides[i] };
    }
    strides
}

/// Odometer over a broadcast output yielding, per output element in
/// row-major order, the flat offsets into the two operands. Amortized
/// O(1) per element, no divisions.
pub(crate) struct BroadcastPairs {
    out_shape: Vec<usize>,
    counters: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    offset_a: usize,
    offset_b: usize,
    remaining: usize,
}

impl BroadcastPairs {
    pub fn new(a: &[usize], b: &[usize], out_shape: &[usize]) -> Self {
        Self {
            counters: vec![0; out_shape.len()],
            stride_a: broadcast_strides(a, out_shape),
            stride_b: broadcast_strides(b, out_shape),
            offset_a: 0,
            offset_b: 0,
            remaining: out_shape.iter().product(),
            out_shape: out_shape.to_vec(),
        }
    }
}

impl Iterator for BroadcastPairs {
    type Item = (usize, usize);

    #[inline]
    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let item = (self.offset_a, self.offset_b);
        for ax in (0..self.out_shape.len()).rev() {
            self.counters[ax] += 1;
            self.offset_a += self.stride_a[ax];
            self.offset_b += self.stride_b[ax];
            if self.counters[ax] < self.out_shape[ax] {
                break;
            }
            self.counters[ax] = 0;
            self.offset_a -= self.stride_a[ax] * self.out_shape[ax];
            self.offset_b -= self.stride_b[ax] * self.out_shape[ax];
        }
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn at_and_strides() {
        let t = Tensor::new(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[1, 4, 4], &[3, 4, 4]), Some(vec![3, 4, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_pairs_stretch_operands() {
        // [1,2] and [3,1] broadcast over [3,2]
        let pairs: Vec<(usize, usize)> = BroadcastPairs::new(&[1, 2], &[3, 1], &[3, 2]).collect();
        assert_eq!(
            pairs,
            vec![(0, 0), (1, 0), (0, 1), (1, 1), (0, 2), (1, 2)]
        );
    }
}
