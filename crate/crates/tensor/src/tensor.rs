//! Dense 4-D tensors in NCHW layout.

use crate::element::Element;
use crate::error::{Result, TensorError};

/// Dense `N × C × H × W` tensor, row-major within each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one `C × H × W` sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Borrow sample `n` as a flat `C·H·W` slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.numel().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Empty("concat"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape,
                    rhs: p.shape,
                });
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for s in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(s));
            }
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Copies channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c {
            return Err(TensorError::ChannelRange { start, len, channels: c });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            let base = s * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + (start + len) * plane]);
        }
        Self::from_vec([n, len, h, w], data)
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(samples: &[&Self]) -> Result<Self> {
        let first = samples.first().ok_or(TensorError::Empty("stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in samples {
            if s.shape[1..] != first.shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape,
                    rhs: s.shape,
                });
            }
            data.extend_from_slice(&s.data);
        }
        let n = data.len() / (c * h * w).max(1);
        Self::from_vec([n, c, h, w], data)
    }

    /// Copies sample `n` out as a batch-of-one tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 2], (0..8).map(|v| v as f32 * 10.0).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.slice_channels(0, 1).unwrap(), a);
        assert_eq!(c.slice_channels(1, 2).unwrap(), b);
        assert!(c.slice_channels(2, 2).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
