use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major N-dimensional array. The last axis is fastest; images are
/// laid out `[batch, channel, height, width]`.
///
/// Tensors are immutable values: cloning shares the underlying buffer, and
/// every operation produces a fresh tensor. This is what makes them safe to
/// capture into backward closures and to read from multiple threads.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "all dimension sizes must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![S::ZERO; numel]) }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel).map(f).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<S> = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Adds `other` into `self` in place when the buffer is uniquely owned,
    /// otherwise copies first. Used for deterministic gradient accumulation.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "gradient accumulation on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let dst = Arc::make_mut(&mut self.data);
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
        Ok(())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Offset of element `[n, c, y, x]` in a rank-4 tensor.
    #[inline(always)]
    pub fn idx4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline(always)]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.idx4(n, c, y, x)]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|v| T::from_f64(v.to_f64())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Replaces one element, copying the buffer if shared. Test and
    /// finite-difference helper; not part of the hot path.
    pub fn with_element(&self, i: usize, v: S) -> Self {
        let mut data = self.data.as_ref().clone();
        data[i] = v;
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Bitwise equality of shape and elements.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl Tensor<f32> {
    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn validate_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {a} out of range for shape {shape:?}"
            )));
        }
    }
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if seen[a] {
            return Err(Error::InvalidArgument(format!("duplicate axis {a}")));
        }
        seen[a] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_dims_and_bad_length() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn scalar_and_reshape() {
        let t = Tensor::<f64>::scalar(3.5);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.5);
        let v = Tensor::<f32>::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let r = v.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), v.data());
        assert!(v.reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn idx4_row_major_last_axis_fastest() {
        let t = Tensor::<f32>::new(vec![1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 0, 2), 2.0);
        assert_eq!(t.at4(0, 0, 1, 0), 3.0);
        assert_eq!(t.at4(0, 1, 0, 0), 6.0);
    }

    #[test]
    fn accumulate_adds_elementwise() {
        let mut a = Tensor::<f64>::filled(&[3], 1.0);
        let b = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        a.accumulate(&b).unwrap();
        assert_eq!(a.data(), &[2.0, 3.0, 4.0]);
    }
}
