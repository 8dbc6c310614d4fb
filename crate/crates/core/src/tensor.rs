//! Dense row-major f64 tensors. Shapes are plain `Vec<usize>`; a scalar is
//! shape `[]` with one element. No views, no strides — desk-scale data only.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` equals the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{n} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(format!("tensor of shape {:?}", self.shape)))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip_map(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::zip_map",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clamped(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Flat offset for a `(c, y, x)` index into a CHW tensor.
    #[inline]
    pub fn chw_offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw_dims(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape("chw_dims", "rank-3 tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Euclidean norm of the flattened difference.
    pub fn l2_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "l2_diff",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.25);
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 4.25);
        assert!(s.is_scalar());
    }

    #[test]
    fn item_rejects_multielement() {
        assert!(Tensor::zeros(&[2]).item().is_err());
    }

    #[test]
    fn zip_map_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn chw_offset_is_row_major() {
        let t = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(t.chw_offset(0, 0, 0), 0);
        assert_eq!(t.chw_offset(0, 0, 1), 1);
        assert_eq!(t.chw_offset(0, 1, 0), 5);
        assert_eq!(t.chw_offset(1, 0, 0), 20);
        assert_eq!(t.chw_offset(2, 3, 4), 59);
    }

    #[test]
    fn diffs_and_clamp() {
        let a = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, 1.0, 0.0]).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 2.0);
        assert!((a.l2_diff(&b).unwrap() - (0.25f64 + 4.0).sqrt()).abs() < 1e-15);
        let c = a.clamped(0.0, 1.0);
        assert_eq!(c.data(), &[0.0, 1.0, 0.0]);
    }
}
