use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with up to four axes and an optional gradient
/// buffer of identical shape.
///
/// Axes follow the `[batch, channel, row, col]` convention where all four
/// are present. Zero-length axes are rejected at construction, so `len()`
/// is always positive and equal to the product of the extents.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

pub const MAX_AXES: usize = 4;

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let len = checked_volume(&shape)?;
        contract!(
            data.len() == len,
            "tensor data length {} does not match shape {:?} (volume {})",
            data.len(),
            shape,
            len
        );
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = checked_volume(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![S::zero(); len],
            grad: None,
        })
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: S) -> Result<Self> {
        let shape = shape.into();
        let len = checked_volume(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
            grad: None,
        })
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // zero-length axes are rejected at construction
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.as_f64()).collect()
    }

    /// Allocates (zeroed) the gradient buffer if absent.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![S::zero(); self.data.len()]);
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact equality of shape and stored bit patterns (distinguishes
    /// `-0.0` from `0.0`; `NaN` compares equal to an identical `NaN`).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Row-major offset for a 4-axis tensor.
    #[inline(always)]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    /// Row-major offset for a 2-axis tensor.
    #[inline(always)]
    pub fn idx2(&self, a: usize, b: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        a * self.shape[1] + b
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_AXES {
        return Err(Error::Contract(format!(
            "tensor must have 1..={MAX_AXES} axes, got shape {shape:?}"
        )));
    }
    let mut len: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::Contract(format!(
                "tensor axes must be non-empty, got shape {shape:?}"
            )));
        }
        len = len.checked_mul(d).ok_or_else(|| {
            Error::Contract(format!("tensor shape {shape:?} overflows usize"))
        })?;
    }
    Ok(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new([1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape_and_clears() {
        let mut t = Tensor::<f64>::zeros([3, 4]).unwrap();
        assert!(t.grad().is_none());
        t.ensure_grad();
        assert_eq!(t.grad().unwrap().len(), t.len());
        t.grad_mut().unwrap()[5] = 2.5;
        assert_eq!(t.grad().unwrap()[5], 2.5);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn bits_eq_distinguishes_signed_zero() {
        let a = Tensor::<f32>::new([1], vec![0.0]).unwrap();
        let b = Tensor::<f32>::new([1], vec![-0.0]).unwrap();
        assert!(!a.bits_eq(&b));
        assert!(a.bits_eq(&a.clone()));
    }

    #[test]
    fn idx4_is_row_major() {
        let t = Tensor::<f32>::zeros([2, 3, 4, 5]).unwrap();
        assert_eq!(t.idx4(0, 0, 0, 0), 0);
        assert_eq!(t.idx4(0, 0, 0, 4), 4);
        assert_eq!(t.idx4(0, 0, 1, 0), 5);
        assert_eq!(t.idx4(0, 1, 0, 0), 20);
        assert_eq!(t.idx4(1, 0, 0, 0), 60);
        assert_eq!(t.idx4(1, 2, 3, 4), 119);
    }
}
