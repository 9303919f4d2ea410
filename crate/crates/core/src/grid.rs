use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 in row-major order.
///
/// The universal numeric carrier for activations, parameters, poses, and
/// gradients. Extents are strictly positive; the data length always equals
/// the product of extents.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ValueGrid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dimension(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(ValueGrid { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        assert!(!shape.is_empty() && len > 0, "extents must be positive, got {shape:?}");
        ValueGrid { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut g = Self::zeros(shape);
        g.data.fill(value);
        g
    }

    pub fn scalar(value: f64) -> Self {
        ValueGrid { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut g = Self::zeros(shape);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = f(i);
        }
        g
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
        false // extents are strictly positive
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

    /// Extent of a 2-D grid's first axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of a 2-D grid's last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Reinterpret the same data under a new shape of equal length.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        ValueGrid::new(shape, self.data.clone())
    }

    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data.iter().enumerate().find(|(_, v)| !v.is_finite()).map(|(i, v)| (i, *v))
    }

    pub fn ensure_finite(&self, scope: &str) -> Result<()> {
        if let Some((i, v)) = self.first_non_finite() {
            return Err(Error::numeric(scope, format!("non-finite value {v} at flat index {i}")));
        }
        Ok(())
    }

    /// Exact bit-level equality (distinguishes -0.0, treats identical NaNs as equal).
    pub fn bits_eq(&self, other: &ValueGrid) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &ValueGrid) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(ValueGrid::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(ValueGrid::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(ValueGrid::new(vec![2, 0], vec![]).is_err());
        assert!(ValueGrid::new(vec![], vec![]).is_err());
    }

    #[test]
    fn finite_check_reports_position() {
        let mut g = ValueGrid::zeros(&[4]);
        g.data_mut()[2] = f64::NAN;
        let err = g.ensure_finite("test").unwrap_err();
        assert!(err.to_string().contains("index 2"), "{err}");
    }

    #[test]
    fn bits_eq_distinguishes_negative_zero() {
        let a = ValueGrid::new(vec![1], vec![0.0]).unwrap();
        let b = ValueGrid::new(vec![1], vec![-0.0]).unwrap();
        assert_eq!(a, b); // numeric equality
        assert!(!a.bits_eq(&b));
    }
}
