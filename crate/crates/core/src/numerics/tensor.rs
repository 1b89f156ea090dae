//! Dense row-major `f64` tensor with an optional gradient buffer.

use rand::Rng;

use super::NumericsError;

/// A dense tensor: shape, row-major values, and an optional gradient buffer
/// of the same length.
///
/// Invariants, enforced at every public construction site:
/// * `data.len()` equals the product of `shape` extents;
/// * every extent is positive;
/// * every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data, validating the
    /// invariants.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NumericsError::InvalidShape {
                shape,
                reason: format!("data length {} does not match element count {numel}", data.len()),
            });
        }
        validate_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        validate_shape(&shape).expect("zeros: invalid shape");
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    /// Tensor filled with a single finite value.
    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        assert!(value.is_finite(), "filled: value must be finite");
        validate_shape(&shape).expect("filled: invalid shape");
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel], grad: None, requires_grad: false }
    }

    /// Tensor of independent normal samples with mean 0 and the given
    /// standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        validate_shape(&shape).expect("randn: invalid shape");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * standard_normal(rng)).collect();
        Self { shape, data, grad: None, requires_grad: false }
    }

    /// He-normal initialization: std = sqrt(2 / fan_in). The usual choice
    /// ahead of a ReLU.
    pub fn he_normal<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        assert!(fan_in > 0, "he_normal: fan_in must be positive");
        Self::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    /// Mark this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Replace the stored values, validating length and finiteness.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<(), NumericsError> {
        if data.len() != self.data.len() {
            return Err(NumericsError::InvalidShape {
                shape: self.shape.clone(),
                reason: format!(
                    "set_data length {} does not match element count {}",
                    data.len(),
                    self.data.len()
                ),
            });
        }
        validate_finite(&data, "Tensor::set_data")?;
        self.data = data;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Drop the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows: tensor is not rank-2");
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols: tensor is not rank-2");
        self.shape[1]
    }

    /// One row of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<(), NumericsError> {
    if shape.is_empty() {
        return Err(NumericsError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must have at least one extent".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(NumericsError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

pub(crate) fn validate_finite(data: &[f64], context: &'static str) -> Result<(), NumericsError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NumericsError::NonFinite { context, index }),
        None => Ok(()),
    }
}

/// One standard-normal sample via the Box-Muller transform.
///
/// Depends only on the generator's `f64` stream, so results are reproducible
/// across platforms for any portable RNG.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // 1 - u maps [0,1) to (0,1], keeping the log argument positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn new_validates_length_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]),
            Err(NumericsError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(NumericsError::InvalidShape { .. })
        ));
    }

    #[test]
    fn grad_buffer_lifecycle() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        assert!(t.requires_grad());
        assert!(t.grad().is_none());
        t.grad_mut()[1] = 2.5;
        assert_eq!(t.grad().unwrap(), &[0.0, 2.5, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn randn_is_seed_deterministic_with_plausible_moments() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![20_000], 0.5, &mut a);
        let y = Tensor::randn(vec![20_000], 0.5, &mut b);
        assert_eq!(x.data(), y.data());

        let n = x.numel() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // std of the sample mean is 0.5/sqrt(20000) ~ 0.0035; allow 4 sigma.
        assert!(mean.abs() < 0.015, "mean {mean}");
        assert!((var - 0.25).abs() < 0.02, "var {var}");
    }

    #[test]
    fn he_normal_scales_by_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::he_normal(vec![512, 8], 512, &mut rng);
        let n = t.numel() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / 512.0;
        assert!((var - expected).abs() < 0.3 * expected, "var {var} vs {expected}");
    }
}
