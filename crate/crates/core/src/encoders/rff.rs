use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderError;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Random Fourier feature layer `γ(p) = [cos(2πWp), sin(2πWp)]` over 3-D inputs.
///
/// `W` is `F × 3` with entries drawn from `N(0, σ)` and is never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RffLayer<T> {
    sigma: T,
    w: Matrix<T>,
}

impl<T: Scalar> RffLayer<T> {
    pub fn new(sigma: T, w: Matrix<T>) -> Result<Self, EncoderError> {
        if w.cols() != 3 {
            return Err(EncoderError::DimensionMismatch {
                expected: 3,
                got: w.cols(),
            });
        }
        if w.rows() == 0 {
            return Err(EncoderError::InvalidConfig("rff layer needs at least one feature".into()));
        }
        Ok(Self { sigma, w })
    }

    /// Draws `features × 3` frequencies with standard deviation `sigma`.
    pub fn sample<R: Rng>(sigma: f64, features: usize, rng: &mut R) -> Result<Self, EncoderError> {
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| EncoderError::InvalidConfig(format!("sigma {sigma}: {e}")))?;
        let w = Matrix::from_fn(features, 3, |_, _| T::of(normal.sample(rng)));
        Self::new(T::of(sigma), w)
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn frequencies(&self) -> &Matrix<T> {
        &self.w
    }

    pub fn feature_count(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.w.rows()
    }

    /// Maps a (scaled) 3-vector to its `2F` sinusoidal features.
    pub fn map(&self, p: &[T]) -> Result<Vec<T>, EncoderError> {
        if p.len() != 3 {
            return Err(EncoderError::DimensionMismatch {
                expected: 3,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        let two_pi = T::of(std::f64::consts::TAU);
        let phase: Vec<T> = self.w.mul_vec(p).into_iter().map(|v| two_pi * v).collect();
        let mut out = Vec::with_capacity(2 * phase.len());
        out.extend(phase.iter().map(|v| v.cos()));
        out.extend(phase.iter().map(|v| v.sin()));
        Ok(out)
    }
}

/// Free-function form of [`RffLayer::map`].
pub fn rff_map<T: Scalar>(p: &[T], layer: &RffLayer<T>) -> Result<Vec<T>, EncoderError> {
    layer.map(p)
}
