use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Nonlinearity applied between hidden layers. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![T::zero(); output],
        }
    }

    /// Kaiming-uniform weights (`U(±√(6/fan_in))`) and zero bias.
    pub fn kaiming_uniform<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let weight = Matrix::from_fn(output, input, |_, _| T::of(rng.random_range(-bound..=bound)));
        Self {
            weight,
            bias: vec![T::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.mul_vec(x);
        for (v, &b) in y.iter_mut().zip(&self.bias) {
            *v = *v + b;
        }
        y
    }
}

/// Intermediate values of one MLP forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTrace<T> {
    inputs: Vec<Vec<T>>,
    pre_activations: Vec<Vec<T>>,
}

impl<T: Scalar> MlpTrace<T> {
    pub fn output(&self) -> &[T] {
        self.pre_activations.last().expect("mlp has at least one layer")
    }
}

/// Feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
    activation: Activation,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self, EncoderError> {
        if layers.is_empty() {
            return Err(EncoderError::InvalidConfig("mlp needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(EncoderError::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.bias.len(),
                });
            }
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(EncoderError::DimensionMismatch {
                    expected: w[0].output_dim(),
                    got: w[1].input_dim(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Randomly initialized MLP through the given layer widths.
    pub fn kaiming<R: Rng>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self, EncoderError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(EncoderError::InvalidConfig(format!("invalid mlp widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Linear::kaiming_uniform(w[0], w[1], rng))
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Zero-filled tensors shaped like this network's parameters.
    pub fn zeros_like(&self) -> Vec<Linear<T>> {
        self.layers
            .iter()
            .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
            .collect()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, EncoderError> {
        Ok(self.forward_traced(x)?.pre_activations.pop().expect("non-empty"))
    }

    pub fn forward_traced(&self, x: &[T]) -> Result<MlpTrace<T>, EncoderError> {
        if x.len() != self.input_dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if i + 1 < self.layers.len() {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            pre.push(z);
        }
        Ok(MlpTrace {
            inputs,
            pre_activations: pre,
        })
    }

    /// Accumulates parameter gradients for upstream gradient `dy` into `grads`.
    pub fn backward(&self, trace: &MlpTrace<T>, dy: &[T], grads: &mut [Linear<T>]) {
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            grads[i].weight.add_outer(&g, &trace.inputs[i]);
            for (b, &gv) in grads[i].bias.iter_mut().zip(&g) {
                *b = *b + gv;
            }
            if i == 0 {
                break;
            }
            let mut dh = self.layers[i].weight.mul_vec_transposed(&g);
            for (d, &z) in dh.iter_mut().zip(&trace.pre_activations[i - 1]) {
                *d = *d * self.activation.derivative(z);
            }
            g = dh;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_incompatible_layers() {
        let err = Mlp::<f64>::new(vec![Linear::zeros(3, 4), Linear::zeros(5, 2)], Activation::Relu);
        assert!(matches!(err, Err(EncoderError::DimensionMismatch { expected: 4, got: 5 })));
        assert!(Mlp::<f64>::new(vec![], Activation::Relu).is_err());
    }

    #[test]
    fn relu_masks_negative_hidden_units() {
        let l1 = Linear {
            weight: Matrix::from_vec(2, 1, vec![1.0, -1.0]),
            bias: vec![0.0, 0.0],
        };
        let l2 = Linear {
            weight: Matrix::from_vec(1, 2, vec![1.0, 1.0]),
            bias: vec![0.5],
        };
        let mlp = Mlp::new(vec![l1, l2], Activation::Relu).unwrap();
        assert_eq!(mlp.forward(&[2.0]).unwrap(), vec![2.5]);
        assert_eq!(mlp.forward(&[-3.0]).unwrap(), vec![3.5]);
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::kaiming(&[24, 8], Activation::Relu, &mut rng).unwrap();
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(mlp.layers()[0].weight.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(mlp.layers()[0].bias.iter().all(|&b| b == 0.0));
    }
}
