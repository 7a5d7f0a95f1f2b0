use crate::error::Result;
use crate::tensor::Tensor;

use super::graph::Activation;
use super::primitives;

/// A primal value paired with its tangent.
///
/// A `None` tangent is an identically zero tangent of the primal's shape.
/// Zero tangents propagate as `None` through every primitive, which keeps
/// frozen base weights from costing tangent arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    tangent: Option<Tensor>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        primal.ensure_same_shape(&tangent, "dual tensor")?;
        Ok(Self {
            primal,
            tangent: Some(tangent),
        })
    }

    pub fn constant(primal: Tensor) -> Self {
        Self {
            primal,
            tangent: None,
        }
    }

    /// Materialised tangent.
    pub fn tangent(&self) -> Tensor {
        match &self.tangent {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.primal.shape()),
        }
    }

    pub fn tangent_ref(&self) -> Option<&Tensor> {
        self.tangent.as_ref()
    }

    pub fn has_tangent(&self) -> bool {
        self.tangent.is_some()
    }

    fn sum_opt(a: Option<Tensor>, b: Option<Tensor>) -> Result<Option<Tensor>> {
        Ok(match (a, b) {
            (None, None) => None,
            (Some(x), None) | (None, Some(x)) => Some(x),
            (Some(x), Some(y)) => Some(x.add(&y)?),
        })
    }

    pub fn matmul(&self, rhs: &DualTensor) -> Result<DualTensor> {
        let primal = self.primal.matmul(&rhs.primal)?;
        let left = self.tangent.as_ref().map(|t| t.matmul(&rhs.primal)).transpose()?;
        let right = rhs.tangent.as_ref().map(|t| self.primal.matmul(t)).transpose()?;
        Ok(DualTensor {
            primal,
            tangent: Self::sum_opt(left, right)?,
        })
    }

    pub fn matmul_t(&self, rhs: &DualTensor) -> Result<DualTensor> {
        let primal = self.primal.matmul_t(&rhs.primal)?;
        let left = self.tangent.as_ref().map(|t| t.matmul_t(&rhs.primal)).transpose()?;
        let right = rhs.tangent.as_ref().map(|t| self.primal.matmul_t(t)).transpose()?;
        Ok(DualTensor {
            primal,
            tangent: Self::sum_opt(left, right)?,
        })
    }

    pub fn add_bias(&self, bias: &DualTensor) -> Result<DualTensor> {
        let primal = primitives::add_bias(&self.primal, &bias.primal)?;
        let tangent = match (&self.tangent, &bias.tangent) {
            (None, None) => None,
            (Some(t), None) => Some(t.clone()),
            (None, Some(b)) => Some(primitives::add_bias(&Tensor::zeros(self.primal.shape()), b)?),
            (Some(t), Some(b)) => Some(primitives::add_bias(t, b)?),
        };
        Ok(DualTensor { primal, tangent })
    }

    pub fn add(&self, rhs: &DualTensor) -> Result<DualTensor> {
        Ok(DualTensor {
            primal: self.primal.add(&rhs.primal)?,
            tangent: Self::sum_opt(self.tangent.clone(), rhs.tangent.clone())?,
        })
    }

    pub fn mul(&self, rhs: &DualTensor) -> Result<DualTensor> {
        let primal = self.primal.zip_map(&rhs.primal, |a, b| a * b)?;
        let left = self
            .tangent
            .as_ref()
            .map(|t| t.zip_map(&rhs.primal, |a, b| a * b))
            .transpose()?;
        let right = rhs
            .tangent
            .as_ref()
            .map(|t| self.primal.zip_map(t, |a, b| a * b))
            .transpose()?;
        Ok(DualTensor {
            primal,
            tangent: Self::sum_opt(left, right)?,
        })
    }

    pub fn scale(&self, s: f64) -> DualTensor {
        DualTensor {
            primal: self.primal.scale(s),
            tangent: self.tangent.as_ref().map(|t| t.scale(s)),
        }
    }

    pub fn act(&self, kind: Activation) -> Result<DualTensor> {
        let primal = primitives::activation(&self.primal, kind);
        let tangent = match &self.tangent {
            None => None,
            Some(t) => {
                let d = primitives::activation_derivative(&self.primal, &primal, kind);
                Some(d.zip_map(t, |a, b| a * b)?)
            }
        };
        Ok(DualTensor { primal, tangent })
    }

    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<DualTensor> {
        let (loss, probs) = primitives::softmax_cross_entropy(&self.primal, labels)?;
        let tangent = self
            .tangent
            .as_ref()
            .map(|t| primitives::softmax_cross_entropy_tangent(&probs, labels, t).map(Tensor::scalar))
            .transpose()?;
        Ok(DualTensor {
            primal: Tensor::scalar(loss),
            tangent,
        })
    }

    pub fn sum(&self) -> DualTensor {
        DualTensor {
            primal: Tensor::scalar(self.primal.sum()),
            tangent: self.tangent.as_ref().map(|t| Tensor::scalar(t.sum())),
        }
    }

    pub fn mean(&self) -> DualTensor {
        let n = self.primal.numel().max(1) as f64;
        DualTensor {
            primal: Tensor::scalar(self.primal.sum() / n),
            tangent: self.tangent.as_ref().map(|t| Tensor::scalar(t.sum() / n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tangent_propagates() {
        let a = DualTensor::constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = DualTensor::new(Tensor::filled(&[2, 2], 0.5), Tensor::zeros(&[2, 2])).unwrap();
        let c = a.matmul(&b).unwrap().act(Activation::Tanh).unwrap().sum();
        assert_eq!(c.tangent().item().unwrap(), 0.0);
        let d = a.act(Activation::Gelu).unwrap().mean();
        assert!(!d.has_tangent());
    }

    #[test]
    fn product_rule() {
        // d/dt (x + t)^2 at x = 3 is 6
        let x = DualTensor::new(Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![1.0])).unwrap();
        let y = x.mul(&x).unwrap().sum();
        assert_eq!(y.primal.item().unwrap(), 9.0);
        assert_eq!(y.tangent().item().unwrap(), 6.0);
    }

    #[test]
    fn mismatched_tangent_rejected() {
        assert!(DualTensor::new(Tensor::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }
}
