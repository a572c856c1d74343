use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Adadelta: per-scalar step sizes from running averages of squared
/// gradients and squared updates, with no global learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6 }
    }
}

impl Adadelta {
    pub fn new(rho: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || !(eps > 0.0) {
            return Err(Error::invalid(format!(
                "adadelta needs 0 <= rho < 1 and eps > 0, got rho={rho} eps={eps}"
            )));
        }
        Ok(Self { rho, eps })
    }

    /// Apply one update to every parameter, then clear the gradients.
    ///
    /// Fails without touching any parameter if a gradient is not finite.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.params() {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in '{}' at index {i}",
                    p.name
                )));
            }
        }
        let rho = T::from_f64(self.rho);
        let one_minus = T::from_f64(1.0 - self.rho);
        let eps = T::from_f64(self.eps);
        for p in store.params_mut() {
            let n = p.value.len();
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let sq_grad = p.sq_grad.data_mut();
            let sq_delta = p.sq_delta.data_mut();
            for i in 0..n {
                let g = grad[i];
                sq_grad[i] = rho * sq_grad[i] + one_minus * g * g;
                let delta = -((sq_delta[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
                sq_delta[i] = rho * sq_delta[i] + one_minus * delta * delta;
                value[i] = value[i] + delta;
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}
