use crate::error::{Error, Result};

/// Adadelta state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the unit-free update; 1 is plain Adadelta.
    pub lr: f64,
    acc_grad: Vec<f64>,
    acc_update: Vec<f64>,
}

impl Adadelta {
    pub fn new(len: usize) -> Self {
        Self::with_params(len, 0.95, 1e-6, 1.0)
    }

    pub fn with_params(len: usize, rho: f64, eps: f64, lr: f64) -> Self {
        Adadelta {
            rho,
            eps,
            lr,
            acc_grad: vec![0.0; len],
            acc_update: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.acc_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc_grad.is_empty()
    }

    /// Running averages of squared gradients and squared updates.
    pub fn accumulators(&self) -> (&[f64], &[f64]) {
        (&self.acc_grad, &self.acc_update)
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.len() || grad.len() != self.len() {
            return Err(Error::shape(
                "Adadelta::step",
                format!("{} parameters and gradients", self.len()),
                format!("{} parameters, {} gradients", params.len(), grad.len()),
            ));
        }
        let (rho, eps) = (self.rho, self.eps);
        for i in 0..params.len() {
            let g = grad[i];
            let eg = rho * self.acc_grad[i] + (1.0 - rho) * g * g;
            let dx = -((self.acc_update[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
            self.acc_grad[i] = eg;
            self.acc_update[i] = rho * self.acc_update[i] + (1.0 - rho) * dx * dx;
            params[i] += self.lr * dx;
        }
        Ok(())
    }
}
