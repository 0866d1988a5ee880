use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// SGD with classical momentum:
/// `velocity <- momentum * velocity + grad; value <- value - lr * velocity`.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. The parameter list must be passed in the same order
    /// on every call; velocities are matched by position.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for parameter `{}`",
                    p.name
                )));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            v.expect_shape("sgd", p.value.shape())?;
            for ((val, vel), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.grad.data())
            {
                *vel = self.momentum * *vel + g;
                *val -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}
