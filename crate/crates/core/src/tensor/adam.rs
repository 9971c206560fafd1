use super::Tensor;
use crate::{Error, Result};

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Number of tensor updates skipped because of a non-finite gradient.
    pub skipped: u64,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            skipped: 0,
        }
    }

    /// Update `value` in place. Returns `false` (and leaves everything
    /// untouched) when the gradient contains a NaN or infinity.
    pub fn step(&mut self, value: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<bool> {
        if value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if state.step == 0 && state.m.is_empty() {
            state.m = vec![0.0; value.numel()];
            state.v = vec![0.0; value.numel()];
        }
        if state.m.len() != value.numel() || state.v.len() != value.numel() {
            return Err(Error::invalid("adam_step", "optimizer state does not match parameter"));
        }
        if !grad.is_finite() {
            self.skipped += 1;
            return Ok(false);
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, &g), (m, v)) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(true)
    }
}

/// A named trainable tensor with its gradient slot and optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    grad: Option<Tensor>,
    pub state: AdamState,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            state: AdamState::default(),
        }
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                lhs: self.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Apply one Adam step using the stored gradient (no-op without one).
    pub fn apply(&mut self, adam: &mut Adam) -> Result<bool> {
        match self.grad.take() {
            Some(g) => adam.step(&mut self.value, &g, &mut self.state),
            None => Ok(false),
        }
    }
}
