use crate::error::{Error, Result};

/// Optimizer and batching schedule shared by both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            batches_per_epoch: 200,
            epochs: 50,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 * num_classes {
            return Err(Error::InvalidArgument(format!(
                "batch size {} is smaller than 2 x {num_classes} classes",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Momentum buffer for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Momentum {
    buffer: Vec<f64>,
}

impl Momentum {
    pub fn new(len: usize) -> Self {
        Momentum {
            buffer: vec![0.0; len],
        }
    }
}

/// One heavy-ball step:
/// `buf = momentum*buf + (grad + weight_decay*param); param -= lr*buf`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut Momentum,
    config: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if state.buffer.len() != params.len() {
        state.buffer = vec![0.0; params.len()];
    }
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(state.buffer.iter_mut()) {
        *b = config.momentum * *b + (g + config.weight_decay * *p);
        *p -= config.learning_rate * *b;
    }
    Ok(())
}
