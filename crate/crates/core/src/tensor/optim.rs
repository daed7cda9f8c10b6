use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// Step-indexed learning rate: optional linear warmup, then division by
/// `anneal_factor` at each milestone step.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub anneal_steps: Vec<usize>,
    pub anneal_factor: f32,
}

impl LrSchedule {
    pub fn constant(lr: f32) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            anneal_steps: Vec::new(),
            anneal_factor: 5.0,
        }
    }

    /// Learning rate used for the update with zero-based index `step`.
    pub fn lr_at(&self, step: usize) -> f32 {
        let mut lr = self.base_lr;
        if step < self.warmup_steps {
            lr *= (step + 1) as f32 / self.warmup_steps as f32;
        }
        let passed = self.anneal_steps.iter().filter(|&&s| step >= s).count();
        lr / self.anneal_factor.powi(passed as i32)
    }
}

/// SGD-with-momentum or Adam, with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    schedule: LrSchedule,
    steps: usize,
    state: Vec<Slot>,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    first: Vec<f32>,
    second: Vec<f32>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32, schedule: LrSchedule) -> Self {
        Self {
            kind,
            weight_decay,
            schedule,
            steps: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f32 {
        self.schedule.lr_at(self.steps)
    }

    /// Applies one update to every tensor that carries a gradient.
    ///
    /// Tensors are matched to optimizer state by position, so callers must
    /// pass the same tensors in the same order on every step.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let lr = self.schedule.lr_at(self.steps);
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (name, tensor)) in params.into_iter().enumerate() {
            if self.state.len() <= i {
                self.state.resize_with(i + 1, Slot::default);
            }
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            let slot = &mut self.state[i];
            let n = grad.len();
            if slot.first.len() != n {
                slot.first = vec![0.0; n];
                slot.second = vec![0.0; n];
            }
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..n {
                        let w = &mut tensor.data[j];
                        let g = grad[j] + wd * *w;
                        let buf = if t == 1 { g } else { momentum * slot.first[j] + g };
                        slot.first[j] = buf;
                        *w -= lr * buf;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for j in 0..n {
                        let w = &mut tensor.data[j];
                        let g = grad[j] + wd * *w;
                        let m = beta1 * slot.first[j] + (1.0 - beta1) * g;
                        let v = beta2 * slot.second[j] + (1.0 - beta2) * g * g;
                        slot.first[j] = m;
                        slot.second[j] = v;
                        *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    }
                }
            }
            if tensor.data.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::Numeric {
                    tensor: name.to_string(),
                });
            }
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}
