use crate::scalar::Real;

use super::DiffError;

/// Step-based exponential decay: `lr(step) = lr0 * decay^floor(step / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule<T> {
    pub initial: T,
    pub decay: T,
    pub every: u64,
}

impl<T: Real> LrSchedule<T> {
    pub fn constant(lr: T) -> Self {
        Self {
            initial: lr,
            decay: T::one(),
            every: 1,
        }
    }

    pub fn at(&self, step: u64) -> T {
        let k = (step / self.every.max(1)) as i32;
        self.initial * self.decay.powi(k)
    }
}

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    /// Number of accepted steps.
    pub step: u64,
    pub schedule: LrSchedule<T>,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, schedule: LrSchedule<T>) -> Self {
        Self {
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
            step: 0,
            schedule,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    /// Learning rate the next step will use.
    pub fn lr(&self) -> T {
        self.schedule.at(self.step)
    }

    /// Bias-corrected Adam update of `params` in place. A non-finite
    /// gradient leaves both the parameters and the state untouched.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<(), DiffError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(DiffError::DimensionMismatch {
                expected: self.first.len(),
                found: if params.len() != self.first.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteGradient { index });
        }
        let lr = self.lr();
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
