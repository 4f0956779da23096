//! Adam with decoupled weight decay.

use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Decoupled decay coefficient, applied only to tensors flagged for it.
    pub weight_decay: F,
}

impl<F: Scalar> AdamConfig<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr: F::from_f64(lr),
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            weight_decay: F::from_f64(weight_decay),
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
pub struct AdamState<F: Scalar> {
    cfg: AdamConfig<F>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    decay: Vec<bool>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    /// `sizes[i]` is the element count of parameter `i`; `decay[i]` marks it
    /// for decoupled weight decay.
    pub fn new(cfg: AdamConfig<F>, sizes: &[usize], decay: &[bool]) -> Result<Self, TensorError> {
        if sizes.len() != decay.len() {
            return Err(TensorError::param(
                "adam",
                format!("{} sizes vs {} decay flags", sizes.len(), decay.len()),
            ));
        }
        Ok(AdamState {
            cfg,
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            decay: decay.to_vec(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every parameter, visited in registration
    /// order. The iterator must yield `(data, grad)` pairs matching the
    /// sizes given at construction.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a mut [F], &'a [F])>,
        F: 'a,
    {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bias1 = F::one() - c.beta1.powi(t);
        let bias2 = F::one() - c.beta2.powi(t);
        let mut count = 0;
        for (i, (data, grad)) in params.into_iter().enumerate() {
            if i >= self.m.len() || data.len() != self.m[i].len() || grad.len() != data.len() {
                return Err(TensorError::param(
                    "adam",
                    format!("parameter {i} does not match optimizer state"),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = self.decay[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (F::one() - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (F::one() - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                let mut update = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                if decay {
                    update += c.lr * c.weight_decay * data[j];
                }
                data[j] -= update;
            }
            count += 1;
        }
        if count != self.m.len() {
            return Err(TensorError::param(
                "adam",
                format!("expected {} parameters, got {count}", self.m.len()),
            ));
        }
        Ok(())
    }
}
