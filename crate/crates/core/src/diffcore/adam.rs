use super::{DiffError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coupled L2 penalty: `weight_decay * w` is added to the gradient
    /// before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam moments for every tensor in a [`ParamSet`], index-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }

    /// One bias-corrected Adam update of every parameter from its `grad`.
    ///
    /// Nothing is modified unless every parameter has a gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), DiffError> {
        if params.len() != self.first.len() {
            return Err(DiffError::ParamCount {
                expected: self.first.len(),
                found: params.len(),
            });
        }
        for ((name, t), m) in params.iter().zip(&self.first) {
            if t.grad().is_none() {
                return Err(DiffError::MissingGrad { name: name.to_owned() });
            }
            if t.numel() != m.len() {
                return Err(DiffError::DataLength {
                    shape: t.shape().to_vec(),
                    len: m.len(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            weight_decay: wd,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((_, t), m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = t.grad().expect("checked above").to_vec();
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i] + wd * *w;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
