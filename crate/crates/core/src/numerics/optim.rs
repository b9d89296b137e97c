use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`;
    /// `None` is treated as a zero gradient.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<(), NumericsError> {
        if grads.len() != params.len() {
            return Err(NumericsError::ParamCount {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "optimizer_step",
                        shapes: vec![params.get(i).shape().to_vec(), g.shape().to_vec()],
                    });
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient {
                        param: params.name(i).to_string(),
                    });
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.values().iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
