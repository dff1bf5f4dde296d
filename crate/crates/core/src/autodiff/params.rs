use std::collections::HashMap;

use rand::Rng;

use super::array::Array;
use crate::error::{Result, RgatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Array,
    grad: Array,
    m: Array,
    v: Array,
    step: u64,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with gradient buffers and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let zeros = Array::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        });
        self.index.insert(name, id);
        id
    }

    /// Registers a `[rows x cols]` matrix drawn from Glorot-uniform.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, glorot_uniform(rows, cols, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.params[id.0].grad
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.params[id.0].step
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Array) {
        self.params[id.0].grad.add_assign(grad);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Array) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(RgatError::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Bias-corrected Adam update of every parameter, then zeroes the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in &mut self.params {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let values = p.value.data_mut();
            let (m, v, g) = (p.m.data_mut(), p.v.data_mut(), p.grad.data());
            for i in 0..values.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
    }

    /// Snapshot of all parameter values, in registration order.
    pub fn snapshot(&self) -> Vec<(String, Array)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restores values by name. Every stored parameter must be present with a matching shape.
    pub fn restore(&mut self, values: &[(String, Array)]) -> Result<()> {
        let mut seen = 0;
        for (name, value) in values {
            let id = self
                .id(name)
                .ok_or_else(|| RgatError::Checkpoint(format!("unexpected parameter '{name}'")))?;
            self.set_value(id, value.clone())
                .map_err(|e| RgatError::Checkpoint(e.to_string()))?;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(RgatError::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                self.params.len()
            )));
        }
        Ok(())
    }
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Array {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Array::vector(vec![value]));
        s.accumulate_grad(id, &Array::vector(vec![grad]));
        (s, id)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let (mut s, id) = scalar_store(0.3, 0.0);
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.value(id).data(), &[0.3]);
        assert_eq!(s.step_count(id), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = 1, v_hat = 1
        let (mut s, id) = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        s.adam_step(&cfg);
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn hand_computed_two_steps() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let (mut s, id) = scalar_store(0.0, 1.0);
        s.adam_step(&cfg);
        s.accumulate_grad(id, &Array::vector(vec![-2.0]));
        s.adam_step(&cfg);
        let (b1, b2) = (0.9f64, 0.999f64);
        let m1 = 0.1;
        let v1 = 0.001;
        let m2 = b1 * m1 + (1.0 - b1) * -2.0;
        let v2 = b2 * v1 + (1.0 - b2) * 4.0;
        let p1 = -0.1 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + 1e-8);
        let p2 = p1 - 0.1 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + 1e-8);
        assert!((s.value(id).data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::new();
        let a = s.add("a", Array::vector(vec![0.5, -0.2]));
        let b = s.add("b", Array::vector(vec![0.5, -0.2]));
        for step in 0..5 {
            let g = Array::vector(vec![0.1 * step as f64, -0.3]);
            s.accumulate_grad(a, &g);
            s.accumulate_grad(b, &g);
            s.adam_step(&AdamConfig::default());
        }
        assert_eq!(s.value(a), s.value(b));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.add("a", Array::vector(vec![1.0]));
        let snap = s.snapshot();
        assert!(s.restore(&snap).is_ok());
        assert!(s
            .restore(&[("a".into(), Array::vector(vec![1.0, 2.0]))])
            .is_err());
        assert!(s.restore(&[("b".into(), Array::vector(vec![1.0]))]).is_err());
        assert!(s.restore(&[]).is_err());
    }
}
