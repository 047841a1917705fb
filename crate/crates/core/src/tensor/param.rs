//! Named parameter storage and the Adam update rule.
//!
//! Parameters live in f32. Gradients accumulate across tapes (so a batch
//! can sum per-sample contributions in a fixed order) until `adam_step`
//! consumes and zeroes them.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        if !value.all_finite() {
            return Err(Error::numeric(format!("non-finite init for parameter {name:?}")));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn grad(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter ids in insertion order (the canonical checkpoint order).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Replace a parameter's value, preserving optimizer state shape checks.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "set_value {:?}: shape {:?} != stored {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::numeric(format!("non-finite value for parameter {:?}", p.name)));
        }
        p.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// grad[id] += scale * g. Shapes must match the stored value.
    pub fn accumulate_scaled(&mut self, id: ParamId, g: &Tensor<f32>, scale: f32) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} != parameter {:?} shape {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        for (dst, &src) in p.grad.iter_mut().zip(g.data().iter()) {
            *dst += scale * src;
        }
        Ok(())
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.adam_t
    }
}

/// One bias-corrected Adam step over every parameter; consumes (zeroes)
/// the accumulated gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::domain(format!("learning rate {} must be > 0", cfg.lr)));
    }
    store.adam_t += 1;
    let t = store.adam_t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let mut new_val = p.value.data().to_vec();
        for i in 0..new_val.len() {
            let g = p.grad[i];
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {:?}", p.name)));
            }
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            new_val[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p.grad[i] = 0.0;
        }
        p.value = Tensor::from_parts(p.value.shape().to_vec(), new_val);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("w", Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With any nonzero constant gradient, the bias-corrected first
        // step is value -= lr * g/|g| (up to eps), i.e. magnitude ~ lr.
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let g = Tensor::from_vec(vec![2], vec![0.5f32, -3.0]).unwrap();
        s.accumulate_scaled(id, &g, 1.0).unwrap();
        adam_step(&mut s, &AdamConfig::with_lr(0.01)).unwrap();
        let v = s.value(id).data().to_vec();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-5, "got {}", v[0]);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-5, "got {}", v[1]);
        // Gradients consumed.
        assert!(s.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn accumulate_orders_and_scales() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(vec![1])).unwrap();
        let g1 = Tensor::from_vec(vec![1], vec![2.0f32]).unwrap();
        let g2 = Tensor::from_vec(vec![1], vec![4.0f32]).unwrap();
        s.accumulate_scaled(id, &g1, 0.5).unwrap();
        s.accumulate_scaled(id, &g2, 0.5).unwrap();
        assert_eq!(s.grad(id), &[3.0]);
    }

    #[test]
    fn zero_gradient_leaves_value_nearly_fixed() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![1], vec![5.0f32]).unwrap()).unwrap();
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        // m = v = 0 so the update is exactly 0 / eps = 0.
        assert_eq!(s.value(id).data(), &[5.0]);
    }
}
