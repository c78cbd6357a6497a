//! Named parameters and the AdamW update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::scalar::{c as sc, Scalar};
use crate::numeric::tensor::Tensor;

/// One named tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    /// First-moment estimate, same shape as the tensor.
    pub m: Tensor<T>,
    /// Second-moment estimate, same shape as the tensor.
    pub v: Tensor<T>,
    /// Number of optimizer steps applied to this parameter.
    pub step: u64,
}

impl<T: Scalar> Param<T> {
    fn new(tensor: Tensor<T>, trainable: bool) -> Self {
        let m = Tensor::zeros(tensor.shape().to_vec());
        let v = Tensor::zeros(tensor.shape().to_vec());
        Param {
            tensor,
            trainable,
            m,
            v,
            step: 0,
        }
    }
}

/// Ordered collection of named parameters; iteration order is the name order,
/// which keeps every downstream artifact deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), Param::new(tensor, trainable));
        Ok(())
    }

    /// Inserts a parameter together with restored optimizer state, as when
    /// reloading a checkpoint. Moment shapes must match the tensor.
    pub fn insert_with_state(
        &mut self,
        name: &str,
        tensor: Tensor<T>,
        trainable: bool,
        m: Tensor<T>,
        v: Tensor<T>,
        step: u64,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        if m.shape() != tensor.shape() || v.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': moment shapes {:?}/{:?} vs tensor {:?}",
                m.shape(),
                v.shape(),
                tensor.shape()
            )));
        }
        self.params.insert(
            name.to_string(),
            Param {
                tensor,
                trainable,
                m,
                v,
                step,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}': {:?} vs {:?}",
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?
            .trainable = trainable;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Bitwise equality of a named tensor across two sets.
    pub fn tensor_bit_eq(&self, other: &Self, name: &str) -> Result<bool> {
        Ok(self.tensor(name)?.bit_eq(other.tensor(name)?))
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamwConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid(format!(
                "adamw: betas must lie in [0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid(format!("adamw: eps must be positive, got {}", self.eps)));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "adamw: lr and weight decay must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam step over the trainable parameters.
///
/// `grads` must cover exactly the trainable parameters: a gradient for a
/// frozen or unknown parameter signals a freeze-schedule bug and is rejected,
/// as is a missing gradient. Moments use bias correction; weight decay is
/// applied against the pre-update parameter value, decoupled from the moment
/// update: `θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: &AdamwConfig,
) -> Result<()> {
    cfg.validate()?;
    for name in grads.keys() {
        match params.params.get(name) {
            None => return Err(Error::invalid(format!("gradient for unknown parameter '{name}'"))),
            Some(p) if !p.trainable => {
                return Err(Error::invalid(format!(
                    "gradient present for frozen parameter '{name}'"
                )))
            }
            Some(_) => {}
        }
    }
    let missing: Vec<String> = params
        .trainable_names()
        .into_iter()
        .filter(|n| !grads.contains_key(n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing gradient for trainable parameter(s): {}",
            missing.join(", ")
        )));
    }

    let b1 = sc::<T>(cfg.beta1);
    let b2 = sc::<T>(cfg.beta2);
    let lr = sc::<T>(cfg.lr);
    let eps = sc::<T>(cfg.eps);
    let wd = sc::<T>(cfg.weight_decay);
    let one = T::one();

    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = &grads[name];
        if g.shape() != p.tensor.shape() {
            return Err(Error::shape(format!(
                "gradient for '{name}': {:?} vs parameter {:?}",
                g.shape(),
                p.tensor.shape()
            )));
        }
        p.step += 1;
        let bc1 = one - b1.powi(p.step as i32);
        let bc2 = one - b2.powi(p.step as i32);
        let theta = p.tensor.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        let gd = g.data();
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (one - b1) * gd[i];
            v[i] = b2 * v[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] = theta[i] - lr * wd * theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
            if !theta[i].is_finite() {
                return Err(Error::non_finite(format!(
                    "parameter '{name}' entry {i} after adamw step"
                )));
            }
        }
    }
    Ok(())
}
