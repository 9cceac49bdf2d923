use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named model parameters. Iteration order is the sorted name order, which
/// fixes every reduction and update order that walks the store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        ensure!(
            !self.params.contains_key(&name),
            InvalidArgument,
            "parameter {name} registered twice"
        );
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Fills in zero gradients for store parameters the loss never touched.
    pub fn complete(&mut self, store: &ParameterStore) {
        for (name, p) in store.iter() {
            self.by_name
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with a constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub(crate) first: BTreeMap<String, Vec<f64>>,
    pub(crate) second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        ensure!(config.lr > 0.0, InvalidArgument, "learning rate must be positive");
        Ok(Adam {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn update(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (name, param) in store.params.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            param.value.check_same_shape(g, name)?;
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.first.iter().map(|(k, m)| {
            let v = &self.second[k];
            (k.as_str(), m.as_slice(), v.as_slice())
        })
    }

    pub fn set_moments(&mut self, name: &str, first: Vec<f64>, second: Vec<f64>) {
        self.first.insert(name.to_string(), first);
        self.second.insert(name.to_string(), second);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::matrix(1, 2, vec![1.0, -1.0]), true).unwrap();
        s.insert("frozen", Tensor::matrix(1, 1, vec![3.0]), false).unwrap();
        let mut g = Gradients::default();
        g.by_name.insert("w".into(), Tensor::matrix(1, 2, vec![0.5, -2.0]));
        g.by_name.insert("frozen".into(), Tensor::matrix(1, 1, vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.update(&mut s, &g).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-4)).abs() < 1e-9);
        assert_eq!(s.get("frozen").unwrap().data(), &[3.0]);
    }
}
