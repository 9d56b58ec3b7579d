use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};

use super::ops;
use crate::error::{Result, TltError};
use crate::seed;

/// Named trainable tensors.
///
/// Parameters are created in a fixed order from a seeded generator, so the
/// names, shapes, count and initial values are a pure function of the model
/// configuration.
#[derive(Debug)]
pub struct ParameterStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: seed::Rng,
}

impl ParameterStore {
    pub fn new(dtype: DType, seed_value: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, rng: seed::rng(seed::derive(seed_value, &["init".into()])) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a tensor drawn from `N(0, std^2)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| TltError::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, shape, values)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.constant(name, shape, 0.0)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(TltError::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self
            .get(name)
            .ok_or_else(|| TltError::Config(format!("unknown parameter {name}")))?;
        ops::to_f64_vec(v.as_tensor())
    }

    /// Overwrites a parameter in place; every layer holding it sees the change.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self
            .get(name)
            .ok_or_else(|| TltError::Config(format!("unknown parameter {name}")))?;
        if values.len() != v.elem_count() {
            return Err(TltError::Config(format!(
                "parameter {name} holds {} values, got {}",
                v.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, v.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    /// Snapshot of every parameter, for rollback.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            if let Some(v) = self.vars.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            if ops::to_f64_vec(v.as_tensor())?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
