use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{NnError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// First-moment accumulator.
    pub m: Tensor,
    /// Second-moment accumulator.
    pub v: Tensor,
}

/// Named parameters with their Adam state. Insertion order is preserved and
/// is the order used by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let zeros = Tensor::zeros(value.dims());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            m: zeros.clone(),
            v: zeros,
            value,
            grad: None,
        });
        Ok(())
    }

    /// Restore a parameter together with its optimizer moments.
    pub fn insert_with_state(&mut self, name: impl Into<String>, value: Tensor, m: Tensor, v: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if m.dims() != value.dims() || v.dims() != value.dims() {
            return Err(NnError::shape("insert_with_state", format!("moments of {name} do not match its shape")));
        }
        self.insert(name.clone(), value)?;
        let p = self.params.last_mut().expect("just inserted");
        p.m = m;
        p.v = v;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(|i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameter values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adam step counter `t`.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, t: u64) {
        self.step = t;
    }

    pub(crate) fn add_grad(&mut self, idx: usize, g: &[f64]) -> Result<(), NnError> {
        let p = &mut self.params[idx];
        if g.len() != p.value.len() {
            return Err(NnError::shape("add_grad", format!("gradient of {} has wrong length", p.name)));
        }
        match &mut p.grad {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g) {
                    *e += x;
                }
            }
            None => p.grad = Some(Tensor::new(p.value.dims().to_vec(), g.to_vec())?),
        }
        Ok(())
    }

    /// Set a gradient directly.
    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<(), NnError> {
        let p = self.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if grad.dims() != p.value.dims() {
            return Err(NnError::shape("set_grad", format!("gradient of {name} has wrong shape")));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
///
/// Fails without touching any state if some parameter has no gradient.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<(), NnError> {
    if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
        return Err(NnError::MissingGradient(p.name.clone()));
    }
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let g = p.grad.as_ref().expect("checked above").data();
        let theta = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..theta.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// He/MSRA normal initialization: N(0, 2 / fan_in).
pub fn msra_init(dims: &[usize], fan_in: usize, seed: u64) -> Result<Tensor, NnError> {
    if fan_in == 0 {
        return Err(NnError::InvalidConfig("fan_in must be at least 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(dims.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new(vec![1], vec![theta]).unwrap()).unwrap();
        s.set_grad("theta", Tensor::new(vec![1], vec![g]).unwrap()).unwrap();
        s
    }

    #[test]
    fn single_step_from_zero() {
        let mut s = scalar_store(0.0, 1.0);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        let theta = s.value("theta").unwrap().data()[0];
        // lr · 1 / (1 + ε)
        assert!((theta - (-0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((theta + 0.0009999999900).abs() < 1e-12);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut s = scalar_store(1.25, 0.0);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("theta").unwrap().data()[0], 1.25);
    }

    #[test]
    fn identical_params_update_identically() {
        let mut s = ParamStore::new();
        for name in ["a", "b"] {
            s.insert(name, Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
            s.set_grad(name, Tensor::new(vec![2], vec![0.5, 2.0]).unwrap()).unwrap();
        }
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.value("a").unwrap(), s.value("b").unwrap());
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut s = scalar_store(0.0, 1.0);
        s.insert("other", Tensor::zeros(&[3])).unwrap();
        let before = s.clone();
        assert!(matches!(adam_step(&mut s, &AdamConfig::default()), Err(NnError::MissingGradient(n)) if n == "other"));
        assert_eq!(s, before);
    }

    #[test]
    fn msra_statistics() {
        let t = msra_init(&[100_000], 2, 7).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 1.0).abs() < 0.02, "std {std}");
        assert!(mean.abs() < 0.02);
        assert_eq!(msra_init(&[4, 4], 2, 7).unwrap(), msra_init(&[4, 4], 2, 7).unwrap());
        let t200 = msra_init(&[100_000], 200, 1).unwrap();
        let std200 = (t200.data().iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        assert!((std200 - 0.1).abs() < 0.002);
    }

    #[test]
    fn msra_rejects_zero_fan_in() {
        assert!(msra_init(&[2], 0, 0).is_err());
    }
}
