use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Error, PartialEq)]
pub enum TrainingError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value in `{0}`")]
    NonFinite(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownName(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Named trainable tensors with per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    moments: Vec<Moments<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), moments: Vec::new(), index: HashMap::new(), step: 0 }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId, TrainingError> {
        if self.index.contains_key(name) {
            return Err(TrainingError::DuplicateName(name.to_string()));
        }
        let n = tensor.data.len();
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(Tensor { requires_grad: true, grad: None, ..tensor });
        self.moments.push(Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId, TrainingError> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Uniform `±bound` initialization.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<ParamId, TrainingError> {
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Adds the gradients of every parameter leaf on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (id, leaf) in tape.param_leaves() {
            if let Some(g) = &leaf.grad {
                let slot = &mut self.tensors[id.0].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> T {
        self.tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// One bias-corrected Adam update; gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), TrainingError> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if t.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainingError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - T::lit(cfg.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(cfg.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for (t, mom) in self.tensors.iter_mut().zip(&mut self.moments) {
            let Some(g) = t.grad.take() else { continue };
            for i in 0..g.len() {
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g[i];
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                t.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Same parameters in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.add(name, Tensor::new(&t.shape, t.data.iter().map(|v| U::lit(v.as_f64())).collect()))
                .expect("names already unique");
        }
        out
    }

    /// Optimizer state for serialization: `(step, [(m, v)])` in parameter order.
    pub fn optimizer_state(&self) -> (u64, Vec<(&[T], &[T])>) {
        (self.step, self.moments.iter().map(|m| (m.m.as_slice(), m.v.as_slice())).collect())
    }

    pub fn set_optimizer_state(&mut self, step: u64, moments: Vec<(Vec<T>, Vec<T>)>) -> Result<(), TrainingError> {
        if moments.len() != self.moments.len() {
            return Err(TrainingError::ShapeMismatch {
                name: "optimizer state".into(),
                expected: vec![self.moments.len()],
                found: vec![moments.len()],
            });
        }
        for (i, (m, v)) in moments.into_iter().enumerate() {
            let n = self.tensors[i].data.len();
            if m.len() != n || v.len() != n {
                return Err(TrainingError::ShapeMismatch {
                    name: format!("optimizer state of {}", self.names[i]),
                    expected: vec![n],
                    found: vec![m.len()],
                });
            }
            self.moments[i] = Moments { m, v };
        }
        self.step = step;
        Ok(())
    }

    /// Overwrites values of an existing parameter.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), TrainingError> {
        let id = self.id(name).ok_or_else(|| TrainingError::UnknownName(name.to_string()))?;
        let cur = &mut self.tensors[id.0];
        if cur.shape != tensor.shape {
            return Err(TrainingError::ShapeMismatch { name: name.to_string(), expected: cur.shape.clone(), found: tensor.shape });
        }
        cur.data = tensor.data;
        Ok(())
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize, TrainingError> {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.set(name, Tensor::new(&t.shape, t.data.clone()))?;
            copied += 1;
        }
        Ok(copied)
    }

    pub fn check_finite(&self) -> Result<(), TrainingError> {
        match self.iter().find(|(_, t)| !t.all_finite()) {
            Some((name, _)) => Err(TrainingError::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::scalar(0.0)).unwrap();
        s.tensor_mut(id).grad = Some(vec![1.0]);
        s.adam_step(&AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        assert!((s.tensor(id).data[0] + 0.1).abs() < 1e-6);
        assert!(s.tensor(id).grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::new(&[2], vec![1.5, -2.0])).unwrap();
        s.tensor_mut(id).grad = Some(vec![0.0, 0.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.tensor(id).data, vec![1.5, -2.0]);
    }

    #[test]
    fn identical_stores_step_identically() {
        let mut a = ParamStore::<f32>::new();
        let id = a.add("w", Tensor::new(&[3], vec![0.3, -0.1, 2.0])).unwrap();
        let mut b = a.clone();
        for s in [&mut a, &mut b] {
            s.tensor_mut(id).grad = Some(vec![0.5, -1.0, 0.25]);
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = ParamStore::<f32>::new();
        s.add("ok", Tensor::scalar(0.0)).unwrap();
        let bad = s.add("bev.conv1.w", Tensor::scalar(0.0)).unwrap();
        s.tensor_mut(bad).grad = Some(vec![f32::NAN]);
        assert_eq!(s.adam_step(&AdamConfig::default()), Err(TrainingError::NonFiniteGradient("bev.conv1.w".into())));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.zeros("a", &[1]).unwrap();
        assert!(matches!(s.zeros("a", &[2]), Err(TrainingError::DuplicateName(_))));
    }
}
