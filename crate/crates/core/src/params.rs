//! Named trainable parameters and their Adam state.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub state: AdamState,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    grads_pending: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let len = value.len();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            state: AdamState::new(len),
        });
        self.index.insert(name, id);
        Ok(id)
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

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn state(&self, id: ParamId) -> &AdamState {
        &self.params[id.0].state
    }

    pub(crate) fn state_mut(&mut self, id: ParamId) -> &mut AdamState {
        &mut self.params[id.0].state
    }

    /// Overwrites the optimizer state of `id`; lengths must match.
    pub fn copy_state(&mut self, id: ParamId, state: &AdamState) {
        debug_assert_eq!(self.params[id.0].state.m.len(), state.m.len());
        self.params[id.0].state = state.clone();
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `grad += scale * g`, allocating the buffer on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64], scale: f64) {
        let p = &mut self.params[id.0];
        let buf = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()))
            .data_mut();
        debug_assert_eq!(buf.len(), g.len());
        buf.iter_mut().zip(g).for_each(|(b, g)| *b += scale * g);
        self.grads_pending = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
        self.grads_pending = false;
    }

    /// Applies one Adam update to every parameter, then clears gradients.
    /// Parameters that received no gradient are treated as having a zero
    /// gradient.
    pub fn adam_step(&mut self, adam: &Adam) -> Result<()> {
        if !self.grads_pending {
            return Err(Error::TrainingState(
                "adam_step called without gradients from a backward pass".into(),
            ));
        }
        for p in &mut self.params {
            let st = &mut p.state;
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - adam.beta1.powi(t);
            let bc2 = 1.0 - adam.beta2.powi(t);
            let grad = p.grad.as_ref().map(Tensor::data);
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                st.m[i] = adam.beta1 * st.m[i] + (1.0 - adam.beta1) * g;
                st.v[i] = adam.beta2 * st.v[i] + (1.0 - adam.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                value[i] -= adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Initializers for freshly created parameters.
pub mod init {
    use super::*;

    pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let dist = Uniform::new_inclusive(lo, hi).expect("valid bounds");
        let len = shape.iter().product();
        let data = (0..len).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Glorot/Xavier uniform with the given fan-in and fan-out.
    pub fn xavier<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, -bound, bound)
    }

    /// Xavier for a plain `out x in` weight matrix.
    pub fn xavier_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
        xavier(rng, &[rows, cols], cols, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> (ParameterStore, ParamId) {
        let mut store = ParameterStore::new();
        let id = store.add("w", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut store, _) = scalar_store(1.0);
        assert!(matches!(
            store.add("w", Tensor::scalar(0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let (mut store, id) = scalar_store(1.5);
        store.accumulate_grad(id, &[0.0], 1.0);
        store.adam_step(&Adam::new(0.1)).unwrap();
        assert_eq!(store.value(id).data(), &[1.5]);
        assert_eq!(store.state(id).step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut store, id) = scalar_store(1.0);
        store.accumulate_grad(id, &[1.0], 1.0);
        store.adam_step(&Adam::new(0.1)).unwrap();
        // m_hat = 1, sqrt(v_hat) = 1
        approx::assert_abs_diff_eq!(store.value(id).data()[0], 0.9, epsilon = 1e-7);
        assert!(store.grad(id).is_none());
    }

    #[test]
    fn missing_gradients_is_an_error() {
        let (mut store, _) = scalar_store(1.0);
        assert!(matches!(
            store.adam_step(&Adam::default()),
            Err(Error::TrainingState(_))
        ));
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let (mut store, id) = scalar_store(5.0);
        let adam = Adam::new(0.1);
        let mut prev = 25.0;
        for _ in 0..10 {
            let w = store.value(id).data()[0];
            store.accumulate_grad(id, &[2.0 * w], 1.0);
            store.adam_step(&adam).unwrap();
            let w = store.value(id).data()[0];
            assert!(w * w < prev);
            prev = w * w;
        }
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let (mut store, id) = scalar_store(2.0);
        for _ in 0..5 {
            store.accumulate_grad(id, &[3.0], 1.0);
            store.adam_step(&Adam::new(0.0)).unwrap();
        }
        assert_eq!(store.value(id).data(), &[2.0]);
    }
}
