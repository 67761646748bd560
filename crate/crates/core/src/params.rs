//! Named parameters, their binding into a graph, and the Adam optimizer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::grad::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered container of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_linear_weight(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new([fan_in, fan_out], data))
    }

    /// Matrix with standard-normal entries.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: [usize; 2], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape[0] * shape[1]).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Lazily binds store parameters into one graph, one leaf per parameter.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    vars: RefCell<Vec<Option<Var<'g>>>>,
    trainable: bool,
}

impl<'g, 's> Binder<'g, 's> {
    /// Parameters become gradient-receiving leaves.
    pub fn trainable(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Binder { graph, store, vars: RefCell::new(vec![None; store.len()]), trainable: true }
    }

    /// Parameters become constants (evaluation).
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Binder { graph, store, vars: RefCell::new(vec![None; store.len()]), trainable: false }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.graph.variable(value) } else { self.graph.constant(value) };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients, `None` for parameters that were never bound
    /// or received no gradient.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.borrow().iter().map(|v| v.and_then(|v| grads.get(v).cloned())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_norm: 1.0 }
    }
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            first: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            second: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            steps: vec![0; store.len()],
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// (and keep their moment estimates). Returns the pre-clip global norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bias1 = 1.0 - c.beta1.powi(t);
            let bias2 = 1.0 - c.beta2.powi(t);
            let value = store.params[i].value.data_mut();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..value.len() {
                let gj = grad.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                value[j] -= c.learning_rate * (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.eps);
            }
        }
        norm
    }
}
