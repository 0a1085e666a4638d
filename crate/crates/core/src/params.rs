//! Named, ordered collection of trainable arrays.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), frozen: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push_with(name, value, false)
    }

    /// Registers an array that is stored and checkpointed but never receives gradient.
    pub fn push_frozen(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.push_with(name, value, true)
    }

    fn push_with(&mut self, name: &str, value: Tensor<T>, frozen: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.frozen.push(frozen);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }

    /// Places every array on `tape`; frozen arrays become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .zip(&self.frozen)
            .map(|(t, &frozen)| if frozen { tape.constant(t.clone()) } else { tape.param(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Gradients of every parameter after a backward pass; zeros where none flowed.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| match tape.grad(v) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).expect("gradient shape equals value shape"),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Tape handles for a bound [`ParamSet`], indexed like the set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<T: Scalar, R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = rand_distr::Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| crate::scalar::lit(rand_distr::Distribution::sample(&dist, rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}
