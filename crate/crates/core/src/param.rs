//! Named, swappable parameter slots.
//!
//! A [`Param`] holds the current value as an immutable leaf [`Tensor`];
//! updates replace the leaf. Names encode the module path
//! (`stage2.block0.ivla.omega_v1.weight`) and are unique per [`ParamStore`].

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    TruncatedNormal(f64),
}

impl Init {
    pub fn sample(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => rng.vec_uniform(n, -a, a),
            Init::TruncatedNormal(std) => (0..n).map(|_| rng.truncated_normal(std)).collect(),
        }
    }
}

#[derive(Debug)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    value: RefCell<Tensor>,
}

pub type ParamRef = Rc<Param>;

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn value(&self) -> Tensor {
        self.value.borrow().clone()
    }

    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let t = if self.trainable {
            Tensor::variable(data, &self.shape)?
        } else {
            Tensor::new(data, &self.shape)?
        };
        *self.value.borrow_mut() = t;
        Ok(())
    }

    pub fn fill(&self, value: f64) {
        self.set_data(vec![value; self.numel()]).expect("same shape");
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.borrow().grad().map(|g| g.clone())
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }
}

/// Registry of every parameter and buffer of a model, in creation order.
#[derive(Default, Debug)]
pub struct ParamStore {
    params: Vec<ParamRef>,
    names: HashSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<ParamRef> {
        if !self.names.insert(name.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let value = if trainable {
            Tensor::variable(data, shape)?
        } else {
            Tensor::new(data, shape)?
        };
        let p = Rc::new(Param {
            name,
            shape: shape.to_vec(),
            trainable,
            value: RefCell::new(value),
        });
        self.params.push(p.clone());
        Ok(p)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut Rng) -> Result<ParamRef> {
        let data = init.sample(numel(shape), rng);
        self.insert(name.into(), shape, data, true)
    }

    /// Non-trainable state (running statistics, frozen embeddings).
    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<ParamRef> {
        self.insert(name.into(), shape, data, false)
    }

    pub fn all(&self) -> &[ParamRef] {
        &self.params
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamRef> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|p| p.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }

    /// Sets every trainable parameter whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&self, prefix: &str, value: f64) {
        self.trainable().filter(|p| p.name.starts_with(prefix)).for_each(|p| p.fill(value));
    }
}
