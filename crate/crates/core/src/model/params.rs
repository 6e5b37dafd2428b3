use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vabs_autodiff::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Handle of one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(−a, a) with a = √(6 / (fan_in + fan_out)).
    Glorot,
}

/// Named parameter tensors in a stable creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let t = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Ones => Tensor::filled(rows, cols, 1.0),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
                Tensor::new(rows, cols, data).expect("shape")
            }
        };
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces a parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Records every parameter on `tape`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
    }
}

/// Tape variables of a recorded [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars(pub(crate) Vec<Var>);

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradient of every parameter, zeros where none flowed.
    pub fn collect_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }
}
