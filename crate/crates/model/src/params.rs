//! Named parameter store with tape binding and checkpoint round-trips.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use resplat_autodiff::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};

use crate::error::ModelError;

/// Ordered collection of named parameter tensors. Registration order is the
/// optimizer and checkpoint order, so it must be deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index.insert(name.to_string(), self.tensors.len()).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Bytes the parameter payload occupies when serialized as f32.
    pub fn payload_bytes(&self) -> usize {
        self.param_count() * 4
    }

    /// Load every parameter onto a tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = HashMap::with_capacity(self.names.len());
        let mut ordered = Vec::with_capacity(self.names.len());
        for (name, tensor) in self.names.iter().zip(&self.tensors) {
            let v = tape.leaf(tensor.clone());
            vars.insert(name.clone(), v);
            ordered.push(v);
        }
        Bound { vars, ordered }
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &str) -> Result<(), ModelError> {
        let pairs: Vec<(String, &Tensor)> =
            self.names.iter().cloned().zip(self.tensors.iter()).collect();
        save_checkpoint(path, meta, &pairs)?;
        Ok(())
    }

    /// Load a checkpoint written by [`ParamStore::save`], keeping stored order.
    pub fn load(path: impl AsRef<Path>) -> Result<(String, ParamStore), ModelError> {
        let (meta, tensors) = load_checkpoint(path)?;
        let mut store = ParamStore::new();
        for (name, tensor) in tensors {
            if store.index.contains_key(&name) {
                return Err(ModelError::Checkpoint(format!("duplicate tensor name {name}")));
            }
            store.add(&name, tensor);
        }
        Ok((meta, store))
    }
}

/// Per-tape leaf handles for every parameter, resolvable by name.
pub struct Bound {
    vars: HashMap<String, Var>,
    ordered: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients in registration order, ready for the optimizer.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.ordered.iter().map(|v| tape.grad(*v).cloned()).collect()
    }
}

/// Xavier-style normal initialization for a dense layer weight.
pub fn linear_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| standard_normal(rng) * std).collect();
    Tensor::new(vec![rows, cols], data)
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}
