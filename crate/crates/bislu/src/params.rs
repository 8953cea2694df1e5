//! Named parameter storage shared by the encoder, the model heads, and the
//! optimizer. Parameters live here between steps; per step they are bound
//! onto a fresh tape as leaves, and gradients are harvested back after the
//! backward pass.

use std::collections::BTreeMap;

use crate::autodiff::{RngState, Scalar, Tape, Tensor, Var};

/// Stable handle to one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Xavier-uniform matrix: entries from ±sqrt(6 / (rows + cols)).
    /// Draws happen in f64 so f32 and f64 stores see identical values.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut RngState,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        assert!(shape.len() >= 2, "xavier init needs ≥2 dims, got {shape:?}");
        let fan_in: usize = shape[1..].iter().product();
        let fan_out = shape[0];
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<F> = (0..numel)
            .map(|_| F::from_f64(rng.uniform(-limit, limit)))
            .collect();
        self.add(name, Tensor::param(shape.to_vec(), data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, Tensor::param(shape.to_vec(), vec![F::ZERO; numel]))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        self.add(name, Tensor::param(shape.to_vec(), vec![F::ONE; numel]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// Record every parameter as a leaf on `tape`, in registration order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf_tensor(t))
            .collect();
        Bound { vars }
    }

    /// Accumulate tape gradients of the bound leaves into the stored
    /// tensors' grad buffers.
    pub fn harvest_grads(&mut self, tape: &Tape<F>, bound: &Bound) {
        assert_eq!(bound.vars.len(), self.tensors.len());
        for (tensor, &var) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// All parameter values flattened in registration order, as f64.
    pub fn flat_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for t in &self.tensors {
            out.extend(t.data.iter().map(|v| v.to_f64()));
        }
        out
    }

    /// Overwrite all parameter values from a flat f64 vector.
    pub fn load_flat_f64(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.total_values(),
            "flat vector length {} does not match parameter count {}",
            flat.len(),
            self.total_values()
        );
        let mut off = 0;
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = F::from_f64(flat[off]);
                off += 1;
            }
        }
    }

    /// Human-readable name of the parameter owning flat index `i`, with the
    /// offset inside that tensor.
    pub fn locate_flat(&self, i: usize) -> (String, usize) {
        let mut off = 0;
        for (name, t) in self.iter() {
            if i < off + t.numel() {
                return (name.to_string(), i - off);
            }
            off += t.numel();
        }
        panic!("flat index {i} beyond {} parameters", self.total_values());
    }
}

/// Tape leaves for one binding of a ParamSet, in registration order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
