//! Named parameter arrays with per-array trainable flags.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{DType, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad(false));
        self.trainable.push(true);
        ParamId(self.names.len() - 1)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, dtype: DType, rng: &mut Rng) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), dtype, rng::normal_vec(rng, n, std)).expect("positive shape");
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64, dtype: DType) -> ParamId {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), dtype, vec![value; n]).expect("positive shape");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|t| *t = on);
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every array as a graph leaf, differentiated iff trainable.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| {
                let mut t = t.clone();
                t.requires_grad = tr;
                g.leaf(&t)
            })
            .collect()
    }

    pub fn cast(&self, dtype: DType) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast(dtype)).collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn records(&self) -> Vec<(&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors).collect()
    }

    /// Overwrites arrays whose names appear in `records`; shapes must match.
    /// Returns how many arrays were replaced.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<usize> {
        let mut n = 0;
        for (name, t) in records {
            if let Some(id) = self.find(name) {
                if self.tensors[id.0].shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "{name}: stored shape {:?}, expected {:?}",
                        t.shape(),
                        self.tensors[id.0].shape()
                    )));
                }
                self.tensors[id.0] = t.clone().with_grad(false);
                n += 1;
            }
        }
        Ok(n)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// `x · w + b` with `w[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, std: f64, dtype: DType, rng: &mut Rng) -> Self {
        Linear {
            w: store.add_normal(&format!("{name}.w"), &[din, dout], std, dtype, rng),
            b: store.add_const(&format!("{name}.b"), &[dout], 0.0, dtype),
        }
    }

    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.linear(x, vars[self.w.0], vars[self.b.0])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, dtype: DType) -> Self {
        Norm {
            gamma: store.add_const(&format!("{name}.gamma"), &[d], 1.0, dtype),
            beta: store.add_const(&format!("{name}.beta"), &[d], 0.0, dtype),
        }
    }

    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, vars[self.gamma.0], vars[self.beta.0])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}
