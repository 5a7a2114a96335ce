use std::collections::HashMap;

use rand::Rng;

use super::{Float, Graph, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name `{name}`");
        self.by_name.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// He-style uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn add_he_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Places every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| graph.leaf(t.clone(), requires_grad)).collect(),
        }
    }
}

/// Parameter leaves of one [`ParamStore`] on one [`Graph`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binds existing leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order, after `backward`.
    pub fn grads<T: Float>(&self, graph: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| graph.grad(v)).collect()
    }
}
