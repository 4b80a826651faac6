use std::collections::HashMap;

use rand::Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Named parameter set with insertion-order iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    entries: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if the name is already taken.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.push(Parameter {
            name,
            value,
            grad,
            requires_grad: true,
        });
        ParamId(id)
    }

    /// Glorot-uniform weight in `±√(6/(fan_in+fan_out))`.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(fan_in, fan_out, data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }
}
