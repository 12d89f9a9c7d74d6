use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{NumericError, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is filled when first created.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, for affine maps.
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    /// Normal with mean zero, for embedding banks.
    Normal {
        std: f64,
    },
    Constant(f64),
    Zeros,
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(shape);
        match *self {
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("non-negative std");
                t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
            }
            Init::Constant(c) => t.data_mut().iter_mut().for_each(|v| *v = c),
            Init::Zeros => {}
        }
        t
    }
}

/// A named, trainable tensor together with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub init: Init,
}

/// Owns every learned tensor of a model, addressed by [`ParamId`] or name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = init.sample(shape, rng);
        self.insert(name.into(), value, init)
    }

    pub fn insert(&mut self, name: String, value: Tensor, init: Init) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            init,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericError> {
        let id = self
            .id(name)
            .ok_or_else(|| NumericError::UnknownParameter(name.to_string()))?;
        Ok(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies the values of `other` into `self`; both stores must share a layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NumericError> {
        if self.params.len() != other.params.len() {
            return Err(NumericError::Checkpoint(format!(
                "parameter count differs: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(NumericError::Checkpoint(format!(
                    "parameter layout differs at {}",
                    dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
