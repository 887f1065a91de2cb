//! Named parameter storage and per-tape binding.

use std::collections::HashMap;

use rand::Rng;

use super::NnError;
use crate::scalar::Scalar;
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

/// Handle of a trainable parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle of a non-trainable buffer (batchnorm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam: AdamState<T>,
}

#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Parameters and buffers of one model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    pub(crate) params: Vec<Param<T>>,
    pub(crate) buffers: Vec<Buffer<T>>,
    names: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<(), NnError> {
        if self.names.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.names.insert(name.to_string(), self.names.len());
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, NnError> {
        self.claim(name)?;
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            adam: AdamState::new(n),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId, NnError> {
        self.claim(name)?;
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    /// Fan-in scaled normal init, `std = sqrt(2 / fan_in)`.
    pub fn add_weight<R: Rng + ?Sized>(&mut self, name: &str, dims: &[usize], rng: &mut R) -> Result<ParamId, NnError> {
        let fan_in: usize = dims[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        self.add_param(name, Tensor::randn(dims, std, rng))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars; buffers are not counted.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Every tensor (parameters then buffers) with its name.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    /// Overwrites a parameter or buffer by name, checking dims.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<(), NnError> {
        let slot = if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            &mut p.value
        } else if let Some(b) = self.buffers.iter_mut().find(|b| b.name == name) {
            &mut b.value
        } else {
            return Err(NnError::UnknownParam(name.to_string()));
        };
        if slot.dims() != value.dims() {
            return Err(NnError::Shape {
                name: name.to_string(),
                expected: slot.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// Maps parameters onto one tape. Each parameter is recorded once, so a
/// parameter used by several branches accumulates all their gradients.
#[derive(Debug, Default)]
pub struct Binder {
    bound: HashMap<ParamId, Var>,
    order: Vec<ParamId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = store.params[id.0].value.clone();
        let v = if trainable { tape.param(value) } else { tape.constant(value) };
        self.bound.insert(id, v);
        self.order.push(id);
        v
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(&id).copied()
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.order.iter().map(|id| (*id, self.bound[id]))
    }
}

/// One Adam step on every bound parameter that received a gradient.
pub fn adam_update<T: Scalar>(store: &mut ParamStore<T>, binder: &Binder, tape: &Tape<T>, lr: f64) -> Result<(), NnError> {
    for (id, var) in binder.bound() {
        if let Some(g) = tape.grad(var) {
            let p = &mut store.params[id.0];
            adam_step(&mut p.value, g, &mut p.adam, lr)?;
        }
    }
    Ok(())
}
