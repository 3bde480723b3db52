use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::rng::XorShiftRng;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable tensors plus their gradient buffers.
///
/// Each store carries a process-unique id so a tape can hold parameters
/// from several stores and route gradients back to the right one.
#[derive(Debug)]
pub struct ParameterStore {
    id: u64,
    params: Vec<Parameter>,
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Matrix initialized uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut XorShiftRng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        let value = Tensor::new(vec![fan_in, fan_out], data).expect("positive dims");
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Reset every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        let buf = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (b, g) in buf.data_mut().iter_mut().zip(grad) {
            *b += g;
        }
    }

    /// Copy values from another store by parameter name, checking shapes.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::MissingKey {
                    key: p.name.clone(),
                    known: other.params.iter().map(|q| q.name.clone()).collect(),
                })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim("load_values", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Order-sensitive checksum of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        crate::rng::fnv1a(&bytes)
    }

    /// Merge another store's parameters under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterStore) {
        for p in &other.params {
            self.add(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Sub-store holding the parameters whose names start with `prefix`,
    /// with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new();
        for p in &self.params {
            if let Some(rest) = p.name.strip_prefix(prefix) {
                out.add(rest.to_string(), p.value.clone());
            }
        }
        out
    }
}
