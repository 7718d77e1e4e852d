//! Named parameter storage shared by students and teachers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{AptError, Result};
use crate::tensor::{Dtype, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// A frozen store enters every graph as constants, so no backward pass can
/// produce a gradient for it.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    dtype: Dtype,
    frozen: bool,
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            dtype: self.dtype,
            frozen: self.frozen,
            names: self.names.clone(),
            values: self.values.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new(dtype: Dtype) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            dtype,
            frozen: false,
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.to_dtype(self.dtype));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(AptError::Incompatible {
                name: self.names[id.0].clone(),
                detail: format!("shape {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value.to_dtype(self.dtype);
        Ok(())
    }

    /// Optimizer entry point for in-place updates.
    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Changes the storage precision of every parameter.
    pub fn set_dtype(&mut self, dtype: Dtype) {
        self.dtype = dtype;
        for v in &mut self.values {
            *v = v.to_dtype(dtype);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            hasher.update(name.as_bytes());
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in value.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, dtype: Dtype) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], dtype, |_| rng.gen_range(-limit..limit))
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, dtype: Dtype) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(shape, dtype, |_| dist.sample(rng))
}

/// Initialization rule for a freshly created parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

/// Where module constructors obtain their parameters: either freshly
/// initialized into a store, or looked up by name in an existing one.
pub trait ParamSource {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId>;
}

pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamSource for Initializer<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let dtype = self.store.dtype();
        let value = match init {
            Init::Xavier => {
                assert_eq!(shape.len(), 2, "xavier init needs a matrix");
                xavier_uniform(self.rng, shape[0], shape[1], dtype)
            }
            Init::Zeros => Tensor::zeros(shape, dtype),
            Init::Ones => Tensor::ones(shape, dtype),
            Init::Normal(std) => normal_init(self.rng, shape, std, dtype),
        };
        Ok(self.store.add(name, value))
    }
}

pub struct Binder<'a> {
    pub store: &'a ParamStore,
}

impl ParamSource for Binder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| AptError::Checkpoint(format!("missing parameter `{name}`")))?;
        if self.store.get(id).shape() != shape {
            return Err(AptError::Incompatible {
                name: name.to_string(),
                detail: format!("stored shape {:?}, expected {shape:?}", self.store.get(id).shape()),
            });
        }
        Ok(id)
    }
}
