//! Named parameter storage shared by model construction, optimization and
//! checkpointing.
//!
//! Parameters live outside any tape as plain buffers. Each forward pass binds
//! them onto a fresh tape as tracked leaves; after `backward` the optimizer
//! reads gradients back through the same binding table. Registration order is
//! stable and defines the checkpoint layout.
//!
//! All initial values are quantized through 32-bit floats. The checkpoint
//! format stores 32-bit values, so this guarantees a freshly built model
//! survives a save/load round trip bit-exactly even in a 64-bit build.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use rand::Rng;
use std::collections::BTreeMap;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in registration order; indexes the store's gradient vector.
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Initialization policy for a new parameter.
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform in `(-bound, bound)` with `bound = sqrt(1 / fan_in)`.
    FanInUniform { fan_in: usize },
    /// Explicit per-element values (computed by the caller).
    Values(Vec<f64>),
}

struct Param<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Ordered collection of named parameters.
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, usize>,
}

/// Maps every parameter of a store to its leaf on one particular tape.
pub struct Bindings {
    ids: Vec<TensorId>,
}

impl Bindings {
    pub fn get(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

fn quantize<T: Scalar>(v: f64) -> T {
    T::from_f64(v as f32 as f64)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    /// Register a parameter under a unique dotted name.
    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name '{name}'")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(v) => vec![quantize(v); n],
            Init::FanInUniform { fan_in } => {
                let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| quantize(rng.random_range(-bound..bound))).collect()
            }
            Init::Values(vs) => {
                if vs.len() != n {
                    return Err(Error::shape(format!(
                        "init values length {} does not match shape {:?}",
                        vs.len(),
                        shape
                    )));
                }
                vs.into_iter().map(quantize).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.params[p.0].name
    }

    pub fn shape(&self, p: ParamId) -> &[usize] {
        &self.params[p.0].shape
    }

    pub fn data(&self, p: ParamId) -> &[T] {
        &self.params[p.0].data
    }

    pub fn data_mut(&mut self, p: ParamId) -> &mut [T] {
        &mut self.params[p.0].data
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// All parameters in registration order.
    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Push every parameter onto `tape` as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bindings> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(&p.shape, p.data.clone())?);
        }
        Ok(Bindings { ids })
    }

    /// Collect `d(root)/d(param)` for every parameter after a backward pass,
    /// zeros where a parameter did not participate.
    pub fn gradients(&self, tape: &Tape<T>, bindings: &Bindings) -> Vec<Vec<T>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                tape.grad(bindings.ids[i])
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.data.len()])
            })
            .collect()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
