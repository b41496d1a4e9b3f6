//! Named parameter storage shared by all model modules.
//!
//! Parameters are registered once at model construction and addressed by
//! stable dotted names ("se.block0.intra.w_fwd", ...). The name prefix before
//! the first dot identifies the owning module ("ee", "se", "aad"), which is
//! what freezing and checkpoint loading key on.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::nn::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Ids whose name starts with `prefix` followed by a dot.
    pub fn module_ids(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix) && n[prefix.len()..].starts_with('.'))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian bytes of a module's
    /// parameters; used by the freeze contract tests and run logs.
    pub fn module_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for id in self.module_ids(prefix) {
            let v = self.value(id);
            h.update(self.name(id).as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binds parameters onto one tape, caching so each parameter is a single
/// leaf even when used by several layers. After `Tape::backward`, gradients
/// are read back through the same binding.
pub struct Binder<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    bound: RefCell<HashMap<usize, Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id.0) {
            return *v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound.borrow_mut().insert(id.0, v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Collects gradients for every bound parameter (zeros when a parameter
    /// did not participate in the graph).
    pub fn collect(&self, grads: &crate::nn::tape::Gradients) -> GradMap {
        let mut out = HashMap::new();
        for (&id, &var) in self.bound.borrow().iter() {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(self.store.value(ParamId(id)).dim()));
            out.insert(ParamId(id), g);
        }
        GradMap { grads: out }
    }
}

/// Per-parameter gradients keyed by id.
#[derive(Default)]
pub struct GradMap {
    pub grads: HashMap<ParamId, Array2<f64>>,
}

impl GradMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates `other` into `self` (used for batch averaging).
    pub fn accumulate(&mut self, other: &GradMap) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }
}

// ---- initializers ----

/// Uniform Glorot/Xavier init for a weight of the given fan-in/out.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}
