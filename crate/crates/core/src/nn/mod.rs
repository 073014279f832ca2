//! Named parameters, forward sessions and the layers the models are built from.

mod adam;
mod checkpoint;
mod layers;

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tape, Var};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_params, save_params, CheckpointError};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, DepthwiseConv2d, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real> {
    pub value: ArrayD<F>,
    /// Buffers such as running statistics are stored but not optimized.
    pub trainable: bool,
}

/// All tensors of a model keyed by dotted name. Iteration order is the
/// lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let value = p.value.mapv(|v| G::of(v.to_f64().expect("finite")));
                    (k.clone(), Param { value, trainable: p.trainable })
                })
                .collect(),
        }
    }
}

/// Registers freshly initialized parameters, drawing from one seeded stream so
/// initialization depends only on the seed and construction order.
pub struct Init<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<'a, F: Real> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::of(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), true);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store
            .insert(name, ArrayD::from_elem(IxDyn(shape), F::of(value)), true);
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store
            .insert(name, ArrayD::from_elem(IxDyn(shape), F::of(value)), false);
    }
}

/// One forward pass over a [`ParamStore`]: hands out tape variables for
/// parameters and collects running-statistic updates.
pub struct Session<'t, 'p, F: Real> {
    tape: &'t Tape<F>,
    store: &'p ParamStore<F>,
    training: bool,
    track_grads: bool,
    vars: RefCell<BTreeMap<String, Var<'t, F>>>,
    updates: RefCell<Vec<(String, ArrayD<F>)>>,
}

impl<'t, 'p, F: Real> Session<'t, 'p, F> {
    pub fn new(tape: &'t Tape<F>, store: &'p ParamStore<F>, training: bool, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            training,
            track_grads,
            vars: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// The tape variable for parameter `name`, created on first use.
    pub fn param(&self, name: &str) -> Var<'t, F> {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = self
            .tape
            .leaf(p.value.clone(), self.track_grads && p.trainable);
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> &'p ArrayD<F> {
        &self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
            .value
    }

    pub fn record_update(&self, name: &str, value: ArrayD<F>) {
        self.updates.borrow_mut().push((name.to_string(), value));
    }

    /// Parameter variables used in this pass and the pending buffer updates.
    pub fn finish(self) -> (BTreeMap<String, Var<'t, F>>, Vec<(String, ArrayD<F>)>) {
        (self.vars.into_inner(), self.updates.into_inner())
    }
}

impl<F: Real> ParamStore<F> {
    pub fn apply_updates(&mut self, updates: Vec<(String, ArrayD<F>)>) {
        for (name, value) in updates {
            let p = self
                .entries
                .get_mut(&name)
                .unwrap_or_else(|| panic!("unknown buffer {name}"));
            p.value = value;
        }
    }
}
