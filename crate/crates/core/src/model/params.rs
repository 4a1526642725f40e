use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Trainable weights versus running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<f32>,
}

/// Every tensor a model owns, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<f32>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
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
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// Registers parameters with deterministic initial values.
pub struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform initialisation: `U(-a, a)` with `a = sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches");
        self.store.add(name, ParamKind::Weight, t)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, len: usize, value: f32) -> ParamId {
        self.store.add(name, kind, Tensor::full(&[len], value))
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: the tape plus the mapping from parameters to leaves.
pub struct Session<'p> {
    pub tape: Tape<f32>,
    params: &'p ParamStore,
    vars: Vec<Option<Var>>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, training: bool) -> Self {
        Session {
            tape: Tape::new(),
            params,
            vars: vec![None; params.len()],
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Leaf for a parameter, created on first use. Weights require gradients
    /// in training mode only.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        let rg = self.training && entry.kind == ParamKind::Weight;
        let v = self.tape.leaf(entry.tensor.clone(), rg);
        self.vars[id.0] = Some(v);
        v
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    /// Parameters that were used in this pass, with their leaves.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies momentum updates to running statistics:
/// `running = (1 - m) * running + m * batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, &b) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
        for (r, &b) in store
            .get_mut(u.running_var)
            .data_mut()
            .iter_mut()
            .zip(&u.stats.var_unbiased)
        {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
    }
}
