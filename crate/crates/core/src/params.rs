//! Named parameter storage and the per-pass forward context.

use std::collections::HashSet;

use pavescan_tensor::{BatchStats, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but never trained.
    pub trainable: bool,
}

/// Ordered, named collection of every array a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replaces every value from `other`, which must match names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: expected {}, got {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Creates parameters under a hierarchical name prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, value, trainable)
    }

    /// Centered uniform weights with bound `1 / sqrt(fan_in)`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)));
        self.tensor(leaf, value, true)
    }
}

/// Training mode switches batch norm to batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: the tape, the parameter variables, collected
/// batch-norm statistics and named intermediate outputs.
pub struct Session<'a, T: Real> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
    mode: Mode,
    bn_stats: Vec<(ParamId, ParamId, BatchStats<T>)>,
    taps: Vec<(String, Var)>,
    retain: HashSet<String>,
    cbam_gate: Option<T>,
}

impl<'a, T: Real> Session<'a, T> {
    /// Registers every parameter on the tape. Trainable entries become
    /// gradient leaves when `track_grads` is set.
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        let vars = store
            .entries()
            .iter()
            .map(|e| tape.leaf(e.value.clone(), track_grads && e.trainable))
            .collect();
        Self::with_vars(tape, store, vars, mode)
    }

    /// Uses caller-provided variables, one per store entry in order.
    pub fn with_vars(tape: &'a Tape<T>, store: &'a ParamStore<T>, vars: Vec<Var>, mode: Mode) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self {
            tape,
            store,
            vars,
            mode,
            bn_stats: Vec::new(),
            taps: Vec::new(),
            retain: HashSet::new(),
            cbam_gate: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    /// Replace every CBAM block by multiplication with a constant gate.
    pub fn set_cbam_gate(&mut self, gate: Option<T>) {
        self.cbam_gate = gate;
    }

    pub fn cbam_gate(&self) -> Option<T> {
        self.cbam_gate
    }

    /// Keep the gradient of the named layer output after backward.
    pub fn retain_layer(&mut self, name: &str) {
        self.retain.insert(name.to_string());
    }

    pub(crate) fn tap(&mut self, name: String, v: Var) {
        if self.retain.contains(&name) {
            self.tape.retain_grad(v);
        }
        self.taps.push((name, v));
    }

    /// Output of a named layer recorded during the forward pass.
    pub fn layer_output(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.taps.iter().map(|(n, _)| n.as_str())
    }

    pub(crate) fn push_bn_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.bn_stats.push((mean, var, stats));
    }

    /// Batch statistics gathered in training mode, keyed by the running
    /// mean/variance parameters they update.
    pub fn take_bn_stats(&mut self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Applies collected batch statistics to the running buffers.
pub fn apply_bn_stats<T: Real>(
    store: &mut ParamStore<T>,
    stats: &[(ParamId, ParamId, BatchStats<T>)],
    momentum: T,
) {
    for (mean_id, var_id, s) in stats {
        let mut mean = store.get(*mean_id).clone();
        let mut var = store.get(*var_id).clone();
        s.update_running(mean.data_mut(), var.data_mut(), momentum);
        *store.get_mut(*mean_id) = mean;
        *store.get_mut(*var_id) = var;
    }
}
