//! Named parameter storage shared by all model components.
//!
//! A [`ParamStore`] owns the master copy of every weight and buffer. Each
//! training step binds parameters into a fresh tape (cloning the data, so the
//! tape never aliases the store), runs forward/backward, and applies the
//! optimizer back into the store. Initialization draws from a per-name RNG,
//! so adding or removing parameters never shifts another parameter's init.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-sqrt(6/fan_in), sqrt(6/fan_in)].
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
    Const(f32),
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { entries: Vec::new(), by_name: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.entries.push(ParamEntry { name: name.to_string(), shape, data, trainable });
        id
    }

    /// Register a trainable parameter.
    pub fn add_param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::HeUniform { fan_in } => {
                let limit = (6.0 / fan_in.max(1) as f32).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a64(name));
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        self.insert(name, shape, data, trainable_true())
    }

    /// Register a non-trainable buffer (e.g. batch-norm running statistics).
    pub fn add_buffer(&mut self, name: &str, shape: Vec<usize>, fill: f32) -> ParamId {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![fill; n], false)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        &mut self.entries[id.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total trainable scalar count, optionally restricted to a name prefix.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.numel())
            .sum()
    }
}

fn trainable_true() -> bool {
    true
}

/// One forward pass binding a store's parameters into a tape.
///
/// `training` selects batch-norm mode (batch statistics + running-average
/// update vs. frozen running statistics). `frozen` binds every parameter as
/// a constant leaf, so no gradient ever reaches the store — this is how the
/// teacher stays detached during distillation.
pub struct Run<'t, 's> {
    pub tape: &'t mut Tape,
    pub store: &'s mut ParamStore,
    bound: Vec<Option<TensorId>>,
    pub training: bool,
    pub frozen: bool,
}

impl<'t, 's> Run<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s mut ParamStore, training: bool, frozen: bool) -> Self {
        let n = store.len();
        Run { tape, store, bound: vec![None; n], training, frozen }
    }

    /// Bind a parameter into the tape (cached per run).
    pub fn p(&mut self, id: ParamId) -> Result<TensorId> {
        if self.bound.len() < self.store.len() {
            self.bound.resize(self.store.len(), None);
        }
        if let Some(t) = self.bound[id.0] {
            return Ok(t);
        }
        let e = self.store.get(id);
        let t = if self.frozen || !e.trainable {
            self.tape.leaf(e.data.clone(), e.shape.clone())?
        } else {
            self.tape.param(e.data.clone(), e.shape.clone())?
        };
        self.bound[id.0] = Some(t);
        Ok(t)
    }

    /// Read a buffer (running stats) directly from the store.
    pub fn buffer(&self, id: ParamId) -> &[f32] {
        &self.store.get(id).data
    }

    /// running = (1 - momentum) * running + momentum * batch.
    pub fn update_running(&mut self, id: ParamId, momentum: f32, batch: &[f32]) {
        let d = self.store.data_mut(id);
        for (r, b) in d.iter_mut().zip(batch) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }

    /// Pull the gradient for a bound trainable parameter after backward.
    /// Unbound or disconnected parameters yield zeros.
    pub fn grad_of(&self, id: ParamId) -> Vec<f32> {
        match self.bound[id.0] {
            Some(t) => self
                .tape
                .grad(t)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; self.store.get(id).numel()]),
            None => vec![0.0; self.store.get(id).numel()],
        }
    }
}

/// Adam optimizer state for one store's trainable parameters.
///
/// Moments are indexed by position in `trainable_ids()`, which is stable for
/// a fixed model construction order.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    ids: Vec<ParamId>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f32) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::invalid("adam", format!("learning rate must be positive, got {lr}")));
        }
        let ids = store.trainable_ids();
        let m = ids.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        let v = ids.iter().map(|id| vec![0.0; store.get(*id).numel()]).collect();
        Ok(AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v, ids })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Apply one bias-corrected Adam update. `grads[i]` corresponds to
    /// `param_ids()[i]`. A non-finite gradient aborts with the parameter name.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        assert_eq!(grads.len(), self.ids.len(), "gradient list does not match parameter list");
        for (i, id) in self.ids.iter().enumerate() {
            if !crate::kernels::all_finite(&grads[i]) {
                return Err(Error::NonFiniteGrad { name: store.get(*id).name.clone() });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in self.ids.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.data_mut(*id);
            for ((t, g), (mm, vv)) in theta.iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mm / bc1;
                let vhat = *vv / bc2;
                *t -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` to `lr_min` over `total` epochs.
pub fn cosine_lr(lr0: f32, lr_min: f32, epoch: usize, total: usize) -> f32 {
    if total <= 1 {
        return lr0;
    }
    let t = epoch as f32 / (total - 1) as f32;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f32::consts::PI * t).cos())
}
