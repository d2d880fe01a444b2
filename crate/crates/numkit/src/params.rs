use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::io::{read_container_file, write_container_file};
use crate::{NumError, Result, Tensor2};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) const PARAM_MAGIC: [u8; 4] = *b"ANVP";

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameters with gradient accumulators and Adam moment buffers.
///
/// The store carries an identity and a version. Every mutation of parameter
/// values bumps the version, which lets a forward tape detect that it was
/// recorded against weights that no longer exist.
#[derive(Debug, Clone)]
pub struct ParamStore {
    id: u64,
    version: u64,
    step: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            step: 0,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Number of Adam steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Config(format!("duplicate parameter name {name:?}")));
        }
        let (r, c) = value.shape();
        let idx = self.params.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        self.index.insert(name, idx);
        self.version += 1;
        Ok(ParamId(idx))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter value. Invalidates outstanding tapes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        self.version += 1;
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Flat copy of all gradients in parameter order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    /// Flat copy of all values in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn scalar_mut(&mut self, flat: usize) -> &mut f64 {
        let mut rest = flat;
        for p in &mut self.params {
            if rest < p.value.len() {
                self.version += 1;
                return &mut p.value.data_mut()[rest];
            }
            rest -= p.value.len();
        }
        panic!("flat parameter index {flat} out of range");
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Write all parameter values in the `ANVP` container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with(path, &[])
    }

    /// Like [`ParamStore::save`], appending non-parameter tensors (e.g. input
    /// statistics) that [`ParamStore::load_values`] hands back as extras.
    pub fn save_with(&self, path: impl AsRef<Path>, extras: &[(&str, &Tensor2)]) -> Result<()> {
        let mut tensors: Vec<(&str, &Tensor2)> = self.named_values().collect();
        tensors.extend_from_slice(extras);
        write_container_file(path, PARAM_MAGIC, &[], &tensors)
    }

    /// Overwrite values of an existing layout from an `ANVP` file. Names and
    /// shapes must match exactly; extra tensors in the file are returned.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> Result<Vec<(String, Tensor2)>> {
        let (_, tensors) = read_container_file(path, PARAM_MAGIC, 0)?;
        self.assign_values(tensors)
    }

    /// Overwrite values by name; tensors whose names are not parameters are
    /// handed back untouched.
    pub fn assign_values(&mut self, tensors: Vec<(String, Tensor2)>) -> Result<Vec<(String, Tensor2)>> {
        let mut extra = Vec::new();
        let mut seen = 0usize;
        for (name, t) in tensors {
            match self.index.get(&name) {
                Some(&i) => {
                    if self.params[i].value.shape() != t.shape() {
                        return Err(NumError::Dimension(format!(
                            "parameter {name}: file has {:?}, model expects {:?}",
                            t.shape(),
                            self.params[i].value.shape()
                        )));
                    }
                    self.params[i].value = t;
                    seen += 1;
                }
                None => extra.push((name, t)),
            }
        }
        if seen != self.params.len() {
            return Err(NumError::Format(format!(
                "file provides {seen} of {} parameters",
                self.params.len()
            )));
        }
        self.version += 1;
        Ok(extra)
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update, then zero all gradients.
///
/// Parameters whose gradient is identically zero are skipped entirely
/// (value and moments untouched), so a step with no gradient signal is a
/// no-op on the weights. The step counter always advances.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(NumError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.eps > 0.0) {
        return Err(NumError::Config("adam betas must lie in [0,1) and eps > 0".into()));
    }
    if store.params.iter().any(|p| !p.grad.is_finite()) {
        return Err(NumError::NonFinite("gradient".into()));
    }
    store.step += 1;
    let t = store.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let mut touched = false;
    for p in &mut store.params {
        if p.grad.data().iter().all(|&g| g == 0.0) {
            continue;
        }
        touched = true;
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad.fill(0.0);
    }
    if touched {
        store.version += 1;
    }
    Ok(())
}
