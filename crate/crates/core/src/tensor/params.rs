use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Handle to one entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    m: Option<Vec<f32>>,
    v: Option<Vec<f32>>,
}

/// Owns trainable parameters across steps: values, accumulated gradients and
/// Adam moments. Forward passes lease copies onto a tape via [`bind`];
/// [`accumulate_grads`] moves tape gradients back. Registration order is the
/// checkpoint order, so construction must be deterministic.
///
/// [`bind`]: ParamStore::bind
/// [`accumulate_grads`]: ParamStore::accumulate_grads
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Tape handles for every parameter of a store, in [`ParamId`] order.
pub struct Bindings(Vec<TensorId>);

impl Bindings {
    pub fn ids(&self) -> &[TensorId] {
        &self.0
    }

    /// Per-parameter gradients in store order; zeros where the loss never
    /// reached a parameter.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f32>> {
        self.0
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect()
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = TensorId;

    fn index(&self, id: ParamId) -> &TensorId {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("parameter {name:?} registered twice")));
        }
        self.entries.push(ParamEntry { name, value, grad: None, m: None, v: None });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar parameters.
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.value.numel() as u64).sum()
    }

    /// Lease every parameter onto a tape. On a recording tape the leaves
    /// require gradients; on a no-grad tape they are constants.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.entries.iter().map(|e| tape.param_leaf(e.value.clone())).collect())
    }

    /// Move gradients from a finished backward pass into the store,
    /// accumulating across calls. Every entry ends up with an allocated
    /// gradient buffer, so a later optimizer step sees zeros rather than a
    /// missing gradient for parameters the loss never touched.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (i, entry) in self.entries.iter_mut().enumerate() {
            let buf = entry.grad.get_or_insert_with(|| vec![0.0; entry.value.numel()]);
            if let Some(g) = tape.grad(bindings.0[i]) {
                for (b, &gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.grad {
                g.fill(0.0);
            }
        }
    }

    /// Drop gradient and moment buffers; keeps only values. Used before
    /// sharing a trained store read-only.
    pub fn clear_training_state(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
            e.m = None;
            e.v = None;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> AdamParams {
        AdamParams { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update with bias correction. `t` counts steps from 1. Gradients
/// are consumed: every buffer is zeroed after the update. A parameter with
/// no gradient buffer at all is a contract error naming it.
pub fn adam_step(store: &mut ParamStore, hp: &AdamParams, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("adam_step: step count starts at 1"));
    }
    let bc1 = 1.0 - (hp.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (hp.beta2 as f64).powi(t as i32);
    for e in &mut store.entries {
        let g = e
            .grad
            .as_mut()
            .ok_or_else(|| Error::contract(format!("adam_step: parameter {:?} has no gradient", e.name)))?;
        let n = e.value.numel();
        let m = e.m.get_or_insert_with(|| vec![0.0; n]);
        let v = e.v.get_or_insert_with(|| vec![0.0; n]);
        for i in 0..n {
            let gi = g[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            e.value.data[i] -= (hp.learning_rate as f64 * mhat / (vhat.sqrt() + hp.eps as f64)) as f32;
        }
        g.fill(0.0);
    }
    Ok(())
}
