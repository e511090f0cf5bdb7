use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

pub(super) struct Entry {
    pub(super) name: String,
    pub(super) value: ArrayD<f64>,
    pub(super) grad: ArrayD<f64>,
    pub(super) frozen: bool,
    pub(super) m: ArrayD<f64>,
    pub(super) v: ArrayD<f64>,
    pub(super) steps: u64,
}

/// Owned snapshot of one parameter, used by checkpoint serialization.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub name: String,
    pub frozen: bool,
    pub steps: u64,
    pub value: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Name-keyed registry of trainable and frozen parameters, their gradient
/// accumulators, and optimizer moments. Registration order is preserved so
/// updates are deterministic, and names are dotted paths whose first segment
/// identifies the parameter group (`enc.`, `harm.`, `flow.`, `cd.`).
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>, frozen: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::validation(format!(
                "parameter {name} registered twice"
            )));
        }
        let zeros = ArrayD::zeros(value.raw_dim());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            frozen,
            steps: 0,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[self.idx(name)].value
    }

    pub fn grad(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[self.idx(name)].grad
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries[self.idx(name)].frozen
    }

    pub fn set_value(&mut self, name: &str, value: ArrayD<f64>) {
        let i = self.idx(name);
        assert_eq!(
            self.entries[i].value.shape(),
            value.shape(),
            "shape change for {name}"
        );
        self.entries[i].value = value;
    }

    pub fn add_grad(&mut self, name: &str, g: &ArrayD<f64>, scale: f64) {
        let i = self.idx(name);
        assert_eq!(
            self.entries[i].grad.shape(),
            g.shape(),
            "gradient shape for {name}"
        );
        self.entries[i].grad.scaled_add(scale, g);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Largest absolute gradient among parameters matching `filter`; handy
    /// for asserting phase purity.
    pub fn max_abs_grad(&self, filter: impl Fn(&str) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|e| filter(&e.name))
            .flat_map(|e| e.grad.iter())
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
    }

    /// SHA-256 over names, shapes and little-endian value bytes of matching
    /// parameters; a bit-exact identity for freeze checks.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| filter(&e.name)) {
            hasher.update(e.name.as_bytes());
            for &d in e.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in e.value.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Marks every parameter matching `filter` as frozen: its graph leaves
    /// become constants and the optimizer skips it entirely.
    pub fn freeze_matching(&mut self, filter: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if filter(&e.name) {
                e.frozen = true;
            }
        }
    }

    pub fn snapshot(&self) -> Vec<ParamSnapshot> {
        self.entries
            .iter()
            .map(|e| ParamSnapshot {
                name: e.name.clone(),
                frozen: e.frozen,
                steps: e.steps,
                value: e.value.clone(),
                m: e.m.clone(),
                v: e.v.clone(),
            })
            .collect()
    }

    /// Overwrites values and optimizer state from a snapshot. Every snapshot
    /// entry must already be registered with a matching shape, so model
    /// construction stays the single source of architecture truth.
    pub fn restore(&mut self, snaps: &[ParamSnapshot]) -> Result<()> {
        for s in snaps {
            let Some(&i) = self.index.get(&s.name) else {
                return Err(Error::validation(format!(
                    "checkpoint parameter {} does not exist in this model",
                    s.name
                )));
            };
            let e = &mut self.entries[i];
            if e.value.shape() != s.value.shape() {
                return Err(Error::validation(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    s.name,
                    s.value.shape(),
                    e.value.shape()
                )));
            }
            e.value = s.value.clone();
            e.m = s.m.clone();
            e.v = s.v.clone();
            e.steps = s.steps;
            e.frozen = s.frozen;
        }
        Ok(())
    }

    pub(super) fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One forward/backward graph bound to a parameter store. Leaves are created
/// on first access and cached, so a parameter used twice (a projection
/// shared across timesteps, say) accumulates gradient from both uses.
pub struct Graph<'a> {
    store: &'a ParamStore,
    leaves: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    /// Leaf tensor for a parameter; frozen parameters become constants so
    /// no gradient can reach them.
    pub fn param(&self, name: &str) -> Tensor {
        if let Some(t) = self.leaves.borrow().get(name) {
            return t.clone();
        }
        let value = self.store.value(name).clone();
        let t = if self.store.is_frozen(name) {
            Tensor::constant(value)
        } else {
            Tensor::leaf(value)
        };
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        t
    }

    /// Drains accumulated leaf gradients as (name, grad) pairs.
    pub fn take_grads(self) -> Vec<(String, ArrayD<f64>)> {
        self.leaves
            .into_inner()
            .into_iter()
            .filter_map(|(name, leaf)| leaf.grad().map(|g| (name, g)))
            .collect()
    }
}
