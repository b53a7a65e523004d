//! Attention maps captured during inversion, indexed by `(timestep, layer, kind)`.
//!
//! Records are keyed by the step at which the model was evaluated, so an
//! inversion over `T` steps fills timesteps `0..T`.

use indexmap::IndexMap;

use crate::error::{Error, Result};
pub use crate::model::{AttentionKey, AttentionKind, AttentionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreMeta {
    pub steps: usize,
    pub layers: usize,
    pub config_hash: u64,
}

#[derive(Debug, Clone)]
pub struct AttentionStore {
    meta: StoreMeta,
    records: IndexMap<AttentionKey, AttentionRecord>,
}

/// Outcome of [`AttentionStore::verify_complete`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletenessReport {
    pub missing: Vec<AttentionKey>,
}

impl CompletenessReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

impl AttentionStore {
    pub fn new(meta: StoreMeta) -> Self {
        AttentionStore {
            meta,
            records: IndexMap::new(),
        }
    }

    pub fn meta(&self) -> StoreMeta {
        self.meta
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Adds a record under `key`. Capturing the same key twice is an error.
    pub fn record(&mut self, key: AttentionKey, record: AttentionRecord) -> Result<()> {
        if key.timestep >= self.meta.steps || key.layer >= self.meta.layers {
            return Err(Error::contract(format!(
                "key {key} outside store grid of {} steps x {} layers",
                self.meta.steps, self.meta.layers
            )));
        }
        if record.key != key {
            return Err(Error::contract(format!(
                "record tagged {} filed under {key}",
                record.key
            )));
        }
        if self.records.contains_key(&key) {
            return Err(Error::contract(format!("duplicate capture of {key}")));
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn query(&self, t: usize, layer: usize, kind: AttentionKind) -> Result<&AttentionRecord> {
        let key = AttentionKey::new(t, layer, kind);
        self.records
            .get(&key)
            .ok_or_else(|| Error::Lookup(key.to_string()))
    }

    /// Removes a record; used to exercise completeness checks.
    pub fn remove(&mut self, key: &AttentionKey) -> Option<AttentionRecord> {
        self.records.shift_remove(key)
    }

    /// Lists every key of the `steps × layers × {self, cross}` grid that has
    /// no record.
    pub fn verify_complete(&self) -> CompletenessReport {
        let mut missing = Vec::new();
        for t in 0..self.meta.steps {
            for layer in 0..self.meta.layers {
                for kind in [AttentionKind::SelfAttn, AttentionKind::Cross] {
                    let key = AttentionKey::new(t, layer, kind);
                    if !self.records.contains_key(&key) {
                        missing.push(key);
                    }
                }
            }
        }
        CompletenessReport { missing }
    }

    /// Records in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &AttentionRecord> {
        self.records.values()
    }
}
