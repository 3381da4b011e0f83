use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::layers::BnUpdate;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running-statistics momentum for batch-norm layers.
pub const BN_MOMENTUM: f32 = 0.1;

/// Named parameter arrays for one network (student or teacher).
///
/// Names are dot-separated paths. Batch-norm running statistics live here
/// too (names ending in `running_mean` / `running_var`); they are buffers,
/// not trainable, but they are averaged into the teacher and checkpointed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub(crate) fn from_entries(config: ModelConfig, entries: BTreeMap<String, Tensor>) -> Self {
        ModelParams { config, entries }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    /// Trainable entries only.
    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().filter(|(n, _)| !Self::is_buffer(n))
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Errors unless `other` has the same names with the same shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::Contract(format!("parameter {name} missing from other set"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Contract(format!(
                        "parameter {name}: shape {:?} vs {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                _ => {}
            }
        }
        if other.entries.len() != self.entries.len() {
            let extra = other.names().find(|n| !self.entries.contains_key(*n)).unwrap_or_default();
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes, for cheap identity checks.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Folds batch statistics into running statistics, in the order the
    /// forward pass produced them.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        self.apply_bn_updates_with(updates, BN_MOMENTUM)
    }

    /// As [`apply_bn_updates`](Self::apply_bn_updates) with an explicit
    /// momentum; 1 overwrites the running statistics.
    pub fn apply_bn_updates_with(&mut self, updates: &[BnUpdate], m: f32) -> Result<()> {
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
                let name = format!("{}.{suffix}", u.layer);
                let t = self
                    .entries
                    .get_mut(&name)
                    .ok_or_else(|| Error::Contract(format!("no buffer {name}")))?;
                for (r, &s) in t.data_mut().iter_mut().zip(stat.iter()) {
                    *r = (1.0 - m) * *r + m * s;
                }
            }
        }
        Ok(())
    }

    /// Same entries under another configuration; callers check the layout.
    pub(crate) fn with_config(mut self, config: ModelConfig) -> Self {
        self.config = config;
        self
    }
}
