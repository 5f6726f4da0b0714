//! Named parameter and buffer storage for one model.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<S> {
    name: String,
    tensor: Tensor<S>,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Ordered collection of named tensors. Trainable entries have
/// `requires_grad` set; buffers (batch-norm running statistics) do not.
///
/// Each store carries a process-unique id so that parameters of several
/// stores can share one tape.
#[derive(Debug)]
pub struct ParamStore<S: Scalar = f64> {
    uid: u64,
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self { uid: next_uid(), entries: self.entries.clone() }
    }
}

impl<S: Scalar> PartialEq for ParamStore<S> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { uid: next_uid(), entries: Vec::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    fn push(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name: name.to_string(), tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        self.push(name, tensor.with_requires_grad(true))
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        self.push(name, tensor.with_requires_grad(false))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Trainable tensors in insertion order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.entries.iter_mut().map(|e| &mut e.tensor).filter(|t| t.requires_grad()).collect()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| e.tensor.requires_grad()).map(|e| e.tensor.numel()).sum()
    }

    pub fn ensure_grads(&mut self) {
        for e in &mut self.entries {
            if e.tensor.requires_grad() {
                e.tensor.ensure_grad();
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.clear_grad());
    }

    /// Copies of every non-trainable buffer, for [`restore_buffers`](Self::restore_buffers).
    pub fn buffers(&self) -> Vec<(ParamId, Vec<S>)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.tensor.requires_grad())
            .map(|(i, e)| (ParamId(i), e.tensor.data().to_vec()))
            .collect()
    }

    pub fn restore_buffers(&mut self, saved: &[(ParamId, Vec<S>)]) {
        for (id, data) in saved {
            self.entries[id.0].tensor.data_mut().copy_from_slice(data);
        }
    }

    /// Replaces values entry by entry from `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_values(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} stored, {} expected",
                other.len(),
                self.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    /// Order-sensitive digest of all values, used to detect updates.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            buf.clear();
            e.tensor.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }
}
