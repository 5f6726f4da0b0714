//! Model checkpoints: every tensor packed into one PGRD vector plus a JSON
//! manifest describing names, shapes and offsets.
//!
//! `save("models/stnet")` writes `models/stnet.pgrd` and
//! `models/stnet.json`. Output is deterministic: no timestamps, and maps
//! are ordered.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_pgrd, write_pgrd};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub dtype: u8,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters plus the configuration needed to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<S: Scalar = f64> {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamStore<S>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl<S: Scalar> ModelCheckpoint<S> {
    pub fn new(kind: &str, config: serde_json::Value, seed: u64, params: ParamStore<S>) -> Self {
        Self { kind: kind.to_string(), config, seed, metrics: BTreeMap::new(), params }
    }

    pub fn with_metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {}, expected a {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, trainable: t.requires_grad() };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            kind: self.kind.clone(),
            seed: self.seed,
            dtype: S::DTYPE,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
            tensors,
        }
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (with_ext(stem, "pgrd"), with_ext(stem, "json"))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (data_path, manifest_path) = Self::paths(stem);
        if let Some(dir) = data_path.parent() {
            fs::create_dir_all(dir)?;
        }
        let flat: Vec<S> = self.params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
        let packed = if flat.is_empty() { Tensor::zeros(&[1])? } else { Tensor::new(&[flat.len()], flat)? };
        fs::write(&data_path, write_pgrd(&packed)?)?;
        fs::write(&manifest_path, serde_json::to_string_pretty(&self.manifest())? + "\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (data_path, manifest_path) = Self::paths(stem);
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.dtype != S::DTYPE {
            return Err(Error::Format(format!("checkpoint dtype {} does not match {}", manifest.dtype, S::DTYPE)));
        }
        let packed: Tensor<S> = read_pgrd(&fs::read(&data_path)?)?;
        let data = packed.data();
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = data
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Format(format!("tensor {} lies outside the packed data", e.name)))?;
            let t = Tensor::new(&e.shape, chunk.to_vec()).map_err(|err| Error::Format(err.to_string()))?;
            if e.trainable {
                params.add(&e.name, t);
            } else {
                params.add_buffer(&e.name, t);
            }
        }
        Ok(Self { kind: manifest.kind, config: manifest.config, seed: manifest.seed, metrics: manifest.metrics, params })
    }
}

/// Copies several stores into one, prefixing each entry with `group.`.
pub fn merge_stores<S: Scalar>(groups: &[(&str, &ParamStore<S>)]) -> ParamStore<S> {
    let mut out = ParamStore::new();
    for (prefix, store) in groups {
        for (name, t) in store.iter() {
            let full = format!("{prefix}.{name}");
            if t.requires_grad() {
                out.add(&full, t.clone());
            } else {
                out.add_buffer(&full, t.clone());
            }
        }
    }
    out
}

/// The entries of `store` whose names start with `group.`, prefix removed.
pub fn split_store<S: Scalar>(store: &ParamStore<S>, group: &str) -> ParamStore<S> {
    let prefix = format!("{group}.");
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        if let Some(rest) = name.strip_prefix(&prefix) {
            if t.requires_grad() {
                out.add(rest, t.clone());
            } else {
                out.add_buffer(rest, t.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25).unwrap());
        store.add_buffer("a.running", Tensor::full(&[3], 1.5).unwrap());
        let ckpt = ModelCheckpoint::new("toy", serde_json::json!({"k": 1}), 9, store).with_metric("rmse", 0.5);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m/toy");
        ckpt.save(&stem).unwrap();
        let back = ModelCheckpoint::<f64>::load(&stem).unwrap();
        assert_eq!(back, ckpt);
        assert!(!back.params.get(back.params.find("a.running").unwrap()).requires_grad());
        assert!(back.expect_kind("stnet").is_err());
        assert!(ModelCheckpoint::<f32>::load(&stem).is_err());
    }

    #[test]
    fn merge_then_split() {
        let mut a = ParamStore::<f64>::new();
        a.add("w", Tensor::full(&[2], 1.0).unwrap());
        let mut b = ParamStore::<f64>::new();
        b.add_buffer("w", Tensor::full(&[1], 2.0).unwrap());
        let m = merge_stores(&[("gen", &a), ("disc", &b)]);
        assert_eq!(m.name(crate::ParamId(1)), "disc.w");
        assert_eq!(split_store(&m, "gen"), a);
        assert_eq!(split_store(&m, "disc"), b);
    }
}
