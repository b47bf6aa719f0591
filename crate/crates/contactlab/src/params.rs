//! Named parameter store, checkpoint format, and the SGD optimizer.
//!
//! Parameters are addressed by dot-separated paths. Adapter weights live
//! under the `lora.` prefix so base and adapter sets can be saved or loaded
//! independently. Checkpoints are a single JSON document mapping each name
//! to its shape and flat value list; map order is lexicographic, which makes
//! serialization byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use ndcore::{DiffArray, Rng, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ContactError, Result};

pub const LORA_PREFIX: &str = "lora.";

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
    velocity: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// One checkpoint record: shape plus row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: Vec<usize>, trainable: bool) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "{name}: shape/value mismatch");
        let n = values.len();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape,
                values,
                trainable,
                velocity: vec![0.0; n],
            },
        );
    }

    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut Rng,
        trainable: bool,
    ) {
        let numel: usize = shape.iter().product();
        let mut values = vec![0.0; numel];
        rng.fill_normal(&mut values, 0.0, std);
        self.insert(name, values, shape, trainable);
    }

    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, fill: f64, trainable: bool) {
        let numel: usize = shape.iter().product();
        self.insert(name, vec![fill; numel], shape, trainable);
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| ContactError::Structure(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ContactError::Structure(format!("unknown parameter '{name}'")))?;
        e.trainable = trainable;
        Ok(())
    }

    /// Bind a parameter onto a tape. Trainable entries become gradient leaves,
    /// frozen entries become constants, so a backward pass can never produce a
    /// gradient for a frozen parameter.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let e = self.get(name)?;
        let arr = DiffArray::new(e.values.clone(), e.shape.clone())
            .map_err(ContactError::Engine)?;
        let arr = if e.trainable { arr.with_grad() } else { arr };
        Ok(tape.leaf(arr))
    }

    /// One step of SGD with momentum over every trainable entry that received
    /// a gradient. `grads` maps parameter name to gradient buffer.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        learning_rate: f64,
        momentum: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| ContactError::Structure(format!("gradient for unknown '{name}'")))?;
            if !e.trainable {
                return Err(ContactError::Structure(format!(
                    "gradient supplied for frozen parameter '{name}'"
                )));
            }
            if grad.len() != e.values.len() {
                return Err(ContactError::Structure(format!(
                    "gradient length {} does not match '{name}' ({})",
                    grad.len(),
                    e.values.len()
                )));
            }
            for i in 0..grad.len() {
                e.velocity[i] = momentum * e.velocity[i] + grad[i];
                e.values[i] -= learning_rate * e.velocity[i];
            }
        }
        Ok(())
    }

    pub fn reset_momentum(&mut self) {
        for e in self.entries.values_mut() {
            e.velocity.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ---- checkpoint format ----------------------------------------------

    pub fn to_checkpoint(&self) -> BTreeMap<String, CheckpointEntry> {
        self.entries
            .iter()
            .map(|(name, e)| {
                (
                    name.clone(),
                    CheckpointEntry {
                        shape: e.shape.clone(),
                        values: e.values.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |_| true)
    }

    /// Save only adapter weights (`lora.` prefix).
    pub fn save_lora(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |name| name.starts_with(LORA_PREFIX))
    }

    /// Save everything except adapter weights.
    pub fn save_base(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |name| !name.starts_with(LORA_PREFIX))
    }

    fn save_filtered(&self, path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
        let map: BTreeMap<String, CheckpointEntry> = self
            .to_checkpoint()
            .into_iter()
            .filter(|(name, _)| keep(name))
            .collect();
        let text = serde_json::to_string_pretty(&map)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Merge checkpoint values into existing entries by name. Shapes must
    /// match; names absent from the store are rejected.
    pub fn load_from(&mut self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, CheckpointEntry> = serde_json::from_str(&text)?;
        let mut loaded = 0;
        for (name, entry) in map {
            let e = self.entries.get_mut(&name).ok_or_else(|| {
                ContactError::Structure(format!("checkpoint parameter '{name}' not in model"))
            })?;
            if e.shape != entry.shape {
                return Err(ContactError::Structure(format!(
                    "checkpoint '{name}' has shape {:?}, model expects {:?}",
                    entry.shape, e.shape
                )));
            }
            e.values = entry.values;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Snapshot of all values, for exact-freeze assertions.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.values.clone()))
            .collect()
    }
}

/// Pull gradients for every trainable parameter bound on a tape.
pub fn collect_grads(
    tape: &Tape,
    bound: &BTreeMap<String, Var>,
    store: &ParamStore,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut grads = BTreeMap::new();
    for (name, var) in bound {
        if store.get(name)?.trainable {
            let g = tape.value(*var).grad().ok_or_else(|| {
                ContactError::Structure(format!("no gradient recorded for '{name}'"))
            })?;
            grads.insert(name.clone(), g.to_vec());
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_respects_trainable_flag() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], vec![2], true);
        store.insert("frozen", vec![3.0], vec![1], false);
        let mut tape = Tape::new();
        let w = store.bind(&mut tape, "w").unwrap();
        let f = store.bind(&mut tape, "frozen").unwrap();
        let s1 = tape.add(w, w).unwrap();
        let sum = tape.reduce(s1, ndcore::Reduce::Sum, None).unwrap();
        tape.backward(sum).unwrap();
        assert_eq!(tape.value(w).grad().unwrap(), &[2.0, 2.0]);
        assert!(tape.value(f).grad().is_none());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0], vec![1], true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        store.sgd_step(&grads, 0.1, 0.9).unwrap();
        // v = 1, w = 1 - 0.1
        assert!((store.get("w").unwrap().values[0] - 0.9).abs() < 1e-15);
        store.sgd_step(&grads, 0.1, 0.9).unwrap();
        // v = 1.9, w = 0.9 - 0.19
        assert!((store.get("w").unwrap().values[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut store = ParamStore::new();
        store.insert("w", vec![0.123456, -0.5], vec![2], true);
        let before = store.snapshot();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![10.0, -3.0]);
        for _ in 0..5 {
            store.sgd_step(&grads, 0.0, 0.9).unwrap();
        }
        assert_eq!(store.snapshot(), before);
    }

    #[test]
    fn sgd_rejects_frozen_target() {
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0], vec![1], false);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        assert!(store.sgd_step(&grads, 0.1, 0.9).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_lora_split() {
        let dir = std::env::temp_dir().join("contactlab_params_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut store = ParamStore::new();
        store.insert("encoder.w", vec![1.5, -2.0], vec![2], false);
        store.insert("lora.encoder.w.down", vec![0.25], vec![1, 1], true);

        let full = dir.join("full.json");
        let lora = dir.join("lora.json");
        let base = dir.join("base.json");
        store.save(&full).unwrap();
        store.save_lora(&lora).unwrap();
        store.save_base(&base).unwrap();

        let lora_map: BTreeMap<String, CheckpointEntry> =
            serde_json::from_str(&std::fs::read_to_string(&lora).unwrap()).unwrap();
        assert_eq!(lora_map.len(), 1);
        assert!(lora_map.contains_key("lora.encoder.w.down"));

        let mut other = ParamStore::new();
        other.insert("encoder.w", vec![0.0, 0.0], vec![2], false);
        other.insert("lora.encoder.w.down", vec![0.0], vec![1, 1], true);
        assert_eq!(other.load_from(&full).unwrap(), 2);
        assert_eq!(other.get("encoder.w").unwrap().values, vec![1.5, -2.0]);

        // Same content twice serializes to identical bytes.
        let again = dir.join("full2.json");
        store.save(&again).unwrap();
        assert_eq!(
            std::fs::read(&full).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = std::env::temp_dir().join("contactlab_params_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let mut store = ParamStore::new();
        store.insert("w", vec![1.0, 2.0], vec![2], true);
        let p = dir.join("ck.json");
        store.save(&p).unwrap();

        let mut other = ParamStore::new();
        other.insert("w", vec![0.0; 4], vec![2, 2], true);
        assert!(other.load_from(&p).is_err());
    }
}
