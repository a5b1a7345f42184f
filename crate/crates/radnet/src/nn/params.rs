//! Named parameter storage shared between model builders, the optimizer, and
//! checkpoints.
//!
//! Parameters live behind `Rc` so a tape can hold cheap references during the
//! forward/backward pass; the optimizer updates them in place afterwards.
//! Names are dotted paths (`repair.enc.fd1.w`) so whole subtrees can be
//! frozen or counted by prefix.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::tape::{Arr, Tape, T};

struct Entry {
    name: String,
    value: Rc<Arr>,
    trainable: bool,
}

/// Insertion-ordered collection of named tensors.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable tensor. Names must be unique.
    pub fn add(&mut self, name: &str, value: Arr) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Internal(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_owned(), self.entries.len());
        self.entries.push(Entry { name: name.to_owned(), value: Rc::new(value), trainable: true });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Arr>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.index.get(name).map(|&i| self.entries[i].trainable)
    }

    /// Binds a parameter onto a tape: trainable parameters become graph
    /// leaves, frozen ones plain constants (gradient flow stops there).
    pub fn bind(&self, tape: &Tape, name: &str) -> T {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let e = &self.entries[i];
        if e.trainable {
            tape.param(name, e.value.clone())
        } else {
            tape.constant_rc(e.value.clone())
        }
    }

    /// Applies `f` to the named tensor in place.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Arr)) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
        f(Rc::make_mut(&mut self.entries[i].value));
        Ok(())
    }

    /// Overwrites the named tensor, requiring an exact shape match.
    pub fn set_value(&mut self, name: &str, value: Arr) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let have = self.entries[i].value.shape();
        if have != value.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: stored {:?}, loading {:?}",
                have,
                value.shape()
            )));
        }
        self.entries[i].value = Rc::new(value);
        Ok(())
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// `prefix`. Returns how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Names in insertion order, optionally filtered by prefix.
    pub fn names(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rc<Arr>, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count under a name prefix (`""` for everything).
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over the values under a prefix, names sorted, little-endian
    /// f64 bytes. Used to prove frozen subtrees never move.
    pub fn digest(&self, prefix: &str) -> String {
        let mut names = self.names(prefix);
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            let e = &self.entries[self.index[&name]];
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Arr {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let r = &mut self.rng;
        Arr::from_shape_simple_fn(IxDyn(shape), || r.random_range(-bound..bound))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Arr {
        Arr::zeros(IxDyn(shape))
    }

    pub fn full(&mut self, shape: &[usize], v: f64) -> Arr {
        Arr::from_elem(IxDyn(shape), v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamStore::new();
        ps.add("a.w", Arr::zeros(IxDyn(&[2]))).unwrap();
        assert!(ps.add("a.w", Arr::zeros(IxDyn(&[2]))).is_err());
    }

    #[test]
    fn prefix_counting_and_freeze() {
        let mut ps = ParamStore::new();
        ps.add("enc.w", Arr::zeros(IxDyn(&[3, 2]))).unwrap();
        ps.add("enc.b", Arr::zeros(IxDyn(&[3]))).unwrap();
        ps.add("dec.w", Arr::zeros(IxDyn(&[4]))).unwrap();
        assert_eq!(ps.num_scalars(""), 13);
        assert_eq!(ps.num_scalars("enc."), 9);
        assert_eq!(ps.set_trainable_prefix("enc.", false), 2);
        assert_eq!(ps.is_trainable("enc.w"), Some(false));
        assert_eq!(ps.is_trainable("dec.w"), Some(true));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut ps = ParamStore::new();
        ps.add("a", Arr::from_elem(IxDyn(&[1]), 2.0)).unwrap();
        ps.add("b", Arr::from_elem(IxDyn(&[1]), 3.0)).unwrap();
        ps.set_trainable_prefix("b", false);
        let tape = Tape::new();
        let a = ps.bind(&tape, "a");
        let b = ps.bind(&tape, "b");
        let y = tape.sum_all(&tape.mul(&a, &b));
        let grads = tape.backward(&y).unwrap();
        assert!(grads.get("a").is_some());
        assert!(grads.get("b").is_none());
    }

    #[test]
    fn rebinding_accumulates_gradients() {
        let mut ps = ParamStore::new();
        ps.add("p", Arr::from_elem(IxDyn(&[1]), 2.0)).unwrap();
        let tape = Tape::new();
        let first = ps.bind(&tape, "p");
        let second = ps.bind(&tape, "p");
        let y = tape.sum_all(&tape.mul(&first, &second));
        let grads = tape.backward(&y).unwrap();
        let g = grads.get("p").unwrap();
        assert!((g[[0]] - 4.0).abs() < 1e-12, "d(p^2)/dp at p=2 is 4, got {}", g[[0]]);
    }

    #[test]
    fn digest_stable_and_sensitive() {
        let mut ps = ParamStore::new();
        ps.add("x", Arr::from_elem(IxDyn(&[2]), 1.0)).unwrap();
        let d1 = ps.digest("");
        let d2 = ps.digest("");
        assert_eq!(d1, d2);
        ps.update("x", |v| v[[0]] += 1e-12).unwrap();
        assert_ne!(d1, ps.digest(""));
    }

    #[test]
    fn set_value_checks_shape() {
        let mut ps = ParamStore::new();
        ps.add("x", Arr::zeros(IxDyn(&[2, 3]))).unwrap();
        assert!(ps.set_value("x", Arr::zeros(IxDyn(&[3, 2]))).is_err());
        assert!(ps.set_value("x", Arr::zeros(IxDyn(&[2, 3]))).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Init::new(7).uniform_fan_in(&[4, 4], 16);
        let b = Init::new(7).uniform_fan_in(&[4, 4], 16);
        assert_eq!(a, b);
        let c = Init::new(8).uniform_fan_in(&[4, 4], 16);
        assert_ne!(a, c);
        let bound = 0.25;
        assert!(a.iter().all(|&v| v >= -bound && v < bound));
    }
}
