//! Central named-parameter store.
//!
//! Every tensor a model owns lives here: trainable weights as well as
//! non-trainable state such as batch-norm running statistics. Entries are
//! addressed by a stable `ParamId` (creation order) and by a unique name
//! used for checkpointing. Stored values are always detached; to use them
//! in a differentiable computation, `bind` them onto a tape, which turns
//! trainable entries into leaves and passes the rest through unchanged.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Handle to one entry of a `ParamSet`, valid only for the set that
/// issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct ParamEntry<T: Scalar> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

#[derive(Clone)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("param_set", format!("duplicate parameter name {:?}", name)));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, value: value.detached(), trainable });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces an entry's data, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if data.len() != e.value.numel() {
            return Err(Error::contract(
                "param_set",
                format!("{} has {} elements, replacement has {}", e.name, e.value.numel(), data.len()),
            ));
        }
        e.value = Tensor::from_vec(e.value.shape().to_vec(), data)?;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).map(ParamId).collect()
    }

    /// Total scalar count, optionally restricted to trainable entries.
    pub fn count_scalars(&self, trainable_only: bool) -> u64 {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.numel() as u64)
            .sum()
    }

    /// Binds the whole set onto a tape: trainable entries become leaves
    /// (so gradients accumulate for them), everything else is passed
    /// through detached.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound<T> {
        let slots = self
            .entries
            .iter()
            .map(|e| if e.trainable { tape.var(&e.value) } else { e.value.clone() })
            .collect();
        Bound { slots }
    }

    /// Binds with caller-supplied tensors in the trainable slots, in
    /// `trainable_ids` order. Used by gradient checking, where the checker
    /// owns the leaves it perturbs.
    pub fn bind_with(&self, trainable: &[Tensor<T>]) -> Result<Bound<T>> {
        let want = self.entries.iter().filter(|e| e.trainable).count();
        if trainable.len() != want {
            return Err(Error::contract(
                "param_set",
                format!("expected {} trainable tensors, got {}", want, trainable.len()),
            ));
        }
        let mut it = trainable.iter();
        let slots = self
            .entries
            .iter()
            .map(|e| if e.trainable { it.next().unwrap().clone() } else { e.value.clone() })
            .collect();
        Ok(Bound { slots })
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, data) in updates {
            self.set_data(id, data)?;
        }
        Ok(())
    }
}

/// One parameter set bound onto a tape: a tensor per entry, aligned with
/// `ParamId` indices.
pub struct Bound<T: Scalar> {
    slots: Vec<Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.index()]
    }
}

/// Glorot-uniform initialization: U(-l, l) with l = sqrt(6/(fan_in+fan_out)).
pub fn glorot_uniform<T: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -limit, limit, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binds_trainable_as_leaves() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::full(vec![2], 3.0), true).unwrap();
        let stat = ps.add("stat", Tensor::full(vec![2], 1.0), false).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let y = tape.mul(bound.get(w), bound.get(stat)).unwrap();
        let root = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert!(grads.get(bound.get(w)).is_some());
        assert!(grads.get(bound.get(stat)).is_none());
    }

    #[test]
    fn rejects_duplicate_names() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(vec![1]), true).unwrap();
        assert!(ps.add("w", Tensor::zeros(vec![1]), true).is_err());
    }

    #[test]
    fn set_data_preserves_shape_contract() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::zeros(vec![2, 2]), true).unwrap();
        assert!(ps.set_data(id, vec![1.0; 3]).is_err());
        ps.set_data(id, vec![1.0; 4]).unwrap();
        assert_eq!(ps.value(id).data(), &[1.0; 4]);
    }

    #[test]
    fn counts_scalars_by_kind() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", Tensor::zeros(vec![3, 4]), true).unwrap();
        ps.add("b", Tensor::zeros(vec![5]), false).unwrap();
        assert_eq!(ps.count_scalars(true), 12);
        assert_eq!(ps.count_scalars(false), 17);
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = glorot_uniform::<f64>(vec![64], 8, 4, &mut rng);
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        assert!(t.data().iter().any(|v| v.abs() > limit * 0.5));
    }
}
