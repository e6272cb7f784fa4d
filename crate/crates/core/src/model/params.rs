use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::numerics::{NdBuffer, Real, RunningStats};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// updated by the optimiser
    Trainable,
    /// running statistics and other non-gradient state
    State,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub kind: ParamKind,
    pub value: NdBuffer<S>,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: NdBuffer<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdBuffer<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdBuffer<S> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.trainable().map(|id| self.value(id).len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every value with the same-named entry of `other`. Names,
    /// kinds and shapes must agree exactly.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .id(&e.name)
                .map(|id| other.entry(id))
                .ok_or_else(|| Error::Incompatible(format!("parameter `{}` is missing", e.name)))?;
            if src.value.shape() != e.value.shape() || src.kind != e.kind {
                return Err(Error::Incompatible(format!(
                    "parameter `{}`: expected {:?} {:?}, found {:?} {:?}",
                    e.name,
                    e.kind,
                    e.value.shape(),
                    src.kind,
                    src.value.shape()
                )));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

/// Ids of one batch-normalisation layer.
#[derive(Clone, Copy, Debug)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub updates: ParamId,
}

impl BnIds {
    pub fn running<S: Real>(&self, store: &ParamStore<S>) -> RunningStats<S> {
        RunningStats {
            mean: store.value(self.running_mean).data().to_vec(),
            var: store.value(self.running_var).data().to_vec(),
            updates: store.value(self.updates).data()[0].as_f64() as u64,
        }
    }

    pub fn store_running<S: Real>(&self, store: &mut ParamStore<S>, stats: &RunningStats<S>) {
        store
            .value_mut(self.running_mean)
            .data_mut()
            .copy_from_slice(&stats.mean);
        store
            .value_mut(self.running_var)
            .data_mut()
            .copy_from_slice(&stats.var);
        store.value_mut(self.updates).data_mut()[0] = S::of(stats.updates as f64);
    }
}

/// Registers parameters under a name prefix, drawing initial values from
/// `rng` in registration order.
pub(crate) struct Builder<'a, S, R> {
    pub store: ParamStore<S>,
    pub rng: &'a mut R,
}

impl<S: Real, R: Rng> Builder<'_, S, R> {
    fn add(&mut self, name: String, kind: ParamKind, value: NdBuffer<S>) -> ParamId {
        self.store
            .insert(&name, kind, value)
            .expect("parameter names are generated unique")
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> NdBuffer<S> {
        let rng = &mut *self.rng;
        NdBuffer::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)))
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.add(name, ParamKind::Trainable, NdBuffer::zeros(shape))
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let v = self.uniform(shape, num_traits::Float::sqrt(6.0 / fan_in as f64));
        self.add(name, ParamKind::Trainable, v)
    }

    pub fn scaled(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let v = self.uniform(shape, bound);
        self.add(name, ParamKind::Trainable, v)
    }

    pub fn state(&mut self, name: String, value: NdBuffer<S>) -> ParamId {
        self.add(name, ParamKind::State, value)
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) -> BnIds {
        BnIds {
            gamma: self.add(
                format!("{prefix}.gamma"),
                ParamKind::Trainable,
                NdBuffer::full(&[c], S::one()),
            ),
            beta: self.zeros(format!("{prefix}.beta"), &[c]),
            running_mean: self.state(format!("{prefix}.running_mean"), NdBuffer::zeros(&[c])),
            running_var: self.state(
                format!("{prefix}.running_var"),
                NdBuffer::full(&[c], S::one()),
            ),
            updates: self.state(format!("{prefix}.updates"), NdBuffer::zeros(&[1])),
        }
    }
}
