use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BnStat, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Running statistic; updated from batch statistics, never by the optimizer.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Named parameter and buffer storage, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("parameter `{name}` registered twice")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value });
        Ok(ParamId(id))
    }

    /// He-normal initialised convolution kernel.
    pub fn add_conv_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        rng: &mut R,
    ) -> Result<ParamId> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, ParamKind::Weight, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.kind(*id) != ParamKind::Buffer)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    /// Exponential moving average update of batch-norm running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat<T>], momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for s in stats {
            for (id, batch) in [(s.running_mean, &s.batch_mean), (s.running_var, &s.batch_var)] {
                for (r, b) in self.get_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * *b;
                }
            }
        }
    }

    /// Copies every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for entry in &mut self.entries {
            let id = other.find(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("missing parameter `{}`", entry.name))
            })?;
            let src = other.get(id);
            if src.shape() != entry.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    src.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = src.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }
}
