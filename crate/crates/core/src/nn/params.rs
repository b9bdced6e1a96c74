use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name of the weight initialization recorded alongside checkpoints.
pub const INIT_SCHEME: &str = "fan_in_uniform(bound=sqrt(3/fan_in)),bias=0,bn_scale=1,bn_shift=0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Optimized by gradient descent.
    Learnable,
    /// Carried state such as batchnorm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub role: ParamRole,
    pub frozen: bool,
}

/// Named parameters and buffers in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                role,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Index(format!("no parameter named {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Index(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) {
        self.entries.insert(name.into(), entry);
    }

    /// Freeze (or unfreeze) `prefix` and every entry below it.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, e) in self.entries.iter_mut() {
            if under_prefix(name, prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries
            .get(name)
            .is_some_and(|e| e.role == ParamRole::Learnable && !e.frozen)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| self.is_trainable(n))
            .cloned()
            .collect()
    }

    /// Number of scalars in learnable entries (buffers excluded).
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.role == ParamRole::Learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    /// Learnable count restricted to `prefix` and entries below it.
    pub fn learnable_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, e)| under_prefix(n, prefix) && e.role == ParamRole::Learnable)
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            *self.tensor_mut(&name)? = value;
        }
        Ok(())
    }

    /// Copy every entry of `other` whose name exists here, checking shapes.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (name, entry) in other.iter() {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.value.shape() != entry.value.shape() {
                    return Err(Error::shape(name, dst.value.shape(), entry.value.shape()));
                }
                dst.value = entry.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            role: e.role,
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `name` equals `prefix` or continues it with a `.` separator.
pub fn under_prefix(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
}

/// Zero-mean uniform weights with variance `1 / fan_in`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}
