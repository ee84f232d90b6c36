//! Named, component-partitioned parameter collections.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{hash_keys, hash_str, Scalar, Tensor};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Backbone,
    Expert(usize),
    Router,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Backbone => f.write_str("backbone"),
            Component::Expert(i) => write!(f, "expert{i}"),
            Component::Router => f.write_str("router"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Component::Backbone),
            "router" => Ok(Component::Router),
            _ => s
                .strip_prefix("expert")
                .and_then(|i| i.parse().ok())
                .map(Component::Expert)
                .ok_or_else(|| Error::UnknownComponent(s.to_string())),
        }
    }
}

impl Serialize for Component {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Component {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub tensor: Tensor<T>,
    pub component: Component,
    pub trainable: bool,
}

/// Parameters keyed by name; iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, component: Component) {
        self.entries.insert(
            name.into(),
            ParamEntry {
                tensor,
                component,
                trainable: true,
            },
        );
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamEntry<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn components(&self) -> Vec<Component> {
        let mut c: Vec<Component> = self.entries.values().map(|e| e.component).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn n_experts(&self) -> usize {
        self.components()
            .iter()
            .filter_map(|c| match c {
                Component::Expert(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Concatenate every tensor in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .values()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        let total = self.num_scalars();
        if flat.len() != total {
            return Err(Error::shape(
                "unflatten",
                format!("expected {total} scalars, got {}", flat.len()),
            ));
        }
        let mut offset = 0;
        for e in self.entries.values_mut() {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&str, Component) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.trainable = pred(name, e.component);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in self.entries.values_mut() {
            e.trainable = trainable;
        }
    }

    /// Sub-collection of entries matching `pred`.
    pub fn filter(&self, mut pred: impl FnMut(&str, &ParamEntry<T>) -> bool) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(n, e)| pred(n, e))
                .map(|(n, e)| (n.clone(), e.clone()))
                .collect(),
        }
    }

    /// Overwrite or add every entry of `other`.
    pub fn merge(&mut self, other: ParamSet<T>) {
        self.entries.extend(other.entries);
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            component: e.component,
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality restricted to entries of `component`.
    pub fn component_bit_eq(&self, other: &Self, component: Component) -> bool {
        let a: Vec<_> = self.iter().filter(|(_, e)| e.component == component).collect();
        let b: Vec<_> = other.iter().filter(|(_, e)| e.component == component).collect();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ea), (nb, eb))| na == nb && ea.tensor.bit_eq(&eb.tensor))
    }
}

/// Deterministic scaled-normal initialiser; each tensor draws from its own
/// stream keyed by `(seed, name)` so insertion order does not matter.
pub fn normal_tensor(shape: &[usize], std: f64, seed: u64, name: &str) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_keys(&[seed, hash_str(name)]));
    let dist = Normal::new(0.0, std).expect("std must be positive");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b", normal_tensor(&[3, 2], 1.0, 1, "b"), Component::Backbone);
        p.insert("a", normal_tensor(&[4], 1.0, 1, "a"), Component::Expert(1));
        p.insert("r", normal_tensor(&[2, 2], 1.0, 1, "r"), Component::Router);
        p
    }

    #[test]
    fn iteration_is_lexicographic() {
        let p = sample();
        let names: Vec<_> = p.names().cloned().collect();
        assert_eq!(names, vec!["a", "b", "r"]);
        assert_eq!(p.n_experts(), 2);
    }

    #[test]
    fn component_parsing() {
        assert_eq!("expert12".parse::<Component>().unwrap(), Component::Expert(12));
        assert_eq!("router".parse::<Component>().unwrap(), Component::Router);
        assert!(matches!("ffn".parse::<Component>(), Err(Error::UnknownComponent(_))));
        assert!("expertX".parse::<Component>().is_err());
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let mut p = sample();
        assert!(p.unflatten(&[0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 14)) {
            let mut p = sample();
            p.unflatten(&values).unwrap();
            let back = p.flatten();
            prop_assert!(values.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
