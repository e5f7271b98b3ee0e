use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Role of a stored tensor. Decides learnability and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    PreluAlpha,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub const ALL: [ParamKind; 7] = [
        ParamKind::ConvWeight,
        ParamKind::ConvBias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::PreluAlpha,
        ParamKind::RunningMean,
        ParamKind::RunningVar,
    ];

    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Only convolution kernels receive weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::ConvWeight
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named tensors of a network, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{}`", name)));
        }
        self.entries.insert(name, Entry { kind, value });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replaces a value, keeping its kind. The shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::ParameterShape { name: name.to_string(), expected: slot.value.shape(), found: value.shape() });
        }
        slot.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.iter().filter(|(_, e)| e.kind.learnable())
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.learnable().map(|(_, e)| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, e)| (k.clone(), Entry { kind: e.kind, value: e.value.cast() })).collect(),
        }
    }

    /// Overwrites every entry from `other`, which must hold exactly the same
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParameterStore<T>) -> Result<()> {
        for name in other.names() {
            if !self.contains(name) {
                return Err(Error::UnknownParameter(name.to_string()));
            }
        }
        for (name, slot) in self.entries.iter_mut() {
            let src = other.entries.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if src.value.shape() != slot.value.shape() {
                return Err(Error::ParameterShape { name: name.clone(), expected: slot.value.shape(), found: src.value.shape() });
            }
            slot.value = src.value.clone();
        }
        Ok(())
    }
}

/// He-uniform (fan-in) initial values for a convolution kernel.
pub fn he_uniform<T: Scalar>(shape: Shape, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in = shape.c * shape.h * shape.w;
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| T::lit(rng.random_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kinds() {
        for k in ParamKind::ALL {
            assert_eq!(ParamKind::from_tag(k.tag()), Some(k));
        }
        assert_eq!(ParamKind::from_tag(200), None);
        assert!(!ParamKind::RunningVar.learnable());
        assert!(ParamKind::ConvWeight.decays());
        assert!(!ParamKind::PreluAlpha.decays());
        assert!(!ParamKind::ConvBias.decays());
    }

    #[test]
    fn store_basics() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("b.weight", ParamKind::ConvWeight, Tensor::zeros([2, 1, 3, 3])).unwrap();
        s.insert("a.bn.running_mean", ParamKind::RunningMean, Tensor::zeros([1, 2, 1, 1])).unwrap();
        s.insert("a.bn.gamma", ParamKind::BnGamma, Tensor::ones([1, 2, 1, 1])).unwrap();
        assert!(s.insert("b.weight", ParamKind::ConvWeight, Tensor::zeros([1, 1, 1, 1])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), ["a.bn.gamma", "a.bn.running_mean", "b.weight"]);
        assert_eq!(s.num_learnable(), 18 + 2);
        assert!(matches!(s.get("nope"), Err(Error::MissingParameter(_))));
        assert!(matches!(s.set("b.weight", Tensor::zeros([1, 1, 1, 1])), Err(Error::ParameterShape { .. })));
        s.set("b.weight", Tensor::ones([2, 1, 3, 3])).unwrap();
        assert_eq!(s.get("b.weight").unwrap().sum(), 18.0);
    }

    #[test]
    fn he_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = he_uniform(Shape::new(8, 4, 3, 3), &mut rng);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(t.max_abs() <= bound);
        assert!(t.max_abs() > 0.5 * bound);
    }
}
