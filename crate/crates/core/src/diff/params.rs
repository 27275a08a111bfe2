use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DiffError, Tensor};

/// Named parameter registry. Iteration is sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        if self.params.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), DiffError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Deterministic stream for initializing the parameter called `name`.
    pub fn init_rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(crate::rng::mix(self.rng_seed, name_hash(name)))
    }

    /// Register a parameter with i.i.d. `N(0, std²)` entries.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<(), DiffError> {
        let mut rng = self.init_rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<(), DiffError> {
        self.insert(name, Tensor::full(shape, value))
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut s = ParamStore::new(1);
        s.insert("b", Tensor::scalar(1.0)).unwrap();
        s.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(3.0)).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn normal_init_is_seeded_by_name() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        a.insert_normal("w", &[3, 2], 0.1).unwrap();
        b.insert_normal("w", &[3, 2], 0.1).unwrap();
        assert_eq!(a.get("w"), b.get("w"));
        a.insert_normal("v", &[3, 2], 0.1).unwrap();
        assert_ne!(a.get("w"), a.get("v"));
    }
}
