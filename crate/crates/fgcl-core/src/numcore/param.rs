//! Named trainable parameters with gradient accumulators.
//!
//! A [`ParamSet`] owns every trainable matrix of a model in a fixed insertion
//! order. Tapes bind leaves by [`ParamId`], accumulate gradients back into the
//! set after `backward`, and the optimizer walks the set in order. The order
//! is part of checkpoint and optimizer-state identity, so it must be stable
//! across runs (it is: construction is deterministic).

use crate::error::{ensure, Result};
use crate::numcore::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: DenseMatrix,
    pub gradient: DenseMatrix,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Register a parameter; the gradient starts at zero.
    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix) -> ParamId {
        let gradient = DenseMatrix::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            gradient,
        });
        ParamId(self.params.len() - 1)
    }

    /// Register a parameter initialized uniformly on
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut value = DenseMatrix::zeros(rows, cols);
        for v in value.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_gradients(&mut self) {
        for p in &mut self.params {
            for g in p.gradient.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Copy parameter values from another set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        ensure!(
            self.params.len() == other.params.len(),
            "copy_values_from: {} parameters vs {}",
            self.params.len(),
            other.params.len()
        );
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            ensure!(
                dst.value.shape() == src.value.shape() && dst.name == src.name,
                "copy_values_from: parameter {} mismatch",
                dst.name
            );
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Convenience for deriving deterministic sub-seeds, used wherever a module
/// fans one seed out into independent streams.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_is_respected() {
        let mut rng = seeded_rng(3);
        let mut set = ParamSet::new();
        let id = set.add_glorot("w", 20, 30, 20, 30, &mut rng);
        let bound = (6.0 / 50.0_f64).sqrt();
        assert!(set.get(id).value.max_abs() <= bound);
        // Same seed, same values.
        let mut rng2 = seeded_rng(3);
        let mut set2 = ParamSet::new();
        let id2 = set2.add_glorot("w", 20, 30, 20, 30, &mut rng2);
        assert_eq!(set.get(id).value, set2.get(id2).value);
    }

    #[test]
    fn zero_gradients_clears_all() {
        let mut set = ParamSet::new();
        let id = set.add("w", DenseMatrix::identity(2));
        set.get_mut(id).gradient = DenseMatrix::identity(2);
        set.zero_gradients();
        assert_eq!(set.get(id).gradient.max_abs(), 0.0);
    }
}
