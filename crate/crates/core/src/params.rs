//! Named trainable matrices.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tape::{Matrix, Var};

/// Ordered collection of named parameter matrices.
///
/// The `i`-th parameter is the `i`-th leaf of a tape built with
/// [`crate::tape::Tape::with_params`], so the [`Var`] returned by
/// [`ParamSet::add`] is valid on every such tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        Var::from_index(self.values.len() - 1)
    }

    /// Adds a `rows × cols` matrix drawn uniformly from `±1/√rows`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Var {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        self.add_scaled(name, rows, cols, bound, rng)
    }

    /// Adds a `rows × cols` matrix drawn uniformly from `±bound`.
    pub fn add_scaled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Var {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let m = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, v: Var) -> &Matrix {
        &self.values[v.index()]
    }

    pub fn get_mut(&mut self, v: Var) -> &mut Matrix {
        &mut self.values[v.index()]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Replaces every value with one of identical name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for (name, (dst, src)) in self
            .names
            .iter()
            .zip(self.values.iter_mut().zip(&other.values))
        {
            if dst.dim() != src.dim() {
                return Err(Error::Contract(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    dst.dim(),
                    src.dim()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }
}
