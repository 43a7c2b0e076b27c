use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named collection of trainable matrices.
///
/// Registration order is the serialization order, so two sets built by the
/// same constructor with the same seed are byte-identical.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-normal initialised `rows × cols` weight.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        self.add(name, random_normal(rows, cols, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Maps a flat scalar index to `(param, offset)`.
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (i, v) in self.values.iter().enumerate() {
            if flat < v.len() {
                return (ParamId(i), flat);
            }
            flat -= v.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn scalar(&self, flat: usize) -> f64 {
        let (id, off) = self.locate(flat);
        self.values[id.0].data()[off]
    }

    pub fn set_scalar(&mut self, flat: usize, value: f64) {
        let (id, off) = self.locate(flat);
        self.values[id.0].data_mut()[off] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        if id.0 >= self.grads.len() {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of the flat scalar index used by [`ParamSet::scalar`].
    pub fn scalar(&self, params: &ParamSet, flat: usize) -> f64 {
        let (id, off) = params.locate(flat);
        self.get(id).map_or(0.0, |g| g.data()[off])
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}
