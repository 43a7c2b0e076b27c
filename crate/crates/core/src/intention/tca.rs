//! Linear transfer component analysis.
//!
//! With a linear kernel the problem can be solved in feature space. For a
//! pooled, standardized sample `Z` (source rows then target rows) the
//! transfer components are the leading solutions of
//!
//! ```text
//! (1/n) Zᵀ H Z · w = λ (Zᵀ L Z + μ I) · w
//! ```
//!
//! where `H` is the centering matrix and `L` the MMD coefficient matrix
//! (`1/n_s²` within source, `1/n_t²` within target, `-1/(n_s n_t)` across).
//! `Zᵀ L Z` collapses to `δ δᵀ` with `δ` the source/target mean difference,
//! so nothing of size `n × n` is ever formed. The returned basis is the
//! Euclidean-orthonormalised span of the leading `m` solutions, which makes
//! the projected linear-kernel MMD `‖Wᵀ δ‖²` never exceed `‖δ‖²`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::TravelFeature;
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcaConfig {
    pub components: usize,
    pub mu: f64,
    pub standardize: bool,
}

impl Default for TcaConfig {
    fn default() -> Self {
        Self {
            components: 8,
            mu: 1.0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcaTransform {
    pub kernel: Kernel,
    pub mu: f64,
    pub standardizer: Standardizer,
    /// `D_F × m`, orthonormal columns.
    pub basis: Matrix,
    /// Generalized eigenvalues of the retained components, descending.
    pub eigenvalues: Vec<f64>,
    pub source_count: usize,
    pub target_count: usize,
}

/// A projected travel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformedTravel {
    pub values: Vec<f64>,
    pub is_immobility: bool,
}

fn mean_of(rows: &[Vec<f64>], dim: usize) -> DVector<f64> {
    let mut m = DVector::zeros(dim);
    for r in rows {
        m += DVector::from_column_slice(r);
    }
    m / rows.len() as f64
}

/// Numerical rank of the linear kernel matrix `Z Zᵀ`, via `Zᵀ Z`.
fn kernel_rank(rows: &[Vec<f64>], dim: usize) -> usize {
    let mut g = DMatrix::zeros(dim, dim);
    for r in rows {
        let v = DVector::from_column_slice(r);
        g += &v * v.transpose();
    }
    let eig = SymmetricEigen::new(g).eigenvalues;
    let max = eig.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.iter().filter(|&&e| e > max * 1e-10).count()
}

pub fn fit_tca(source: &[Vec<f64>], target: &[Vec<f64>], config: &TcaConfig) -> Result<TcaTransform> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("TCA needs non-empty source and target samples"));
    }
    let dim = source[0].len();
    if source.iter().chain(target).any(|r| r.len() != dim) {
        return Err(Error::invalid("TCA samples have inconsistent widths"));
    }
    let m = config.components;
    if m == 0 || m > dim {
        return Err(Error::invalid(format!(
            "TCA components must lie in 1..={dim}, got {m}"
        )));
    }
    if !(config.mu >= 0.0) {
        return Err(Error::invalid("TCA regularizer mu must be non-negative"));
    }

    let standardizer = if config.standardize {
        Standardizer::fit(source.iter().chain(target).map(Vec::as_slice), dim)
    } else {
        Standardizer::identity(dim)
    };
    let zs: Vec<Vec<f64>> = source.iter().map(|r| standardizer.apply(r)).collect();
    let zt: Vec<Vec<f64>> = target.iter().map(|r| standardizer.apply(r)).collect();
    let pooled: Vec<Vec<f64>> = zs.iter().chain(&zt).cloned().collect();

    let rank = kernel_rank(&pooled, dim);
    if m > rank {
        return Err(Error::invalid(format!(
            "TCA components {m} exceed the kernel matrix rank {rank}"
        )));
    }

    let n = pooled.len() as f64;
    let center = mean_of(&pooled, dim);
    let mut scatter = DMatrix::zeros(dim, dim);
    for r in &pooled {
        let v = DVector::from_column_slice(r) - &center;
        scatter += &v * v.transpose();
    }
    scatter /= n;
    let delta = mean_of(&zs, dim) - mean_of(&zt, dim);
    let constraint = &delta * delta.transpose() + DMatrix::identity(dim, dim) * config.mu;

    let chol = constraint.cholesky().ok_or_else(|| {
        Error::Numerical("TCA constraint matrix is singular; increase mu".into())
    })?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("TCA Cholesky factor not invertible".into()))?;
    let reduced = &l_inv * &scatter * l_inv.transpose();
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(reduced);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gen = DMatrix::zeros(dim, m);
    for (k, &i) in order.iter().take(m).enumerate() {
        let w = l_inv.transpose() * eig.eigenvectors.column(i);
        gen.set_column(k, &w);
    }
    let eigenvalues = order.iter().take(m).map(|&i| eig.eigenvalues[i]).collect();

    let q = gen.qr().q();
    let mut basis = Matrix::zeros(dim, m);
    for k in 0..m {
        let col = q.column(k);
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            basis.set(r, k, sign * col[r]);
        }
    }
    if !basis.is_finite() {
        return Err(Error::Numerical("TCA produced a non-finite basis".into()));
    }

    Ok(TcaTransform {
        kernel: Kernel::Linear,
        mu: config.mu,
        standardizer,
        basis,
        eigenvalues,
        source_count: source.len(),
        target_count: target.len(),
    })
}

impl TcaTransform {
    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn components(&self) -> usize {
        self.basis.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let z = self.standardizer.apply(x);
        let mut out = vec![0.0; self.components()];
        for (r, zr) in z.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.basis.row(r)) {
                *o += zr * w;
            }
        }
        Ok(out)
    }

    pub fn apply_sequence(&self, features: &[TravelFeature]) -> Result<Vec<TransformedTravel>> {
        features
            .iter()
            .map(|f| {
                Ok(TransformedTravel {
                    values: self.apply(&f.values)?,
                    is_immobility: f.is_immobility,
                })
            })
            .collect()
    }

    /// Standardized but unprojected features.
    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        self.standardizer.apply(x)
    }
}
