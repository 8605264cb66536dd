//! Karhunen-Loève / PCA parametrization: eigendecomposition of the prior
//! covariance, energy truncation and the maps between latent coefficients
//! and model fields.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::field::Field;

/// Eigenvalues at or below this magnitude are indistinguishable from zero:
/// a backward-stable symmetric solver perturbs them by about `n * eps * beta_max`.
pub fn eigen_zero_threshold(beta_max: f64, n: usize) -> f64 {
    16.0 * n as f64 * f64::EPSILON * beta_max
}

/// Complete eigenbasis of a covariance matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct FullBasis {
    pub vectors: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub mean: Field,
}

impl FullBasis {
    /// Fraction of the total eigenvalue sum carried by each component.
    pub fn energy_fractions(&self) -> Result<Vec<f64>> {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return Err(invalid("covariance has no energy"));
        }
        Ok(self.eigenvalues.iter().map(|b| b / total).collect())
    }
}

/// Truncation rule for [`truncate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Smallest prefix whose cumulative energy reaches the threshold,
    /// optionally capped at `max_components`.
    Energy {
        threshold: f64,
        max_components: Option<usize>,
    },
    Count(usize),
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Energy {
            threshold: 0.95,
            max_components: Some(15),
        }
    }
}

/// Retained eigenvectors `W`, their eigenvalues and the truncated complement `W*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    pub retained: DMatrix<f64>,
    pub retained_eigenvalues: DVector<f64>,
    pub complement: DMatrix<f64>,
    pub complement_eigenvalues: DVector<f64>,
    pub mean: Field,
}

/// Symmetric eigendecomposition of `covariance`, sorted descending and
/// sign-normalized so each vector's largest-magnitude entry is positive.
pub fn eigendecompose(covariance: &DMatrix<f64>, mean: &Field) -> Result<FullBasis> {
    let n = covariance.nrows();
    if n == 0 || covariance.ncols() != n {
        return Err(invalid("covariance must be a non-empty square matrix"));
    }
    if mean.len() != n {
        return Err(invalid(format!(
            "mean has {} cells, covariance is {n}x{n}",
            mean.len()
        )));
    }
    let scale = covariance.amax().max(1.0);
    let asym = (covariance - covariance.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(invalid(format!(
            "covariance is not symmetric (max deviation {asym:e})"
        )));
    }
    let eig = covariance.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let beta_max = eig.eigenvalues.max().max(0.0);
    let mut vectors = DMatrix::zeros(n, n);
    let mut eigenvalues = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
        let beta = eig.eigenvalues[src];
        if beta < -eigen_zero_threshold(beta_max, n) {
            return Err(invalid(format!(
                "covariance is not positive semidefinite (eigenvalue {beta:e})"
            )));
        }
        eigenvalues[dst] = beta.max(0.0);
    }
    Ok(FullBasis {
        vectors,
        eigenvalues,
        mean: mean.clone(),
    })
}

/// Splits a full basis into retained and complement parts.
pub fn truncate(basis: &FullBasis, rule: Truncation) -> Result<ReducedBasis> {
    let n = basis.eigenvalues.len();
    let fractions = basis.energy_fractions()?;
    let beta_max = basis.eigenvalues[0];
    let rank = basis
        .eigenvalues
        .iter()
        .take_while(|&&b| b > eigen_zero_threshold(beta_max, n))
        .count();
    let count = match rule {
        Truncation::Count(k) => {
            if k < 1 || k > n {
                return Err(invalid(format!("component count {k} outside 1..={n}")));
            }
            if k > rank {
                return Err(invalid(format!(
                    "requested {k} components but only {rank} have positive energy"
                )));
            }
            k
        }
        Truncation::Energy {
            threshold,
            max_components,
        } => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(invalid(format!(
                    "energy threshold {threshold} outside (0, 1]"
                )));
            }
            let mut cumulative = 0.0;
            let mut k = rank;
            for (i, f) in fractions.iter().enumerate().take(rank) {
                cumulative += f;
                if cumulative >= threshold - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            match max_components {
                Some(0) => return Err(invalid("max_components must be at least 1")),
                Some(cap) => k.min(cap),
                None => k,
            }
        }
    };
    Ok(ReducedBasis {
        retained: basis.vectors.columns(0, count).into_owned(),
        retained_eigenvalues: basis.eigenvalues.rows(0, count).into_owned(),
        complement: basis.vectors.columns(count, n - count).into_owned(),
        complement_eigenvalues: basis.eigenvalues.rows(count, n - count).into_owned(),
        mean: basis.mean.clone(),
    })
}

/// Latent coefficients of a reduced parametrization.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub DVector<f64>);

impl LatentVector {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn from_slice(xi: &[f64]) -> Self {
        Self(DVector::from_column_slice(xi))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ReducedBasis {
    pub fn n_cells(&self) -> usize {
        self.retained.nrows()
    }

    pub fn n_retained(&self) -> usize {
        self.retained.ncols()
    }

    pub fn n_complement(&self) -> usize {
        self.complement.ncols()
    }

    /// Per-component scale `sqrt(beta_i)`.
    pub fn scales(&self) -> DVector<f64> {
        self.retained_eigenvalues.map(f64::sqrt)
    }

    /// `m = mean + W diag(sqrt(beta)) xi`.
    pub fn synthesize(&self, xi: &LatentVector) -> Result<Field> {
        if xi.len() != self.n_retained() {
            return Err(invalid(format!(
                "latent vector has {} entries, basis retains {}",
                xi.len(),
                self.n_retained()
            )));
        }
        let scaled = xi.0.component_mul(&self.scales());
        let m = self.mean.to_dvector() + &self.retained * scaled;
        Ok(Field(m.as_slice().to_vec()))
    }

    /// Left inverse of [`synthesize`](Self::synthesize) for an orthonormal basis.
    pub fn project(&self, m: &Field) -> Result<LatentVector> {
        if m.len() != self.n_cells() {
            return Err(invalid(format!(
                "field has {} cells, basis has {}",
                m.len(),
                self.n_cells()
            )));
        }
        if let Some(i) = self.retained_eigenvalues.iter().position(|&b| b <= 0.0) {
            return Err(invalid(format!(
                "retained component {i} has zero eigenvalue"
            )));
        }
        let centered = m.to_dvector() - self.mean.to_dvector();
        let coeffs = self.retained.tr_mul(&centered);
        Ok(LatentVector(coeffs.component_div(&self.scales())))
    }

    /// Gradient in latent space from a gradient in model space:
    /// `result_i = sqrt(beta_i) <W_i, grad_m>`.
    pub fn chain_gradient(&self, grad_m: &[f64]) -> Result<DVector<f64>> {
        if grad_m.len() != self.n_cells() {
            return Err(invalid(format!(
                "gradient has {} entries, basis has {} cells",
                grad_m.len(),
                self.n_cells()
            )));
        }
        let g = DVector::from_column_slice(grad_m);
        Ok(self.retained.tr_mul(&g).component_mul(&self.scales()))
    }

    /// Short content hash for audit logs.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for m in [&self.retained, &self.complement] {
            hasher.update((m.nrows() as u64).to_le_bytes());
            hasher.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        for v in self
            .retained_eigenvalues
            .iter()
            .chain(self.complement_eigenvalues.iter())
        {
            hasher.update(v.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `max |W^T W - I|` over the retained columns.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.retained.tr_mul(&self.retained);
        (gram - DMatrix::identity(self.n_retained(), self.n_retained())).amax()
    }
}

/// JSON export of a reduced basis; matrices are column-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisExport {
    #[serde(rename = "N")]
    pub n: usize,
    pub n_cells: usize,
    pub mean: Vec<f64>,
    pub retained: Vec<f64>,
    pub retained_eigenvalues: Vec<f64>,
    pub complement_eigenvalues: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub complement: Option<Vec<f64>>,
}

impl BasisExport {
    pub fn new(basis: &ReducedBasis, include_complement: bool) -> Self {
        Self {
            n: basis.n_retained(),
            n_cells: basis.n_cells(),
            mean: basis.mean.0.clone(),
            retained: basis.retained.as_slice().to_vec(),
            retained_eigenvalues: basis.retained_eigenvalues.as_slice().to_vec(),
            complement_eigenvalues: basis.complement_eigenvalues.as_slice().to_vec(),
            complement: include_complement.then(|| basis.complement.as_slice().to_vec()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).map_err(std::io::Error::from)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
