//! Gradient-driven basis adaptations: first-order perturbative rotation of
//! the retained eigenvectors, extension by the most sensitive truncated
//! eigenvectors, and swapping weak retained vectors for sensitive ones.
//!
//! All three share the same ingredients. The model-space gradient is
//! decomposed over retained and complement eigenvectors
//! (`c_k = <grad, phi_k>`), and each retained/complement pair gets a
//! first-order mixing coefficient
//!
//! ```text
//! c1[i][n] = alpha(i, n) * beta_n / (beta_i - beta_n)
//! ```
//!
//! where `alpha` is either `c_i * c_n` or `c_n / c_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::ReducedBasis;
use crate::error::{invalid, Result};

/// Gradient coefficients over retained and complement eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCoefficients {
    pub retained_c: DVector<f64>,
    pub complement_c: DVector<f64>,
}

impl SensitivityCoefficients {
    pub fn is_zero(&self) -> bool {
        self.retained_c
            .iter()
            .chain(self.complement_c.iter())
            .all(|&c| c == 0.0)
    }
}

pub fn sensitivity_coefficients(
    basis: &ReducedBasis,
    grad_m: &[f64],
) -> Result<SensitivityCoefficients> {
    if grad_m.len() != basis.n_cells() {
        return Err(invalid(format!(
            "gradient has {} entries, basis has {} cells",
            grad_m.len(),
            basis.n_cells()
        )));
    }
    let g = DVector::from_column_slice(grad_m);
    Ok(SensitivityCoefficients {
        retained_c: basis.retained.tr_mul(&g),
        complement_c: basis.complement.tr_mul(&g),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha = c_i * c_n`.
    Product,
    /// `alpha = c_n / c_i`.
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationConfig {
    pub epsilon: f64,
    pub alpha_mode: AlphaMode,
    pub reorthonormalize: bool,
    /// Pairs with `|beta_i - beta_n| < denom_tol * beta_max` are skipped.
    pub denom_tol: f64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            alpha_mode: AlphaMode::Product,
            reorthonormalize: true,
            denom_tol: 1e-8,
        }
    }
}

impl RotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(invalid(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.denom_tol > 0.0) {
            return Err(invalid("denom_tol must be positive"));
        }
        Ok(())
    }
}

/// Below this magnitude a retained coefficient cannot be used as a divisor.
const RATIO_TINY: f64 = 1e-300;

/// First-order mixing coefficients `c1[i][n]`, shape `N x (n - N)`.
pub fn first_order_coefficients(
    basis: &ReducedBasis,
    coeffs: &SensitivityCoefficients,
    mode: AlphaMode,
    denom_tol: f64,
) -> Result<DMatrix<f64>> {
    let (nr, nc) = (basis.n_retained(), basis.n_complement());
    if coeffs.retained_c.len() != nr || coeffs.complement_c.len() != nc {
        return Err(invalid("sensitivity coefficients do not match the basis"));
    }
    let beta_max = basis
        .retained_eigenvalues
        .iter()
        .chain(basis.complement_eigenvalues.iter())
        .fold(0.0_f64, |m, &b| m.max(b));
    let mut c1 = DMatrix::zeros(nr, nc);
    for i in 0..nr {
        let ci = coeffs.retained_c[i];
        let beta_i = basis.retained_eigenvalues[i];
        if mode == AlphaMode::Ratio && ci.abs() < RATIO_TINY {
            if coeffs.complement_c.iter().any(|&c| c != 0.0) {
                log::warn!(
                    "retained component {i} has vanishing sensitivity; skipped in ratio mode"
                );
            }
            continue;
        }
        for n in 0..nc {
            let cn = coeffs.complement_c[n];
            let beta_n = basis.complement_eigenvalues[n];
            let denom = beta_i - beta_n;
            if denom.abs() < denom_tol * beta_max {
                continue;
            }
            let alpha = match mode {
                AlphaMode::Product => ci * cn,
                AlphaMode::Ratio => cn / ci,
            };
            c1[(i, n)] = alpha * beta_n / denom;
        }
    }
    Ok(c1)
}

/// Modified Gram-Schmidt over the columns, in order.
fn gram_schmidt(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        for k in 0..j {
            let proj = m.column(k).dot(&m.column(j));
            let qk = m.column(k).into_owned();
            m.column_mut(j).axpy(-proj, &qk, 1.0);
        }
        let norm = m.column(j).norm();
        m.column_mut(j).unscale_mut(norm);
    }
}

/// Rotates every retained eigenvector towards the complement:
/// `phi_i <- phi_i + gamma * sum_n c1[i][n] phi*_n`, with
/// `gamma = epsilon / max_i ||sum_n c1[i][n] phi*_n||`.
pub fn rotation_update(
    basis: &ReducedBasis,
    coeffs: &SensitivityCoefficients,
    cfg: &RotationConfig,
) -> Result<(ReducedBasis, Option<f64>)> {
    cfg.validate()?;
    let c1 = first_order_coefficients(basis, coeffs, cfg.alpha_mode, cfg.denom_tol)?;
    // Column i of `updates` is sum_n c1[i][n] phi*_n.
    let updates = &basis.complement * c1.transpose();
    let largest = updates
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0_f64, f64::max);
    if largest == 0.0 || !largest.is_finite() {
        return Ok((basis.clone(), None));
    }
    let gamma = cfg.epsilon / largest;
    let mut retained = &basis.retained + updates * gamma;
    for mut col in retained.column_iter_mut() {
        let norm = col.norm();
        col.unscale_mut(norm);
    }
    if cfg.reorthonormalize {
        gram_schmidt(&mut retained);
    }
    Ok((
        ReducedBasis {
            retained,
            ..basis.clone()
        },
        Some(gamma),
    ))
}

/// Indices sorted by descending key; ties keep index order.
fn descending_order(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

/// Moves the `n_add` complement vectors with the largest `|c|` into the
/// retained set. Returns the promoted complement indices.
pub fn extension_update(
    basis: &ReducedBasis,
    coeffs: &SensitivityCoefficients,
    n_add: usize,
) -> Result<(ReducedBasis, Vec<usize>)> {
    let nc = basis.n_complement();
    if n_add > nc {
        return Err(invalid(format!(
            "cannot add {n_add} vectors from a complement of {nc}"
        )));
    }
    if coeffs.complement_c.len() != nc || coeffs.retained_c.len() != basis.n_retained() {
        return Err(invalid("sensitivity coefficients do not match the basis"));
    }
    if n_add == 0 || coeffs.complement_c.iter().all(|&c| c == 0.0) {
        return Ok((basis.clone(), Vec::new()));
    }
    let magnitudes: Vec<f64> = coeffs.complement_c.iter().map(|c| c.abs()).collect();
    let promoted: Vec<usize> = descending_order(&magnitudes)
        .into_iter()
        .take(n_add)
        .collect();
    if let Some(&k) = promoted
        .iter()
        .find(|&&k| basis.complement_eigenvalues[k] <= 0.0)
    {
        return Err(invalid(format!(
            "complement vector {k} has zero eigenvalue and cannot be parametrized"
        )));
    }
    let keep: Vec<usize> = (0..nc).filter(|k| !promoted.contains(k)).collect();

    let n = basis.n_cells();
    let nr = basis.n_retained() + n_add;
    let mut retained = DMatrix::zeros(n, nr);
    let mut retained_eigenvalues = DVector::zeros(nr);
    retained
        .columns_mut(0, basis.n_retained())
        .copy_from(&basis.retained);
    retained_eigenvalues
        .rows_mut(0, basis.n_retained())
        .copy_from(&basis.retained_eigenvalues);
    for (off, &src) in promoted.iter().enumerate() {
        let dst = basis.n_retained() + off;
        retained.set_column(dst, &basis.complement.column(src));
        retained_eigenvalues[dst] = basis.complement_eigenvalues[src];
    }
    let mut complement = DMatrix::zeros(n, keep.len());
    let mut complement_eigenvalues = DVector::zeros(keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        complement.set_column(dst, &basis.complement.column(src));
        complement_eigenvalues[dst] = basis.complement_eigenvalues[src];
    }
    Ok((
        ReducedBasis {
            retained,
            retained_eigenvalues,
            complement,
            complement_eigenvalues,
            mean: basis.mean.clone(),
        },
        promoted,
    ))
}

/// Result of a swap: which retained and complement positions were exchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapPairs {
    pub retained: Vec<usize>,
    pub complement: Vec<usize>,
}

/// Exchanges the `n_swap` retained vectors with the smallest first-order
/// update norm for the `n_swap` complement vectors with the largest `|c|`.
/// Exchanged vectors trade positions and carry their eigenvalues along.
pub fn swap_update(
    basis: &ReducedBasis,
    coeffs: &SensitivityCoefficients,
    n_swap: usize,
    mode: AlphaMode,
    denom_tol: f64,
) -> Result<(ReducedBasis, SwapPairs)> {
    let (nr, nc) = (basis.n_retained(), basis.n_complement());
    if n_swap > nr.saturating_sub(1).min(nc) {
        return Err(invalid(format!(
            "n_swap {n_swap} must not exceed min(N - 1, complement) = {}",
            nr.saturating_sub(1).min(nc)
        )));
    }
    let c1 = first_order_coefficients(basis, coeffs, mode, denom_tol)?;
    let no_swap = SwapPairs {
        retained: Vec::new(),
        complement: Vec::new(),
    };
    if n_swap == 0 || coeffs.is_zero() {
        return Ok((basis.clone(), no_swap));
    }
    // Complement vectors are orthonormal, so the update norm is the row norm of c1.
    let update_norms: Vec<f64> = c1.row_iter().map(|r| r.norm()).collect();
    let ranked_retained = descending_order(&update_norms);
    let magnitudes: Vec<f64> = coeffs.complement_c.iter().map(|c| c.abs()).collect();
    let ranked_complement = descending_order(&magnitudes);

    let outgoing = &ranked_retained[nr - n_swap..];
    let incoming = &ranked_complement[..n_swap];
    if let Some(&k) = incoming
        .iter()
        .find(|&&k| basis.complement_eigenvalues[k] <= 0.0)
    {
        return Err(invalid(format!(
            "complement vector {k} has zero eigenvalue and cannot be parametrized"
        )));
    }
    let mut next = basis.clone();
    for (&r, &c) in outgoing.iter().zip(incoming) {
        next.retained.set_column(r, &basis.complement.column(c));
        next.retained_eigenvalues[r] = basis.complement_eigenvalues[c];
        next.complement.set_column(c, &basis.retained.column(r));
        next.complement_eigenvalues[c] = basis.retained_eigenvalues[r];
    }
    Ok((
        next,
        SwapPairs {
            retained: outgoing.to_vec(),
            complement: incoming.to_vec(),
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Rotation,
    Extension,
    Swap,
}

/// Audit record of one basis adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub strategy: StrategyKind,
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Rotation magnitude actually used (rotation only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Retained positions that changed (swap) or were appended (extension).
    pub retained_indices: Vec<usize>,
    /// Complement positions that were promoted or exchanged.
    pub complement_indices: Vec<usize>,
    pub basis_before_hash: String,
    pub basis_after_hash: String,
    pub objective_before: f64,
    pub objective_after: f64,
    /// False when the update was discarded and the basis kept.
    pub accepted: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;

    fn identity_basis(eigs: &[f64], n_retained: usize) -> ReducedBasis {
        let n = eigs.len();
        let eye = DMatrix::<f64>::identity(n, n);
        ReducedBasis {
            retained: eye.columns(0, n_retained).into_owned(),
            retained_eigenvalues: DVector::from_column_slice(&eigs[..n_retained]),
            complement: eye.columns(n_retained, n - n_retained).into_owned(),
            complement_eigenvalues: DVector::from_column_slice(&eigs[n_retained..]),
            mean: Field::zeros(n),
        }
    }

    #[test]
    fn coefficients_decompose_gradient() {
        let b = identity_basis(&[3.0, 2.0, 1.0], 1);
        let c = sensitivity_coefficients(&b, &[0.0; 3]).unwrap();
        assert!(c.is_zero());
        let c = sensitivity_coefficients(&b, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.retained_c.as_slice(), &[1.0]);
        assert_eq!(c.complement_c.as_slice(), &[0.0, 0.0]);
        let c = sensitivity_coefficients(&b, &[0.0, 0.0, 2.0]).unwrap();
        assert_eq!(c.complement_c.as_slice(), &[0.0, 2.0]);
        assert!(sensitivity_coefficients(&b, &[0.0; 2]).is_err());
    }

    #[test]
    fn two_vector_rotation() {
        let b = identity_basis(&[2.0, 1.0], 1);
        let c = sensitivity_coefficients(&b, &[1.0, 1.0]).unwrap();
        let eps = 0.1;
        let cfg = RotationConfig {
            epsilon: eps,
            reorthonormalize: false,
            ..Default::default()
        };
        let (r, gamma) = rotation_update(&b, &c, &cfg).unwrap();
        assert!((gamma.unwrap() - eps).abs() < 1e-15);
        let norm = (1.0 + eps * eps).sqrt();
        assert!((r.retained[(0, 0)] - 1.0 / norm).abs() < 1e-12);
        assert!((r.retained[(1, 0)] - eps / norm).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let b = identity_basis(&[4.0, 3.0, 2.0, 1.0], 2);
        let c = sensitivity_coefficients(&b, &[0.0; 4]).unwrap();
        assert_eq!(
            rotation_update(&b, &c, &RotationConfig::default())
                .unwrap()
                .0,
            b
        );
        assert_eq!(extension_update(&b, &c, 2).unwrap().0, b);
        assert_eq!(
            swap_update(&b, &c, 1, AlphaMode::Product, 1e-8).unwrap().0,
            b
        );
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let b = identity_basis(&[1.0, 1.0], 1);
        let c = sensitivity_coefficients(&b, &[1.0, 1.0]).unwrap();
        let (r, gamma) = rotation_update(&b, &c, &RotationConfig::default()).unwrap();
        assert_eq!(gamma, None);
        assert_eq!(r, b);
    }

    #[test]
    fn ratio_mode_skips_insensitive_components() {
        let b = identity_basis(&[3.0, 2.0, 1.0], 2);
        let c = sensitivity_coefficients(&b, &[0.0, 1.0, 1.0]).unwrap();
        let c1 = first_order_coefficients(&b, &c, AlphaMode::Ratio, 1e-8).unwrap();
        assert_eq!(c1[(0, 0)], 0.0);
        // c_n / c_i * beta_n / (beta_i - beta_n) = 1 * 1 / (2 - 1)
        assert_eq!(c1[(1, 0)], 1.0);
    }

    #[test]
    fn rotation_with_reorthonormalization_is_exact() {
        let b = identity_basis(&[5.0, 4.0, 3.0, 2.0, 1.0], 3);
        let c = sensitivity_coefficients(&b, &[0.3, -0.7, 0.2, 1.1, -0.4]).unwrap();
        let (r, _) = rotation_update(&b, &c, &RotationConfig::default()).unwrap();
        assert!(r.orthonormality_error() < 1e-12);
        assert_eq!(r.retained_eigenvalues, b.retained_eigenvalues);
        assert_eq!(r.complement, b.complement);
    }

    #[test]
    fn extension_promotes_largest_sensitivity() {
        let b = identity_basis(&[4.0, 3.0, 2.0, 1.0], 1);
        let c = sensitivity_coefficients(&b, &[1.0, 0.1, 5.0, -0.3]).unwrap();
        let (e, promoted) = extension_update(&b, &c, 1).unwrap();
        assert_eq!(promoted, vec![1]);
        assert_eq!(e.n_retained(), 2);
        assert_eq!(e.retained[(2, 1)], 1.0);
        assert_eq!(e.retained_eigenvalues.as_slice(), &[4.0, 2.0]);
        assert_eq!(e.complement_eigenvalues.as_slice(), &[3.0, 1.0]);
        assert_eq!(extension_update(&b, &c, 0).unwrap().0, b);
        assert!(extension_update(&b, &c, 4).is_err());
    }

    #[test]
    fn swap_exchanges_weakest_for_strongest() {
        let b = identity_basis(&[3.0, 2.0, 1.0], 2);
        // c1 rows: [c_0 c_2 b_2/(b_0-b_2)] = [2 * 1 * 1 / 2] = 1; [0.01 * 1 * 1] = 0.01
        let c = sensitivity_coefficients(&b, &[2.0, 0.01, 1.0]).unwrap();
        let (s, pairs) = swap_update(&b, &c, 1, AlphaMode::Product, 1e-8).unwrap();
        assert_eq!(pairs.retained, vec![1]);
        assert_eq!(pairs.complement, vec![0]);
        assert_eq!(s.retained_eigenvalues.as_slice(), &[3.0, 1.0]);
        assert_eq!(s.complement_eigenvalues.as_slice(), &[2.0]);
        assert_eq!(s.retained[(2, 1)], 1.0);
        assert!(swap_update(&b, &c, 2, AlphaMode::Product, 1e-8).is_err());
        assert_eq!(
            swap_update(&b, &c, 0, AlphaMode::Product, 1e-8).unwrap().0,
            b
        );
    }
}
