use aspca::basis::{eigendecompose, truncate, ReducedBasis, Truncation};
use aspca::field::{generate_prior, true_model, Field, Grid, PerturbConfig};
use aspca::strategies::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn e(n: usize, k: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[k] = 1.0;
    v
}

fn dataset_basis(n_retained: usize) -> ReducedBasis {
    let grid = Grid::new(40, std::f64::consts::PI).unwrap();
    let ds = generate_prior(&true_model(&grid), &grid, 200, &PerturbConfig::default()).unwrap();
    truncate(
        &eigendecompose(&ds.covariance, &ds.mean).unwrap(),
        Truncation::Count(n_retained),
    )
    .unwrap()
}

fn gram_deviation(w: &DMatrix<f64>) -> f64 {
    let g = w.transpose() * w - DMatrix::identity(w.ncols(), w.ncols());
    g.amax()
}

#[test]
fn two_vector_rotation_oracle() {
    let b = identity_basis(&[2.0, 1.0], 1);
    let c = sensitivity_coefficients(&b, &[1.0, 1.0]).unwrap();
    for eps in [0.1, 0.01, 0.5] {
        let cfg = RotationConfig {
            epsilon: eps,
            reorthonormalize: false,
            ..RotationConfig::default()
        };
        let (r, gamma) = rotation_update(&b, &c, &cfg).unwrap();
        // c1 = 1 * 1 * 1 / (2 - 1) = 1, update = [0, 1], gamma = eps / 1.
        assert!((gamma.unwrap() - eps).abs() < 1e-15);
        let norm = (1.0 + eps * eps).sqrt();
        assert!((r.retained[(0, 0)] - 1.0 / norm).abs() < 1e-12);
        assert!((r.retained[(1, 0)] - eps / norm).abs() < 1e-12);
        assert_eq!(r.retained_eigenvalues, b.retained_eigenvalues);
    }
}

#[test]
fn swap_twice_reverses_on_toy_basis() {
    // Hand ranking: row norms of c1 are [1.43, 0.75] on the first call and
    // [15, 2.25] on the second, so the same pair trades back.
    let b = identity_basis(&[3.1, 3.0, 2.0, 1.0], 2);
    let grad = [1.0, 0.5, 0.0, 3.0];
    let c = sensitivity_coefficients(&b, &grad).unwrap();
    let (once, pairs) = swap_update(&b, &c, 1, AlphaMode::Product, 1e-8).unwrap();
    assert_eq!(pairs.retained, vec![1]);
    assert_eq!(pairs.complement, vec![1]);
    assert_eq!(once.retained.column(1).into_owned(), e(4, 3));
    assert_eq!(once.complement.column(1).into_owned(), e(4, 1));
    assert_eq!(once.retained_eigenvalues.as_slice(), &[3.1, 1.0]);
    assert_eq!(once.complement_eigenvalues.as_slice(), &[2.0, 3.0]);

    let c2 = sensitivity_coefficients(&once, &grad).unwrap();
    let (twice, _) = swap_update(&once, &c2, 1, AlphaMode::Product, 1e-8).unwrap();
    assert_eq!(twice, b);
}

#[test]
fn swap_sorting_example() {
    // N = 2 with one complement vector; the second retained column has the
    // smaller update norm and is exchanged.
    let b = identity_basis(&[4.0, 3.0, 1.0], 2);
    let c = sensitivity_coefficients(&b, &[1.0, 0.01, 2.0]).unwrap();
    let (s, pairs) = swap_update(&b, &c, 1, AlphaMode::Product, 1e-8).unwrap();
    assert_eq!((pairs.retained, pairs.complement), (vec![1], vec![0]));
    assert_eq!(s.retained.column(1).into_owned(), e(3, 2));
}

#[test]
fn extension_increases_captured_sensitivity() {
    let b = dataset_basis(3);
    let grad: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).cos()).collect();
    let c = sensitivity_coefficients(&b, &grad).unwrap();
    let (ext, promoted) = extension_update(&b, &c, 1).unwrap();
    assert_ne!(c.complement_c[promoted[0]], 0.0);
    let captured = |basis: &ReducedBasis| {
        sensitivity_coefficients(basis, &grad)
            .unwrap()
            .retained_c
            .norm()
    };
    assert!(captured(&ext) > captured(&b));
    let (same, none) = extension_update(&b, &c, 0).unwrap();
    assert_eq!(same, b);
    assert!(none.is_empty());
}

#[test]
fn rotation_deviation_is_quadratic_in_epsilon() {
    let b = dataset_basis(5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ratios = Vec::new();
    for _ in 0..10 {
        let grad: Vec<f64> = (0..b.n_cells())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let c = sensitivity_coefficients(&b, &grad).unwrap();
        let dev = |eps: f64| {
            let cfg = RotationConfig {
                epsilon: eps,
                reorthonormalize: false,
                ..RotationConfig::default()
            };
            gram_deviation(&rotation_update(&b, &c, &cfg).unwrap().0.retained)
        };
        ratios.push(dev(0.2) / dev(0.1));
    }
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[4] + ratios[5]);
    assert!(median >= 3.5, "median ratio {median}, all {ratios:?}");
}

#[test]
fn strategies_keep_eigenvalue_multiset_and_orthonormality() {
    let b = dataset_basis(4);
    let grad: Vec<f64> = (0..40).map(|i| ((i * i) as f64 * 0.01).sin()).collect();
    let c = sensitivity_coefficients(&b, &grad).unwrap();
    let all = |x: &ReducedBasis| {
        let mut v: Vec<f64> = x
            .retained_eigenvalues
            .iter()
            .chain(x.complement_eigenvalues.iter())
            .copied()
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (rot, _) = rotation_update(&b, &c, &RotationConfig::default()).unwrap();
    let (ext, _) = extension_update(&b, &c, 2).unwrap();
    let (swp, _) = swap_update(&b, &c, 2, AlphaMode::Product, 1e-8).unwrap();
    for x in [&rot, &ext, &swp] {
        assert_eq!(all(x), all(&b));
    }
    assert_eq!(rot.n_retained(), 4);
    assert_eq!(swp.n_retained(), 4);
    assert_eq!(ext.n_retained(), 6);
    assert!(ext.orthonormality_error() < 1e-12);
    assert!(swp.orthonormality_error() < 1e-12);
    assert!(gram_deviation(&rot.retained) < 1e-12);
}
