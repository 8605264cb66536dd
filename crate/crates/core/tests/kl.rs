use aspca::basis::{eigendecompose, truncate, LatentVector, Truncation};
use aspca::experiment::{spectrum, ExperimentConfig};
use aspca::field::{generate_prior, PriorDataset};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn default_dataset() -> PriorDataset {
    let cfg = ExperimentConfig::default();
    generate_prior(
        &cfg.truth().unwrap(),
        &cfg.grid,
        cfg.dataset.n_realizations,
        &cfg.perturb_config(),
    )
    .unwrap()
}

#[test]
fn truncation_error_equals_discarded_eigenvalues() {
    let ds = default_dataset();
    let full = eigendecompose(&ds.covariance, &ds.mean).unwrap();
    for n in [5, 10, 15] {
        let basis = truncate(&full, Truncation::Count(n)).unwrap();
        let mse: f64 = ds
            .realizations
            .iter()
            .map(|m| {
                let rec = basis.synthesize(&basis.project(m).unwrap()).unwrap();
                m.0.iter()
                    .zip(&rec.0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / ds.realizations.len() as f64;
        let tail: f64 = full.eigenvalues.iter().skip(n).sum();
        assert!(
            ((mse - tail) / tail).abs() < 0.01,
            "N={n}: mse {mse}, tail {tail}"
        );
    }
}

#[test]
fn synthesized_fields_reproduce_truncated_covariance() {
    let ds = default_dataset();
    let basis = truncate(
        &eigendecompose(&ds.covariance, &ds.mean).unwrap(),
        Truncation::Count(6),
    )
    .unwrap();
    let target = &basis.retained
        * DMatrix::from_diagonal(&basis.retained_eigenvalues)
        * basis.retained.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples = 20_000;
    let n = basis.n_cells();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for _ in 0..samples {
        let xi = DVector::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
        let m = basis.synthesize(&LatentVector(xi)).unwrap().to_dvector() - ds.mean.to_dvector();
        acc += &m * m.transpose();
    }
    acc /= samples as f64;
    let rel = (acc - &target).norm() / target.norm();
    // Monte-Carlo error scales like sqrt(2 / samples) ~ 0.01.
    assert!(rel < 0.03, "relative covariance error {rel}");
}

#[test]
fn full_basis_reconstructs_in_span_fields_exactly() {
    let ds = default_dataset();
    let full = eigendecompose(&ds.covariance, &ds.mean).unwrap();
    let basis = truncate(&full, Truncation::Count(15)).unwrap();
    for m in ds.realizations.iter().take(20) {
        let inner = basis.synthesize(&basis.project(m).unwrap()).unwrap();
        let again = basis.synthesize(&basis.project(&inner).unwrap()).unwrap();
        let err = inner
            .0
            .iter()
            .zip(&again.0)
            .fold(0.0_f64, |e, (a, b)| e.max((a - b).abs()));
        assert!(err < 1e-8);
    }
}

#[test]
fn spectrum_rows_are_consistent() {
    let rows = spectrum(&default_dataset()).unwrap();
    assert_eq!(rows.len(), ExperimentConfig::default().grid.n_cells);
    assert!((rows.last().unwrap().cumulative - 1.0).abs() < 1e-12);
    let mut running = 0.0;
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.index, k);
        assert!(r.eigenvalue >= 0.0);
        running += r.energy;
        assert!((r.cumulative - running).abs() < 1e-12);
    }
    assert!(rows.windows(2).all(|w| w[0].eigenvalue >= w[1].eigenvalue));
    // Smooth perturbations concentrate energy in a handful of modes.
    assert!(rows[14].cumulative > 0.95);
}
