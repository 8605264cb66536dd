//! Spatial fields on a uniform 1D grid, the synthetic true model, and the
//! prior ensemble used to build the PCA basis.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Uniform cell-centred grid on `[0, length]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_cells: usize,
    pub length: f64,
}

impl Grid {
    pub fn new(n_cells: usize, length: f64) -> Result<Self> {
        let grid = Self { n_cells, length };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells < 2 {
            return Err(invalid(format!(
                "grid needs at least 2 cells, got {}",
                self.n_cells
            )));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(invalid(format!(
                "grid length must be positive, got {}",
                self.length
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_cells as f64
    }

    pub fn cell_centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_cells).map(|i| (i as f64 + 0.5) * dx).collect()
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n_cells: 100,
            length: PI,
        }
    }
}

/// Per-cell parameter vector (the diffusion coefficient in the reference problem).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("field value at cell {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    /// Root-mean-square difference between two fields of equal length.
    pub fn rmse(&self, other: &Field) -> f64 {
        assert_eq!(
            self.len(),
            other.len(),
            "rmse of fields with different lengths"
        );
        let ss: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        (ss / self.len() as f64).sqrt()
    }

    /// One value per line with a `value` header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.len() * 24 + 8);
        out.push_str("value\n");
        for v in &self.0 {
            out.push_str(&format!("{v:e}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|e| Error::Parse {
                location: format!("{}:{}", path.display(), lineno + 1),
                message: format!("{e}"),
            })?;
            values.push(v);
        }
        Field::new(values)
    }
}

/// Pointwise value of the synthetic true diffusion coefficient.
pub fn true_model_value(x: f64) -> f64 {
    3.5 - 1.6 * x.sin() + 0.1 * (300.0 * x).sqrt().cos()
}

/// Synthetic true model evaluated at the grid cell centres.
pub fn true_model(grid: &Grid) -> Field {
    Field(
        grid.cell_centers()
            .into_iter()
            .map(true_model_value)
            .collect(),
    )
}

/// Settings for the smooth Gaussian perturbations of the prior ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub amplitude: f64,
    /// Squared-exponential length scale as a fraction of the domain length.
    pub correlation_length: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.3,
            correlation_length: 0.25,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero amplitude is accepted and yields an unperturbed ensemble.
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(invalid(format!(
                "amplitude must be non-negative, got {}",
                self.amplitude
            )));
        }
        if !(self.correlation_length > 0.0 && self.correlation_length <= 1.0) {
            return Err(invalid(format!(
                "correlation_length must lie in (0, 1], got {}",
                self.correlation_length
            )));
        }
        Ok(())
    }
}

/// Ensemble of prior realizations with cached statistics.
#[derive(Debug, Clone)]
pub struct PriorDataset {
    pub realizations: Vec<Field>,
    pub mean: Field,
    pub covariance: DMatrix<f64>,
}

impl PriorDataset {
    pub fn from_realizations(realizations: Vec<Field>) -> Result<Self> {
        let (mean, covariance) = dataset_statistics(&realizations)?;
        Ok(Self {
            realizations,
            mean,
            covariance,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.mean.len()
    }
}

const CHOLESKY_JITTER: f64 = 1e-10;

/// Lower Cholesky factor of the unit-amplitude squared-exponential covariance.
fn smooth_covariance_factor(grid: &Grid, correlation_length: f64) -> Result<DMatrix<f64>> {
    let x = grid.cell_centers();
    let n = x.len();
    let ell = correlation_length * grid.length;
    let mut jitter = CHOLESKY_JITTER;
    loop {
        let k = DMatrix::from_fn(n, n, |i, j| {
            let r = (x[i] - x[j]) / ell;
            let v = (-0.5 * r * r).exp();
            if i == j {
                v + jitter
            } else {
                v
            }
        });
        if let Some(chol) = k.cholesky() {
            return Ok(chol.l());
        }
        // Rounding can leave the kernel numerically indefinite for long length scales.
        jitter *= 10.0;
        if jitter > 1e-4 {
            return Err(invalid(
                "squared-exponential covariance could not be factorized",
            ));
        }
    }
}

/// Draws `n_real` realizations of `base` plus a smooth zero-mean Gaussian field.
pub fn generate_prior(
    base: &Field,
    grid: &Grid,
    n_real: usize,
    cfg: &PerturbConfig,
) -> Result<PriorDataset> {
    grid.validate()?;
    cfg.validate()?;
    if n_real < 2 {
        return Err(invalid(format!(
            "need at least 2 realizations, got {n_real}"
        )));
    }
    if base.len() != grid.n_cells {
        return Err(invalid(format!(
            "base field has {} cells, grid has {}",
            base.len(),
            grid.n_cells
        )));
    }
    let n = grid.n_cells;
    let factor = smooth_covariance_factor(grid, cfg.correlation_length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut realizations = Vec::with_capacity(n_real);
    for _ in 0..n_real {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let perturbation = &factor * z;
        let values = base
            .0
            .iter()
            .zip(perturbation.iter())
            .map(|(b, p)| b + cfg.amplitude * p)
            .collect();
        realizations.push(Field(values));
    }
    PriorDataset::from_realizations(realizations)
}

/// Adds a random-phase superposition of the `noise_wavenumber` lowest nonzero
/// Fourier modes on `[0, L]`, scaled so its largest magnitude is `noise_amplitude`.
pub fn add_low_frequency_noise(
    field: &Field,
    grid: &Grid,
    noise_amplitude: f64,
    noise_wavenumber: usize,
    seed: u64,
) -> Result<Field> {
    if noise_wavenumber < 1 {
        return Err(invalid("noise_wavenumber must be at least 1"));
    }
    if field.len() != grid.n_cells {
        return Err(invalid("field length does not match grid"));
    }
    if noise_amplitude == 0.0 {
        return Ok(field.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64)> = (0..noise_wavenumber)
        .map(|_| {
            let weight: f64 = rng.sample(StandardNormal);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (weight, phase)
        })
        .collect();
    let noise: Vec<f64> = grid
        .cell_centers()
        .iter()
        .map(|&x| {
            modes
                .iter()
                .enumerate()
                .map(|(k, (w, phase))| {
                    let wavenumber = 2.0 * PI * (k + 1) as f64 / grid.length;
                    w * (wavenumber * x + phase).cos()
                })
                .sum()
        })
        .collect();
    let peak = noise.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(field.clone());
    }
    let scale = noise_amplitude / peak;
    Field::new(
        field
            .0
            .iter()
            .zip(&noise)
            .map(|(f, e)| f + scale * e)
            .collect(),
    )
}

/// Per-cell mean and unbiased (divisor n-1) sample covariance.
pub fn dataset_statistics(realizations: &[Field]) -> Result<(Field, DMatrix<f64>)> {
    if realizations.len() < 2 {
        return Err(invalid(format!(
            "need at least 2 realizations, got {}",
            realizations.len()
        )));
    }
    let n = realizations[0].len();
    if n == 0 {
        return Err(invalid("realizations are empty"));
    }
    if let Some((i, r)) = realizations.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(invalid(format!(
            "realization {i} has length {}, expected {n}",
            r.len()
        )));
    }
    let count = realizations.len() as f64;
    let mut mean = vec![0.0; n];
    for r in realizations {
        for (m, v) in mean.iter_mut().zip(&r.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);

    let centered = DMatrix::from_fn(n, realizations.len(), |i, k| realizations[k].0[i] - mean[i]);
    let mut cov = (&centered * centered.transpose()) / (count - 1.0);
    // Mirror the upper triangle so the result is exactly symmetric.
    for i in 0..n {
        for j in (i + 1)..n {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok((Field(mean), cov))
}

/// On-disk form of a prior dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub grid: Grid,
    pub realizations: Vec<Vec<f64>>,
    pub seed: u64,
    pub perturb_config: PerturbConfig,
}

impl DatasetFile {
    pub fn new(grid: Grid, dataset: &PriorDataset, perturb_config: PerturbConfig) -> Self {
        Self {
            grid,
            realizations: dataset.realizations.iter().map(|r| r.0.clone()).collect(),
            seed: perturb_config.seed,
            perturb_config,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut file, self).map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        file.grid.validate()?;
        Ok(file)
    }

    pub fn to_dataset(&self) -> Result<PriorDataset> {
        let fields = self
            .realizations
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if r.len() != self.grid.n_cells {
                    return Err(invalid(format!(
                        "realization {k} has {} cells, grid has {}",
                        r.len(),
                        self.grid.n_cells
                    )));
                }
                Field::new(r.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        PriorDataset::from_realizations(fields)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn true_model_at_known_points() {
        assert_abs_diff_eq!(true_model_value(0.0), 3.6, epsilon = 1e-15);
        // 3.5 - 1.6 + 0.1 cos(sqrt(150 pi)), evaluated independently.
        let expected = 1.9 + 0.1 * (150.0 * PI).sqrt().cos();
        assert_abs_diff_eq!(true_model_value(PI / 2.0), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(true_model_value(PI / 2.0), 1.804, epsilon = 5e-4);
    }

    #[test]
    fn true_model_on_default_grid_is_bounded() {
        let grid = Grid::default();
        let d = true_model(&grid);
        assert_eq!(d.len(), 100);
        assert!(d.0.iter().all(|&v| v > 0.0 && v < 5.2));
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(Grid::new(1, 1.0).is_err());
        assert!(Grid::new(4, 0.0).is_err());
        let centers = Grid::new(4, 2.0).unwrap().cell_centers();
        assert_eq!(centers, vec![0.25, 0.75, 1.25, 1.75]);
    }

    #[test]
    fn two_point_statistics() {
        let (mean, cov) =
            dataset_statistics(&[Field(vec![0.0, 0.0]), Field(vec![2.0, 2.0])]).unwrap();
        assert_eq!(mean.0, vec![1.0, 1.0]);
        assert_eq!(cov, DMatrix::from_element(2, 2, 2.0));

        let (_, cov) = dataset_statistics(&[Field(vec![1.0, 3.0]), Field(vec![1.0, 3.0])]).unwrap();
        assert_eq!(cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn statistics_reject_bad_input() {
        assert!(dataset_statistics(&[Field(vec![1.0])]).is_err());
        assert!(dataset_statistics(&[Field(vec![1.0]), Field(vec![1.0, 2.0])]).is_err());
    }

    #[test]
    fn zero_amplitude_reproduces_base() {
        let grid = Grid::new(10, 1.0).unwrap();
        let base = true_model(&grid);
        let cfg = PerturbConfig {
            amplitude: 0.0,
            ..Default::default()
        };
        let ds = generate_prior(&base, &grid, 5, &cfg).unwrap();
        assert!(ds.realizations.iter().all(|r| *r == base));
        // The ensemble mean of identical values is exact only up to rounding.
        assert!(ds.covariance.iter().all(|&v| v.abs() < 1e-28));
    }

    #[test]
    fn prior_requires_two_realizations() {
        let grid = Grid::new(10, 1.0).unwrap();
        let base = true_model(&grid);
        assert!(generate_prior(&base, &grid, 1, &PerturbConfig::default()).is_err());
    }

    #[test]
    fn prior_is_seed_deterministic() {
        let grid = Grid::new(30, PI).unwrap();
        let base = true_model(&grid);
        let cfg = PerturbConfig {
            seed: 42,
            ..Default::default()
        };
        let a = generate_prior(&base, &grid, 20, &cfg).unwrap();
        let b = generate_prior(&base, &grid, 20, &cfg).unwrap();
        assert_eq!(a.realizations, b.realizations);
        let c = generate_prior(&base, &grid, 20, &PerturbConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.realizations, c.realizations);
    }

    #[test]
    fn prior_mean_within_clt_bound() {
        let grid = Grid::default();
        let base = true_model(&grid);
        let cfg = PerturbConfig::default();
        let ds = generate_prior(&base, &grid, 600, &cfg).unwrap();
        let bound = 3.0 * cfg.amplitude / (600.0_f64).sqrt();
        for (m, b) in ds.mean.0.iter().zip(&base.0) {
            assert!((m - b).abs() < bound, "mean {m} vs base {b}");
        }
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let grid = Grid::default();
        let ds = generate_prior(&true_model(&grid), &grid, 600, &PerturbConfig::default()).unwrap();
        let k = &ds.covariance;
        let asym = (k - k.transpose()).abs().max();
        assert!(asym < 1e-12);
        let eig = k.clone().symmetric_eigenvalues();
        let max = eig.max();
        assert!(eig.min() >= -1e-10 * max);
    }

    fn mean_sq_increment(ds: &PriorDataset, base: &Field) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for r in &ds.realizations {
            let p: Vec<f64> = r.0.iter().zip(&base.0).map(|(a, b)| a - b).collect();
            for w in p.windows(2) {
                total += (w[1] - w[0]).powi(2);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn longer_correlation_is_smoother() {
        let grid = Grid::default();
        let base = true_model(&grid);
        let short = PerturbConfig {
            correlation_length: 0.1,
            seed: 5,
            ..Default::default()
        };
        let long = PerturbConfig {
            correlation_length: 0.2,
            ..short
        };
        let a = generate_prior(&base, &grid, 100, &short).unwrap();
        let b = generate_prior(&base, &grid, 100, &long).unwrap();
        assert!(mean_sq_increment(&b, &base) < mean_sq_increment(&a, &base));
    }

    #[test]
    fn zero_noise_is_identity_and_noise_is_deterministic() {
        let grid = Grid::default();
        let d = true_model(&grid);
        assert_eq!(add_low_frequency_noise(&d, &grid, 0.0, 3, 1).unwrap(), d);
        let a = add_low_frequency_noise(&d, &grid, 0.3, 3, 1).unwrap();
        let b = add_low_frequency_noise(&d, &grid, 0.3, 3, 1).unwrap();
        assert_eq!(a, b);
        let peak =
            a.0.iter()
                .zip(&d.0)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        assert_abs_diff_eq!(peak, 0.3, epsilon = 1e-12);
        assert!(add_low_frequency_noise(&d, &grid, 0.3, 0, 1).is_err());
    }

    /// Naive DFT magnitude of bin `k` for a real sequence.
    fn dft_magnitude(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (j, v) in x.iter().enumerate() {
            let angle = -2.0 * PI * (k * j) as f64 / n;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn noise_is_band_limited() {
        let grid = Grid::default();
        let d = true_model(&grid);
        let wavenumber = 3;
        let noised = add_low_frequency_noise(&d, &grid, 0.3, wavenumber, 9).unwrap();
        let diff: Vec<f64> = noised.0.iter().zip(&d.0).map(|(a, b)| a - b).collect();
        let energy: f64 = (1..=wavenumber).map(|k| dft_magnitude(&diff, k)).sum();
        assert!(energy > 1.0);
        assert!(dft_magnitude(&diff, 0) < 1e-10);
        for k in (wavenumber + 1)..=50 {
            assert!(dft_magnitude(&diff, k) < 1e-10, "bin {k} has energy");
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let grid = Grid::new(8, 1.0).unwrap();
        let cfg = PerturbConfig {
            seed: 3,
            ..Default::default()
        };
        let ds = generate_prior(&true_model(&grid), &grid, 4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.json");
        DatasetFile::new(grid, &ds, cfg).write(&path).unwrap();
        let back = DatasetFile::read(&path).unwrap().to_dataset().unwrap();
        assert_eq!(back.realizations, ds.realizations);
        assert_eq!(back.covariance, ds.covariance);
    }

    #[test]
    fn malformed_dataset_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"grid\": {\"n_cells\": 3,\n \"length\": }").unwrap();
        match DatasetFile::read(&path) {
            Err(Error::Parse { location, .. }) => assert!(location.contains(":2:")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn field_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let f = Field(vec![1.0, -2.5e-7, 3.125]);
        f.write_csv(&path).unwrap();
        assert_eq!(Field::read_csv(&path).unwrap(), f);
    }
}
