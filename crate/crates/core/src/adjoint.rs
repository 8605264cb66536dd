//! Least-squares objective over observed states and its gradient with
//! respect to the coefficient field via the discrete adjoint.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Field, Grid};
use crate::forward::{simulate, step_jacobians, SimConfig, StepContext, Trajectory};

/// Observed states at selected time steps and cells, with i.i.d. noise `sigma_D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    /// State indices into the trajectory (0 is the initial state).
    pub times: Vec<usize>,
    pub locations: Vec<usize>,
    /// `values[t][l]` for `times[t]` and `locations[l]`.
    pub values: Vec<Vec<f64>>,
    pub noise_std: f64,
}

impl Observations {
    /// Samples `traj` at the given indices, optionally adding seeded Gaussian noise.
    pub fn from_trajectory(
        traj: &Trajectory,
        times: Vec<usize>,
        locations: Vec<usize>,
        noise_std: f64,
        added_noise: Option<(f64, u64)>,
    ) -> Result<Self> {
        let mut rng = added_noise.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
        let mut values = Vec::with_capacity(times.len());
        for &t in &times {
            let state = traj
                .states
                .get(t)
                .ok_or_else(|| invalid(format!("observation time {t} beyond trajectory")))?;
            let mut row = Vec::with_capacity(locations.len());
            for &l in &locations {
                let mut v = *state
                    .get(l)
                    .ok_or_else(|| invalid(format!("observation location {l} beyond grid")))?;
                if let (Some(rng), Some((std, _))) = (rng.as_mut(), added_noise) {
                    v += std * rng.sample::<f64, _>(StandardNormal);
                }
                row.push(v);
            }
            values.push(row);
        }
        let obs = Self {
            times,
            locations,
            values,
            noise_std,
        };
        obs.validate_shape()?;
        Ok(obs)
    }

    pub fn validate_shape(&self) -> Result<()> {
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(invalid(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if self.values.len() != self.times.len() {
            return Err(invalid("observation values must have one row per time"));
        }
        for row in &self.values {
            if row.len() != self.locations.len() {
                return Err(invalid("observation rows must have one value per location"));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid("observation values must be finite"));
            }
        }
        Ok(())
    }

    /// Checks shape and index ranges against `n_states` stored states of
    /// `n_cells` cells each.
    pub fn check_ranges(&self, n_states: usize, n_cells: usize) -> Result<()> {
        self.validate_shape()?;
        if let Some(t) = self.times.iter().find(|&&t| t >= n_states) {
            return Err(invalid(format!(
                "observation time {t} beyond {n_states} states"
            )));
        }
        if let Some(l) = self.locations.iter().find(|&&l| l >= n_cells) {
            return Err(invalid(format!(
                "observation location {l} beyond {n_cells} cells"
            )));
        }
        Ok(())
    }

    fn check_against(&self, traj: &Trajectory) -> Result<()> {
        self.check_ranges(traj.states.len(), traj.states[0].len())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self).map_err(std::io::Error::from)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let obs: Observations = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        obs.validate_shape()?;
        Ok(obs)
    }
}

/// Inverse prior covariance `C_M^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorPrecision {
    ScaledIdentity(f64),
    Dense(DMatrix<f64>),
}

impl PriorPrecision {
    /// Inverts a (possibly singular) prior covariance after adding `jitter` to
    /// its diagonal.
    pub fn from_covariance(cov: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        let n = cov.nrows();
        let shifted = cov + DMatrix::identity(n, n) * jitter;
        let chol = shifted
            .cholesky()
            .ok_or_else(|| invalid("prior covariance is not positive definite"))?;
        Ok(Self::Dense(chol.inverse()))
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::ScaledIdentity(s) => v * *s,
            Self::Dense(m) => m * v,
        }
    }
}

/// Weights and prior of the regularized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the data misfit; `1 - beta` weights the prior term.
    pub beta: f64,
    pub m_prior: Field,
    pub precision: PriorPrecision,
}

impl ObjectiveConfig {
    /// Pure data misfit.
    pub fn misfit_only(n_cells: usize) -> Self {
        Self {
            beta: 1.0,
            m_prior: Field::zeros(n_cells),
            precision: PriorPrecision::ScaledIdentity(1.0),
        }
    }

    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if self.m_prior.len() != n_cells {
            return Err(invalid("m_prior length does not match the grid"));
        }
        match &self.precision {
            PriorPrecision::ScaledIdentity(s) if !(*s > 0.0) => {
                Err(invalid("prior precision scale must be positive"))
            }
            PriorPrecision::Dense(m) if m.nrows() != n_cells || m.ncols() != n_cells => {
                Err(invalid("prior precision matrix has wrong dimensions"))
            }
            _ => Ok(()),
        }
    }
}

/// `sum (u - d_obs)^2 / sigma_D^2` over observed entries.
pub fn misfit(traj: &Trajectory, obs: &Observations) -> Result<f64> {
    obs.check_against(traj)?;
    let w = 1.0 / (obs.noise_std * obs.noise_std);
    let mut total = 0.0;
    for (row, &t) in obs.values.iter().zip(&obs.times) {
        let state = &traj.states[t];
        for (v, &l) in row.iter().zip(&obs.locations) {
            total += (state[l] - v).powi(2) * w;
        }
    }
    Ok(total)
}

fn prior_term(m: &Field, cfg: &ObjectiveConfig) -> (f64, DVector<f64>) {
    let diff = m.to_dvector() - cfg.m_prior.to_dvector();
    let weighted = cfg.precision.apply(&diff);
    (diff.dot(&weighted), weighted)
}

/// `beta * misfit + (1 - beta) (m - m_prior)^T C_M^{-1} (m - m_prior)`.
pub fn regularized_objective(
    traj: &Trajectory,
    obs: &Observations,
    m: &Field,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate(m.len())?;
    let data = if cfg.beta > 0.0 {
        misfit(traj, obs)?
    } else {
        0.0
    };
    let prior = if cfg.beta < 1.0 {
        prior_term(m, cfg).0
    } else {
        0.0
    };
    Ok(cfg.beta * data + (1.0 - cfg.beta) * prior)
}

/// Gradient of [`regularized_objective`] with respect to the coefficient
/// field, for a trajectory produced by `simulate(d, grid, sim)`.
pub fn adjoint_gradient(
    d: &Field,
    grid: &Grid,
    sim: &SimConfig,
    traj: &Trajectory,
    obs: &Observations,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    cfg.validate(d.len())?;
    obs.check_against(traj)?;
    if traj.n_steps() != sim.n_steps || traj.states[0].len() != grid.n_cells {
        return Err(Error::InvalidState(
            "trajectory does not match the configuration".into(),
        ));
    }
    if !traj.is_converged() {
        return Err(Error::InvalidState(
            "trajectory has non-converged Newton steps".into(),
        ));
    }
    let n = grid.n_cells;
    let steps = traj.n_steps();
    let ctx = StepContext::new(grid, sim);

    // d(beta * misfit)/d u^k for every state index k.
    let mut seeds = vec![vec![0.0; n]; steps + 1];
    let w = 2.0 * cfg.beta / (obs.noise_std * obs.noise_std);
    if cfg.beta > 0.0 {
        for (row, &t) in obs.values.iter().zip(&obs.times) {
            for (v, &l) in row.iter().zip(&obs.locations) {
                seeds[t][l] += w * (traj.states[t][l] - v);
            }
        }
    }

    let mut grad = vec![0.0; n];
    // lambda^{k+1} from the previous backward iteration; zero beyond the horizon.
    let mut next_lambda = vec![0.0; n];
    for k in (1..=steps).rev() {
        let jac = step_jacobians(&traj.states[k], d.values(), &ctx);
        // J_next^T lambda^k = -dL/du^k - J_prev^T lambda^{k+1}
        let rhs: Vec<f64> = seeds[k]
            .iter()
            .zip(&next_lambda)
            .map(|(s, l)| -s - jac.prev_diag * l)
            .collect();
        let lambda =
            jac.next.transpose().solve(&rhs).ok_or_else(|| {
                Error::InvalidState(format!("singular step Jacobian at step {k}"))
            })?;
        for (g, v) in grad.iter_mut().zip(jac.coeff.tr_mul(&lambda)) {
            *g += v;
        }
        next_lambda = lambda;
    }

    if cfg.beta < 1.0 {
        let (_, weighted) = prior_term(d, cfg);
        for (g, p) in grad.iter_mut().zip(weighted.iter()) {
            *g += 2.0 * (1.0 - cfg.beta) * p;
        }
    }
    Ok(grad)
}

/// Simulates and returns the objective together with its adjoint gradient.
pub fn objective_and_gradient(
    d: &Field,
    grid: &Grid,
    sim: &SimConfig,
    obs: &Observations,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<f64>)> {
    let traj = simulate(d, grid, sim)?;
    let value = regularized_objective(&traj, obs, d, cfg)?;
    let grad = adjoint_gradient(d, grid, sim, &traj, obs, cfg)?;
    Ok((value, grad))
}

/// Central finite-difference gradient of the simulated objective.
pub fn fd_gradient(
    d: &Field,
    grid: &Grid,
    sim: &SimConfig,
    obs: &Observations,
    cfg: &ObjectiveConfig,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = |m: &Field| -> Result<f64> {
        let traj = simulate(m, grid, sim)?;
        regularized_objective(&traj, obs, m, cfg)
    };
    let mut grad = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        let mut plus = d.clone();
        let mut minus = d.clone();
        plus.0[i] += h;
        minus.0[i] -= h;
        grad.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
    }
    Ok(grad)
}

/// `||a - b||_2 / ||b||_2`, or the absolute difference when `b` vanishes.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
