//! Fully implicit finite-volume solver for
//! `u_t = (D(x) u^2 u_x)_x` with prescribed-gradient boundaries,
//! advanced in time by Newton-Raphson.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Field, Grid};

/// Time stepping and Newton settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub t_end: f64,
    pub n_steps: usize,
    pub u0: f64,
    /// Prescribed `du/dx` at `x = 0`.
    pub flux_left: f64,
    /// Prescribed `du/dx` at `x = L`.
    pub flux_right: f64,
    /// Newton stops once `dt * ||r||_inf` (a state-unit residual) drops below this.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_end: 0.5,
            n_steps: 50,
            u0: 1.0,
            flux_left: 0.0,
            flux_right: 0.0,
            newton_tol: 1e-10,
            newton_max_iter: 25,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(invalid(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.n_steps < 1 {
            return Err(invalid("n_steps must be at least 1"));
        }
        if !(self.newton_tol > 0.0) {
            return Err(invalid("newton_tol must be positive"));
        }
        if self.newton_max_iter < 1 {
            return Err(invalid("newton_max_iter must be at least 1"));
        }
        if !(self.u0.is_finite() && self.flux_left.is_finite() && self.flux_right.is_finite()) {
            return Err(invalid(
                "initial value and boundary gradients must be finite",
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }
}

/// Tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            upper: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Adds `v` at `(row, col)`; `|row - col|` must be at most one.
    fn add(&mut self, row: usize, col: usize, v: f64) {
        if row == col {
            self.diag[row] += v;
        } else if col == row + 1 {
            self.upper[row] += v;
        } else if row == col + 1 {
            self.lower[col] += v;
        } else {
            unreachable!("entry ({row}, {col}) is off the tridiagonal band");
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            lower: self.upper.clone(),
            diag: self.diag.clone(),
            upper: self.lower.clone(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.upper[i];
                m[(i + 1, i)] = self.lower[i];
            }
        }
        m
    }

    /// `A^T x`.
    pub fn tr_mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|j| {
                let mut s = self.diag[j] * x[j];
                if j > 0 {
                    s += self.upper[j - 1] * x[j - 1];
                }
                if j + 1 < n {
                    s += self.lower[j] * x[j + 1];
                }
                s
            })
            .collect()
    }

    /// Thomas algorithm. Returns `None` on a vanishing pivot.
    pub fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let n = self.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut pivot = self.diag[0];
        if pivot == 0.0 || !pivot.is_finite() {
            return None;
        }
        if n > 1 {
            c[0] = self.upper[0] / pivot;
        }
        d[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.lower[i - 1] * c[i - 1];
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            if i + 1 < n {
                c[i] = self.upper[i] / pivot;
            }
            d[i] = (rhs[i] - self.lower[i - 1] * d[i - 1]) / pivot;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Some(d)
    }
}

/// Harmonic mean of adjacent coefficients and its partial derivatives.
fn harmonic(a: f64, b: f64) -> (f64, f64, f64) {
    let s = a + b;
    (
        2.0 * a * b / s,
        2.0 * b * b / (s * s),
        2.0 * a * a / (s * s),
    )
}

/// Everything that defines one implicit step apart from the states.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub dx: f64,
    pub dt: f64,
    pub flux_left: f64,
    pub flux_right: f64,
}

impl StepContext {
    pub fn new(grid: &Grid, cfg: &SimConfig) -> Self {
        Self {
            dx: grid.dx(),
            dt: cfg.dt(),
            flux_left: cfg.flux_left,
            flux_right: cfg.flux_right,
        }
    }
}

/// Residual of one implicit step:
/// `(u_next - u_prev)/dt - (F_{i+1/2} - F_{i-1/2})/dx`.
pub fn step_residual(u_next: &[f64], u_prev: &[f64], d: &[f64], ctx: &StepContext) -> Vec<f64> {
    let n = u_next.len();
    let dx = ctx.dx;
    let mut r: Vec<f64> = u_next
        .iter()
        .zip(u_prev)
        .map(|(a, b)| (a - b) / ctx.dt)
        .collect();
    for k in 0..n - 1 {
        let (h, _, _) = harmonic(d[k], d[k + 1]);
        let mid = 0.5 * (u_next[k] + u_next[k + 1]);
        let flux = h * mid * mid * (u_next[k + 1] - u_next[k]) / dx;
        r[k] -= flux / dx;
        r[k + 1] += flux / dx;
    }
    let left = d[0] * u_next[0] * u_next[0] * ctx.flux_left;
    let right = d[n - 1] * u_next[n - 1] * u_next[n - 1] * ctx.flux_right;
    r[0] += left / dx;
    r[n - 1] -= right / dx;
    r
}

/// Round-off floor of `dt * ||step_residual||_inf`: a few ulps of the
/// largest term magnitude entering each residual entry.
pub fn residual_floor(u_next: &[f64], u_prev: &[f64], d: &[f64], ctx: &StepContext) -> f64 {
    let n = u_next.len();
    let dx2 = ctx.dx * ctx.dx;
    let mut scale: Vec<f64> = u_next
        .iter()
        .zip(u_prev)
        .map(|(a, b)| (a.abs() + b.abs()) / ctx.dt)
        .collect();
    for k in 0..n - 1 {
        let (h, _, _) = harmonic(d[k], d[k + 1]);
        let mid = 0.5 * (u_next[k] + u_next[k + 1]);
        let t = h * mid * mid * (u_next[k].abs() + u_next[k + 1].abs()) / dx2;
        scale[k] += t;
        scale[k + 1] += t;
    }
    scale[0] += (d[0] * u_next[0] * u_next[0] * ctx.flux_left).abs() / ctx.dx;
    scale[n - 1] += (d[n - 1] * u_next[n - 1] * u_next[n - 1] * ctx.flux_right).abs() / ctx.dx;
    8.0 * f64::EPSILON * ctx.dt * scale.iter().fold(0.0_f64, |m, &v| m.max(v))
}

/// Partial derivatives of [`step_residual`].
#[derive(Debug, Clone)]
pub struct StepJacobians {
    /// With respect to `u_next`.
    pub next: Tridiagonal,
    /// With respect to `u_prev`; always `-(1/dt) I`.
    pub prev_diag: f64,
    /// With respect to the coefficient field.
    pub coeff: Tridiagonal,
}

impl StepJacobians {
    pub fn prev_dense(&self) -> DMatrix<f64> {
        let n = self.next.len();
        DMatrix::from_diagonal_element(n, n, self.prev_diag)
    }
}

fn jacobian_next(u_next: &[f64], d: &[f64], ctx: &StepContext) -> Tridiagonal {
    let n = u_next.len();
    let dx = ctx.dx;
    let mut j = Tridiagonal::zeros(n);
    j.diag.iter_mut().for_each(|v| *v = 1.0 / ctx.dt);
    for k in 0..n - 1 {
        let (h, _, _) = harmonic(d[k], d[k + 1]);
        let mid = 0.5 * (u_next[k] + u_next[k + 1]);
        let a = mid * mid;
        let g = (u_next[k + 1] - u_next[k]) / dx;
        let df_lo = h * (mid * g - a / dx);
        let df_hi = h * (mid * g + a / dx);
        j.add(k, k, -df_lo / dx);
        j.add(k, k + 1, -df_hi / dx);
        j.add(k + 1, k, df_lo / dx);
        j.add(k + 1, k + 1, df_hi / dx);
    }
    j.add(0, 0, 2.0 * d[0] * u_next[0] * ctx.flux_left / dx);
    j.add(
        n - 1,
        n - 1,
        -2.0 * d[n - 1] * u_next[n - 1] * ctx.flux_right / dx,
    );
    j
}

fn jacobian_coeff(u_next: &[f64], d: &[f64], ctx: &StepContext) -> Tridiagonal {
    let n = u_next.len();
    let dx = ctx.dx;
    let mut j = Tridiagonal::zeros(n);
    for k in 0..n - 1 {
        let (_, dh_lo, dh_hi) = harmonic(d[k], d[k + 1]);
        let mid = 0.5 * (u_next[k] + u_next[k + 1]);
        let base = mid * mid * (u_next[k + 1] - u_next[k]) / dx;
        let df_lo = base * dh_lo;
        let df_hi = base * dh_hi;
        j.add(k, k, -df_lo / dx);
        j.add(k, k + 1, -df_hi / dx);
        j.add(k + 1, k, df_lo / dx);
        j.add(k + 1, k + 1, df_hi / dx);
    }
    j.add(0, 0, u_next[0] * u_next[0] * ctx.flux_left / dx);
    j.add(
        n - 1,
        n - 1,
        -u_next[n - 1] * u_next[n - 1] * ctx.flux_right / dx,
    );
    j
}

/// Analytic Jacobians of the step residual.
pub fn step_jacobians(u_next: &[f64], d: &[f64], ctx: &StepContext) -> StepJacobians {
    StepJacobians {
        next: jacobian_next(u_next, d, ctx),
        prev_diag: -1.0 / ctx.dt,
        coeff: jacobian_coeff(u_next, d, ctx),
    }
}

/// State history of one forward run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `u^0 .. u^N`.
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_iterations: Vec<usize>,
    /// Stopping threshold actually applied per step: `max(newton_tol, floor)`.
    pub step_tolerances: Vec<f64>,
    /// `dt * ||r||_inf` per Newton iteration, per step.
    pub residual_history: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_residual(&self, step: usize) -> f64 {
        *self.residual_history[step]
            .last()
            .expect("empty residual history")
    }

    pub fn is_converged(&self) -> bool {
        (0..self.n_steps()).all(|s| self.final_residual(s) <= self.step_tolerances[s])
    }

    /// `sum_i u_i dx` for every stored state.
    pub fn totals(&self, dx: f64) -> Vec<f64> {
        self.states
            .iter()
            .map(|u| u.iter().sum::<f64>() * dx)
            .collect()
    }

    /// Rows are time steps, columns are cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("step,time");
        for i in 0..n {
            out.push_str(&format!(",cell_{i}"));
        }
        out.push('\n');
        for (step, u) in self.states.iter().enumerate() {
            out.push_str(&format!("{step},{:e}", step as f64 * self.dt));
            for v in u {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Runs the implicit solver from the uniform initial state.
pub fn simulate(d: &Field, grid: &Grid, cfg: &SimConfig) -> Result<Trajectory> {
    simulate_from(d, grid, cfg, &vec![cfg.u0; grid.n_cells])
}

/// Like [`simulate`], starting from an arbitrary state instead of the
/// uniform `u0`.
pub fn simulate_from(
    d: &Field,
    grid: &Grid,
    cfg: &SimConfig,
    initial: &[f64],
) -> Result<Trajectory> {
    grid.validate()?;
    if initial.len() != grid.n_cells || initial.iter().any(|v| !v.is_finite()) {
        return Err(invalid(
            "initial state must be finite with one value per cell",
        ));
    }
    cfg.validate()?;
    if d.len() != grid.n_cells {
        return Err(invalid(format!(
            "coefficient field has {} cells, grid has {}",
            d.len(),
            grid.n_cells
        )));
    }
    if let Some(i) = d.values().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(invalid(format!(
            "diffusion coefficient at cell {i} is not positive"
        )));
    }
    let ctx = StepContext::new(grid, cfg);
    let coeff = d.values();
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push(initial.to_vec());
    let mut newton_iterations = Vec::with_capacity(cfg.n_steps);
    let mut step_tolerances = Vec::with_capacity(cfg.n_steps);
    let mut residual_history = Vec::with_capacity(cfg.n_steps);

    for step in 0..cfg.n_steps {
        let prev = &states[step];
        let mut u = prev.clone();
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut tol;
        loop {
            let r = step_residual(&u, prev, coeff, &ctx);
            // Scaled by dt so the tolerance does not depend on the step size.
            let norm = ctx.dt * inf_norm(&r);
            history.push(norm);
            // A tolerance below the rounding floor of the residual is unattainable.
            tol = cfg.newton_tol.max(residual_floor(&u, prev, coeff, &ctx));
            if norm <= tol {
                break;
            }
            if iterations >= cfg.newton_max_iter || !norm.is_finite() {
                return Err(Error::SolverFailure {
                    step,
                    residual: norm,
                    iterations,
                });
            }
            let jac = jacobian_next(&u, coeff, &ctx);
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let Some(delta) = jac.solve(&neg) else {
                return Err(Error::SolverFailure {
                    step,
                    residual: norm,
                    iterations,
                });
            };
            u.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            iterations += 1;
        }
        newton_iterations.push(iterations);
        step_tolerances.push(tol);
        residual_history.push(history);
        states.push(u);
    }
    Ok(Trajectory {
        states,
        dt: ctx.dt,
        newton_tol: cfg.newton_tol,
        newton_iterations,
        step_tolerances,
        residual_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::true_model;

    fn ctx(dx: f64, dt: f64, fl: f64, fr: f64) -> StepContext {
        StepContext {
            dx,
            dt,
            flux_left: fl,
            flux_right: fr,
        }
    }

    #[test]
    fn uniform_state_is_stationary() {
        let grid = Grid::new(20, 1.0).unwrap();
        let d = Field((0..20).map(|i| 1.0 + 0.1 * i as f64).collect());
        let cfg = SimConfig::default();
        let traj = simulate(&d, &grid, &cfg).unwrap();
        assert_eq!(traj.states.len(), cfg.n_steps + 1);
        for s in &traj.states {
            assert!(s.iter().all(|&v| v == cfg.u0));
        }
    }

    #[test]
    fn residual_vanishes_for_uniform_zero_flux() {
        let u = vec![2.0; 5];
        let r = step_residual(
            &u,
            &u,
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            &ctx(0.1, 0.01, 0.0, 0.0),
        );
        assert!(r.iter().all(|&v| v == 0.0));
    }

    /// Independent dense evaluation on 4 cells written from the flux balance.
    #[test]
    fn residual_matches_hand_evaluation() {
        let u: [f64; 4] = [1.0, 1.5, 0.5, 2.0];
        let p = [1.2, 1.0, 0.7, 1.9];
        let d: [f64; 4] = [1.0, 2.0, 4.0, 0.5];
        let (dx, dt, fl, fr) = (0.25, 0.1, 0.3, -0.2);
        let face = |a: usize, b: usize| {
            let h = 2.0 * d[a] * d[b] / (d[a] + d[b]);
            h * ((u[a] + u[b]) / 2.0).powi(2) * (u[b] - u[a]) / dx
        };
        let flux = [
            d[0] * u[0] * u[0] * fl,
            face(0, 1),
            face(1, 2),
            face(2, 3),
            d[3] * u[3] * u[3] * fr,
        ];
        let expected: Vec<f64> = (0..4)
            .map(|i| (u[i] - p[i]) / dt - (flux[i + 1] - flux[i]) / dx)
            .collect();
        let r = step_residual(&u, &p, &d, &ctx(dx, dt, fl, fr));
        for (a, b) in r.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
        let n = x.len();
        let m = f(x).len();
        let mut jac = DMatrix::zeros(m, n);
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f(&xp), f(&xm));
            for i in 0..m {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let u = vec![1.0, 1.4, 0.8, 1.1, 0.9];
        let p = vec![1.0, 1.2, 0.9, 1.0, 1.0];
        let d = vec![1.5, 0.7, 2.2, 3.1, 1.0];
        let c = ctx(0.2, 0.05, -0.7, 0.4);
        let jac = step_jacobians(&u, &d, &c);
        let fd_next = fd_jacobian(|x| step_residual(x, &p, &d, &c), &u, 1e-6);
        let fd_prev = fd_jacobian(|x| step_residual(&u, x, &d, &c), &p, 1e-6);
        let fd_coeff = fd_jacobian(|x| step_residual(&u, &p, x, &c), &d, 1e-6);
        assert!(rel_err(&jac.next.to_dense(), &fd_next) < 1e-6);
        assert!(rel_err(&jac.prev_dense(), &fd_prev) < 1e-6);
        assert!(rel_err(&jac.coeff.to_dense(), &fd_coeff) < 1e-6);
    }

    #[test]
    fn previous_state_jacobian_is_scaled_identity() {
        let jac = step_jacobians(
            &[1.0, 2.0, 3.0],
            &[1.0, 1.0, 1.0],
            &ctx(0.5, 0.25, 0.0, 0.0),
        );
        assert_eq!(jac.prev_diag, -4.0);
    }

    /// With constant u the flux Jacobian is the linear diffusion stencil times u^2.
    #[test]
    fn constant_state_gives_scaled_laplacian() {
        let (dx, dt, u, dcoef) = (0.5, 0.1, 1.5_f64, 2.0);
        let jac = jacobian_next(&[u; 3], &[dcoef; 3], &ctx(dx, dt, 0.0, 0.0));
        let k = dcoef * u * u / (dx * dx);
        let expected = DMatrix::from_row_slice(3, 3, &[k, -k, 0.0, -k, 2.0 * k, -k, 0.0, -k, k])
            + DMatrix::identity(3, 3) / dt;
        assert!((jac.to_dense() - expected).amax() < 1e-12);
    }

    #[test]
    fn tridiagonal_solve_and_transpose() {
        let t = Tridiagonal {
            lower: vec![1.0, -2.0, 0.5],
            diag: vec![4.0, 5.0, 6.0, 3.0],
            upper: vec![0.3, 1.0, -1.0],
        };
        let rhs = [1.0, 2.0, 3.0, 4.0];
        let x = t.solve(&rhs).unwrap();
        let back = t.to_dense() * nalgebra::DVector::from_column_slice(&x);
        for (a, b) in back.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12);
        }
        let y = [0.5, -1.0, 2.0, 0.25];
        let dense = t.to_dense().transpose() * nalgebra::DVector::from_column_slice(&y);
        for (a, b) in t.tr_mul(&y).iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(t.transpose().to_dense(), t.to_dense().transpose());
    }

    #[test]
    fn zero_flux_conserves_mass() {
        let grid = Grid::new(40, 1.0).unwrap();
        let d = Field(
            (0..40)
                .map(|i| 0.5 + (i as f64 * 0.3).sin().abs())
                .collect(),
        );
        // Non-uniform state reached by injecting through the left boundary first.
        let mut cfg = SimConfig {
            flux_left: -2.0,
            n_steps: 10,
            ..Default::default()
        };
        let ramp = simulate(&d, &grid, &cfg).unwrap();
        assert!(ramp.states.last().unwrap()[0] > ramp.states.last().unwrap()[39]);
        cfg.flux_left = 0.0;
        let ctx = StepContext::new(&grid, &cfg);
        let mut u = ramp.states.last().unwrap().clone();
        let total0: f64 = u.iter().sum::<f64>() * grid.dx();
        for _ in 0..20 {
            let prev = u.clone();
            for _ in 0..25 {
                let r = step_residual(&u, &prev, d.values(), &ctx);
                if inf_norm(&r) <= 1e-11 {
                    break;
                }
                let neg: Vec<f64> = r.iter().map(|v| -v).collect();
                let delta = jacobian_next(&u, d.values(), &ctx).solve(&neg).unwrap();
                u.iter_mut().zip(&delta).for_each(|(a, b)| *a += b);
            }
        }
        let total1: f64 = u.iter().sum::<f64>() * grid.dx();
        assert!(((total1 - total0) / total0).abs() < 1e-10);
    }

    #[test]
    fn newton_converges_quadratically() {
        let grid = Grid::default();
        let cfg = SimConfig {
            flux_left: 1.0,
            flux_right: -1.0,
            newton_tol: 1e-12,
            ..Default::default()
        };
        let traj = simulate(&true_model(&grid), &grid, &cfg).unwrap();
        assert!(traj.is_converged());
        let mut checked = 0;
        for hist in &traj.residual_history {
            // Skip iterates already at the rounding floor.
            let useful: Vec<f64> = hist.iter().copied().filter(|&r| r > 1e-9).collect();
            for w in useful.windows(2) {
                if w[0] < 1e-2 {
                    assert!(w[1] <= 1e3 * w[0] * w[0], "{} -> {}", w[0], w[1]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let grid = Grid::new(4, 1.0).unwrap();
        let cfg = SimConfig::default();
        assert!(matches!(
            simulate(&Field(vec![1.0, 0.0, 1.0, 1.0]), &grid, &cfg),
            Err(Error::InvalidArgument(_))
        ));
        assert!(simulate(&Field(vec![1.0; 3]), &grid, &cfg).is_err());
        let bad = SimConfig { n_steps: 0, ..cfg };
        assert!(simulate(&Field(vec![1.0; 4]), &grid, &bad).is_err());
    }

    #[test]
    fn newton_failure_reports_step() {
        let grid = Grid::new(10, 1.0).unwrap();
        let cfg = SimConfig {
            flux_left: -5.0,
            newton_max_iter: 1,
            newton_tol: 1e-14,
            ..Default::default()
        };
        match simulate(&Field(vec![1.0; 10]), &grid, &cfg) {
            Err(Error::SolverFailure { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected solver failure, got {other:?}"),
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let grid = Grid::default();
        let cfg = SimConfig {
            flux_left: 1.0,
            flux_right: -1.0,
            ..Default::default()
        };
        let d = true_model(&grid);
        assert_eq!(
            simulate(&d, &grid, &cfg).unwrap(),
            simulate(&d, &grid, &cfg).unwrap()
        );
    }
}
