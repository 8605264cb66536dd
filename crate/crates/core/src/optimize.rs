//! Nonlinear conjugate gradient with an Armijo line search, and the adaptive
//! outer loop that updates the reduced basis when progress stalls.

use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_gradient, regularized_objective, ObjectiveConfig, Observations};
use crate::basis::{LatentVector, ReducedBasis};
use crate::error::{invalid, Result};
use crate::field::{Field, Grid};
use crate::forward::{simulate, SimConfig, Trajectory};
use crate::strategies::{
    extension_update, rotation_update, sensitivity_coefficients, swap_update, AdaptationEvent,
    RotationConfig, StrategyKind,
};

/// Forward and adjoint solve counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveCounts {
    pub forward: usize,
    pub adjoint: usize,
}

/// A differentiable objective. `None` marks an infeasible or failed point,
/// which the line search treats as an infinite objective.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Option<f64>;
    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
    fn counts(&self) -> SolveCounts;
}

/// Wraps a closure returning value and gradient together.
pub struct FnObjective<F> {
    f: F,
    counts: SolveCounts,
}

impl<F> FnObjective<F>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    pub fn new(f: F) -> Self {
        Self {
            f,
            counts: SolveCounts::default(),
        }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.counts.forward += 1;
        (self.f)(x).map(|(v, _)| v)
    }

    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.counts.forward += 1;
        self.counts.adjoint += 1;
        (self.f)(x)
    }

    fn counts(&self) -> SolveCounts {
        self.counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaFormula {
    PolakRibierePlus,
    FletcherReeves,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Stop when `||grad||_inf` falls to this value.
    pub grad_tol: f64,
    pub beta_formula: BetaFormula,
    pub restart_period: usize,
    pub linesearch: LineSearchConfig,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            beta_formula: BetaFormula::PolakRibierePlus,
            restart_period: 50,
            linesearch: LineSearchConfig::default(),
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.linesearch;
        if self.max_iters == 0 || self.restart_period == 0 {
            return Err(invalid("max_iters and restart_period must be positive"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("grad_tol must be positive"));
        }
        if !(ls.c1 > 0.0 && ls.c1 < 1.0)
            || !(ls.backtrack_factor > 0.0 && ls.backtrack_factor < 1.0)
        {
            return Err(invalid(
                "line search c1 and backtrack_factor must lie in (0, 1)",
            ));
        }
        if ls.max_backtracks == 0 || !(ls.initial_step > 0.0) {
            return Err(invalid(
                "line search needs positive max_backtracks and initial_step",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    /// Stopped by the caller's monitor.
    Stalled,
    /// The objective could not be evaluated at the starting point.
    OracleFailure,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub n_forward: usize,
    pub n_adjoint: usize,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub status: CgStatus,
    pub history: Vec<IterateRecord>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

/// Armijo backtracking with safeguarded quadratic interpolation and a single
/// interpolated extrapolation attempt once a step is accepted.
fn line_search(
    obj: &mut dyn Objective,
    x: &[f64],
    f0: f64,
    slope: f64,
    dir: &[f64],
    t0: f64,
    cfg: &LineSearchConfig,
) -> Option<(f64, f64)> {
    let armijo = |t: f64, ft: f64| ft.is_finite() && ft <= f0 + cfg.c1 * t * slope;
    let mut t = t0;
    for _ in 0..=cfg.max_backtracks {
        let ft = obj.value(&axpy(x, t, dir)).unwrap_or(f64::INFINITY);
        let curvature = 2.0 * (ft - f0 - slope * t);
        if armijo(t, ft) {
            if curvature > 0.0 {
                // One extrapolation toward the model minimizer, capped at 10t.
                let tq = (-slope * t * t / curvature).min(10.0 * t);
                if tq > 1.1 * t {
                    let fq = obj.value(&axpy(x, tq, dir)).unwrap_or(f64::INFINITY);
                    if fq < ft && armijo(tq, fq) {
                        return Some((tq, fq));
                    }
                }
            }
            return Some((t, ft));
        }
        t = if ft.is_finite() && curvature > 0.0 {
            (-slope * t * t / curvature).clamp(0.1 * t, cfg.backtrack_factor * t)
        } else {
            cfg.backtrack_factor * t
        };
    }
    None
}

pub fn cg_minimize(obj: &mut dyn Objective, x0: &[f64], cfg: &CgConfig) -> Result<CgOutcome> {
    cg_minimize_with(obj, x0, cfg, &mut |_| false)
}

/// Like [`cg_minimize`], but stops with [`CgStatus::Stalled`] as soon as
/// `monitor` returns true for the accepted history.
pub fn cg_minimize_with(
    obj: &mut dyn Objective,
    x0: &[f64],
    cfg: &CgConfig,
    monitor: &mut dyn FnMut(&[IterateRecord]) -> bool,
) -> Result<CgOutcome> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    let record = |obj: &dyn Objective, iteration, objective, grad: &[f64]| {
        let counts = obj.counts();
        IterateRecord {
            iteration,
            objective,
            grad_norm: inf_norm(grad),
            n_forward: counts.forward,
            n_adjoint: counts.adjoint,
        }
    };
    let Some((mut f, mut g)) = obj
        .value_and_gradient(&x)
        .filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()))
    else {
        return Ok(CgOutcome {
            x,
            value: f64::INFINITY,
            gradient: Vec::new(),
            status: CgStatus::OracleFailure,
            history: Vec::new(),
        });
    };
    let mut history = vec![record(&*obj, 0, f, &g)];
    let finish = |x, f, g, status, history| CgOutcome {
        x,
        value: f,
        gradient: g,
        status,
        history,
    };
    if inf_norm(&g) <= cfg.grad_tol {
        return Ok(finish(x, f, g, CgStatus::Converged, history));
    }

    let mut dir: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut since_restart = 0usize;
    let mut prev_step: Option<(f64, f64)> = None; // (step, slope)
    for iteration in 1..=cfg.max_iters {
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
            since_restart = 0;
            prev_step = None;
        }
        let t0 = match prev_step {
            Some((t, s)) => (t * s / slope).clamp(1e-12, 1e12),
            None => cfg.linesearch.initial_step / dot(&dir, &dir).sqrt().max(1.0),
        };
        let mut step = line_search(obj, &x, f, slope, &dir, t0, &cfg.linesearch);
        if step.is_none() && since_restart > 0 {
            // One retry along steepest descent.
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
            since_restart = 0;
            let t0 = cfg.linesearch.initial_step / dot(&dir, &dir).sqrt().max(1.0);
            step = line_search(obj, &x, f, slope, &dir, t0, &cfg.linesearch);
        }
        let Some((t, _)) = step else {
            return Ok(finish(x, f, g, CgStatus::LineSearchFailed, history));
        };
        let x_new = axpy(&x, t, &dir);
        let Some((f_new, g_new)) = obj
            .value_and_gradient(&x_new)
            .filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()))
        else {
            return Ok(finish(x, f, g, CgStatus::LineSearchFailed, history));
        };
        history.push(record(&*obj, iteration, f_new, &g_new));
        prev_step = Some((t, slope));
        since_restart += 1;

        if inf_norm(&g_new) <= cfg.grad_tol {
            return Ok(finish(x_new, f_new, g_new, CgStatus::Converged, history));
        }
        if monitor(&history) {
            return Ok(finish(x_new, f_new, g_new, CgStatus::Stalled, history));
        }

        let gg = dot(&g, &g);
        let beta = if since_restart >= cfg.restart_period {
            since_restart = 0;
            0.0
        } else {
            match cfg.beta_formula {
                BetaFormula::FletcherReeves => dot(&g_new, &g_new) / gg,
                BetaFormula::PolakRibierePlus => {
                    let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                    (dot(&g_new, &y) / gg).max(0.0)
                }
            }
        };
        if beta == 0.0 {
            since_restart = 0;
        }
        dir = g_new
            .iter()
            .zip(&dir)
            .map(|(gn, d)| -gn + beta * d)
            .collect();
        x = x_new;
        f = f_new;
        g = g_new;
    }
    Ok(finish(x, f, g, CgStatus::MaxIterations, history))
}

/// Forward model, observations and objective weights for the diffusion problem.
#[derive(Debug, Clone)]
pub struct DiffusionProblem {
    pub grid: Grid,
    pub sim: SimConfig,
    pub observations: Observations,
    pub objective: ObjectiveConfig,
    /// Models with any coefficient at or below this value are infeasible.
    pub d_floor: f64,
}

pub const DEFAULT_D_FLOOR: f64 = 1e-3;

impl DiffusionProblem {
    fn run(&self, d: &Field) -> Option<(Trajectory, f64)> {
        if d.min() <= self.d_floor {
            return None;
        }
        let traj = simulate(d, &self.grid, &self.sim).ok()?;
        let value = regularized_objective(&traj, &self.observations, d, &self.objective).ok()?;
        value.is_finite().then_some((traj, value))
    }

    pub fn value(&self, d: &Field) -> Option<f64> {
        self.run(d).map(|(_, v)| v)
    }

    /// Objective, model-space gradient and the trajectory they came from.
    pub fn value_and_gradient(&self, d: &Field) -> Option<(f64, Vec<f64>)> {
        let (traj, value) = self.run(d)?;
        let grad = adjoint_gradient(
            d,
            &self.grid,
            &self.sim,
            &traj,
            &self.observations,
            &self.objective,
        )
        .ok()?;
        Some((value, grad))
    }
}

/// Objective over the full coefficient field.
pub struct FullModelObjective<'a> {
    problem: &'a DiffusionProblem,
    counts: SolveCounts,
}

impl<'a> FullModelObjective<'a> {
    pub fn new(problem: &'a DiffusionProblem) -> Self {
        Self {
            problem,
            counts: SolveCounts::default(),
        }
    }
}

impl Objective for FullModelObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.counts.forward += 1;
        self.problem.value(&Field(x.to_vec()))
    }

    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.counts.forward += 1;
        self.counts.adjoint += 1;
        self.problem.value_and_gradient(&Field(x.to_vec()))
    }

    fn counts(&self) -> SolveCounts {
        self.counts
    }
}

/// Objective over latent coefficients of a reduced basis.
pub struct ReducedObjective<'a> {
    problem: &'a DiffusionProblem,
    basis: &'a ReducedBasis,
    counts: SolveCounts,
    last_model_gradient: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> ReducedObjective<'a> {
    pub fn new(problem: &'a DiffusionProblem, basis: &'a ReducedBasis) -> Self {
        Self::with_counts(problem, basis, SolveCounts::default())
    }

    fn with_counts(
        problem: &'a DiffusionProblem,
        basis: &'a ReducedBasis,
        counts: SolveCounts,
    ) -> Self {
        Self {
            problem,
            basis,
            counts,
            last_model_gradient: None,
        }
    }

    fn model(&self, xi: &[f64]) -> Option<Field> {
        self.basis.synthesize(&LatentVector::from_slice(xi)).ok()
    }

    /// Model-space gradient from the most recent gradient evaluation at `xi`.
    pub fn model_gradient_at(&self, xi: &[f64]) -> Option<&[f64]> {
        match &self.last_model_gradient {
            Some((x, g)) if x.as_slice() == xi => Some(g),
            _ => None,
        }
    }
}

impl Objective for ReducedObjective<'_> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.counts.forward += 1;
        self.problem.value(&self.model(x)?)
    }

    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.counts.forward += 1;
        self.counts.adjoint += 1;
        let (value, grad_m) = self.problem.value_and_gradient(&self.model(x)?)?;
        let grad_xi = self.basis.chain_gradient(&grad_m).ok()?;
        self.last_model_gradient = Some((x.to_vec(), grad_m));
        Some((value, grad_xi.as_slice().to_vec()))
    }

    fn counts(&self) -> SolveCounts {
        self.counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptStrategy {
    None,
    Rotation,
    Extension,
    Swap,
}

/// When and how the reduced basis is adapted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptPolicy {
    pub strategy: AdaptStrategy,
    pub stall_window: usize,
    pub stall_rel_decrease: f64,
    pub max_adaptations: usize,
    pub rotation: RotationConfig,
    /// Rotations that raise the objective at the re-expressed iterate are
    /// retried with epsilon halved up to this many times, then discarded.
    /// Zero accepts every rotation.
    pub rotation_halvings: usize,
    pub n_add: usize,
    pub n_swap: usize,
}

impl Default for AdaptPolicy {
    fn default() -> Self {
        Self {
            strategy: AdaptStrategy::None,
            stall_window: 10,
            stall_rel_decrease: 1e-3,
            max_adaptations: 5,
            rotation: RotationConfig::default(),
            rotation_halvings: 4,
            n_add: 2,
            n_swap: 2,
        }
    }
}

impl AdaptPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.stall_window == 0 || !(self.stall_rel_decrease > 0.0) {
            return Err(invalid(
                "stall_window and stall_rel_decrease must be positive",
            ));
        }
        if self.strategy == AdaptStrategy::Rotation {
            self.rotation.validate()?;
        }
        Ok(())
    }

    /// True when the relative decrease over the last `stall_window` accepted
    /// iterates is below `stall_rel_decrease`.
    pub fn is_stalled(&self, history: &[IterateRecord]) -> bool {
        let len = history.len();
        if len <= self.stall_window {
            return false;
        }
        let old = history[len - 1 - self.stall_window].objective;
        let new = history[len - 1].objective;
        if old == 0.0 {
            return true;
        }
        (old - new) / old.abs() < self.stall_rel_decrease
    }
}

/// Accepted iterate tagged with the basis generation it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub n_forward: usize,
    pub n_adjoint: usize,
    pub adaptation_id: usize,
}

/// Complete history of one optimization.
#[derive(Debug, Clone)]
pub struct OptimizationRun {
    pub iterates: Vec<RunRecord>,
    pub adaptation_events: Vec<AdaptationEvent>,
    pub final_xi: Option<LatentVector>,
    pub final_model: Field,
    pub final_objective: f64,
    pub final_basis: Option<ReducedBasis>,
    /// Solution reached in each basis generation, in order.
    pub snapshots: Vec<Field>,
    pub status: CgStatus,
}

impl OptimizationRun {
    pub fn counts(&self) -> SolveCounts {
        self.iterates
            .last()
            .map_or(SolveCounts::default(), |r| SolveCounts {
                forward: r.n_forward,
                adjoint: r.n_adjoint,
            })
    }

    /// Writes the convergence log with a header line.
    pub fn convergence_csv(&self) -> String {
        let mut out =
            String::from("iteration,objective,grad_norm,n_forward,n_adjoint,adaptation_id\n");
        for r in &self.iterates {
            out.push_str(&format!(
                "{},{:e},{:e},{},{},{}\n",
                r.iteration, r.objective, r.grad_norm, r.n_forward, r.n_adjoint, r.adaptation_id
            ));
        }
        out
    }
}

fn push_records(
    iterates: &mut Vec<RunRecord>,
    history: &[IterateRecord],
    offset: usize,
    adaptation_id: usize,
) {
    iterates.extend(history.iter().map(|h| RunRecord {
        iteration: offset + h.iteration,
        objective: h.objective,
        grad_norm: h.grad_norm,
        n_forward: h.n_forward,
        n_adjoint: h.n_adjoint,
        adaptation_id,
    }));
}

/// Candidate basis from one strategy application.
struct Adapted {
    basis: ReducedBasis,
    strategy: StrategyKind,
    gamma: Option<f64>,
    retained_indices: Vec<usize>,
    complement_indices: Vec<usize>,
}

fn adapt_basis(basis: &ReducedBasis, grad_m: &[f64], policy: &AdaptPolicy) -> Result<Adapted> {
    let coeffs = sensitivity_coefficients(basis, grad_m)?;
    Ok(match policy.strategy {
        AdaptStrategy::None => unreachable!("no adaptation requested"),
        AdaptStrategy::Rotation => {
            let (b, gamma) = rotation_update(basis, &coeffs, &policy.rotation)?;
            Adapted {
                basis: b,
                strategy: StrategyKind::Rotation,
                gamma,
                retained_indices: Vec::new(),
                complement_indices: Vec::new(),
            }
        }
        AdaptStrategy::Extension => {
            let n_add = policy.n_add.min(basis.n_complement());
            let (b, promoted) = extension_update(basis, &coeffs, n_add)?;
            let start = basis.n_retained();
            let added = (start..start + promoted.len()).collect();
            Adapted {
                basis: b,
                strategy: StrategyKind::Extension,
                gamma: None,
                retained_indices: added,
                complement_indices: promoted,
            }
        }
        AdaptStrategy::Swap => {
            let limit = basis
                .n_retained()
                .saturating_sub(1)
                .min(basis.n_complement());
            let (b, pairs) = swap_update(
                basis,
                &coeffs,
                policy.n_swap.min(limit),
                policy.rotation.alpha_mode,
                policy.rotation.denom_tol,
            )?;
            Adapted {
                basis: b,
                strategy: StrategyKind::Swap,
                gamma: None,
                retained_indices: pairs.retained,
                complement_indices: pairs.complement,
            }
        }
    })
}

/// CG in latent space with basis adaptation on stalls.
pub fn adaptive_minimize(
    problem: &DiffusionProblem,
    basis: &ReducedBasis,
    xi0: &LatentVector,
    cg: &CgConfig,
    policy: &AdaptPolicy,
) -> Result<OptimizationRun> {
    policy.validate()?;
    if xi0.len() != basis.n_retained() {
        return Err(invalid("initial latent vector does not match the basis"));
    }
    let mut basis = basis.clone();
    let mut xi: Vec<f64> = xi0.0.as_slice().to_vec();
    let mut counts = SolveCounts::default();
    let mut iterates = Vec::new();
    let mut events = Vec::new();
    let mut snapshots = Vec::new();
    let mut offset = 0usize;

    loop {
        let generation = events.len();
        let can_adapt =
            policy.strategy != AdaptStrategy::None && generation < policy.max_adaptations;
        let mut obj = ReducedObjective::with_counts(problem, &basis, counts);
        let mut monitor = |h: &[IterateRecord]| can_adapt && policy.is_stalled(h);
        let outcome = cg_minimize_with(&mut obj, &xi, cg, &mut monitor)?;
        counts = obj.counts();
        push_records(&mut iterates, &outcome.history, offset, generation);
        offset = iterates.last().map_or(offset, |r| r.iteration);
        xi = outcome.x.clone();
        let model = basis.synthesize(&LatentVector::from_slice(&xi))?;

        if outcome.status != CgStatus::Stalled {
            snapshots.push(model.clone());
            return Ok(OptimizationRun {
                iterates,
                adaptation_events: events,
                final_xi: Some(LatentVector::from_slice(&xi)),
                final_model: model,
                final_objective: outcome.value,
                final_basis: Some(basis),
                snapshots,
                status: outcome.status,
            });
        }

        let grad_m = match obj.model_gradient_at(&xi) {
            Some(g) => g.to_vec(),
            None => {
                counts.forward += 1;
                counts.adjoint += 1;
                problem
                    .value_and_gradient(&model)
                    .map(|(_, g)| g)
                    .ok_or_else(|| invalid("gradient unavailable at stalled iterate"))?
            }
        };
        let guarded = policy.strategy == AdaptStrategy::Rotation && policy.rotation_halvings > 0;
        let mut trial_policy = *policy;
        let mut attempt = 0;
        let (adapted, next_xi, objective_after) = loop {
            let adapted = adapt_basis(&basis, &grad_m, &trial_policy)?;
            let next_xi = adapted.basis.project(&model)?;
            counts.forward += 1;
            let after = problem.value(&adapted.basis.synthesize(&next_xi)?);
            let worse = after.is_none_or(|v| v > outcome.value);
            if !guarded || !worse || attempt == policy.rotation_halvings {
                break (adapted, next_xi, after);
            }
            trial_policy.rotation.epsilon *= 0.5;
            attempt += 1;
        };
        let accepted = !guarded || objective_after.is_some_and(|v| v <= outcome.value);
        let strategy = adapted.strategy;
        snapshots.push(model);
        events.push(AdaptationEvent {
            strategy,
            iteration: offset,
            gamma: adapted.gamma,
            epsilon: (strategy == StrategyKind::Rotation).then_some(trial_policy.rotation.epsilon),
            retained_indices: adapted.retained_indices,
            complement_indices: adapted.complement_indices,
            basis_before_hash: basis.fingerprint(),
            basis_after_hash: if accepted {
                adapted.basis.fingerprint()
            } else {
                basis.fingerprint()
            },
            objective_before: outcome.value,
            objective_after: objective_after.unwrap_or(f64::INFINITY),
            accepted,
        });
        if !accepted {
            log::info!("rotation {generation} raised the objective; basis kept");
            continue;
        }
        if objective_after.is_none() {
            // The re-expressed model is infeasible; keep the last solution.
            log::warn!("re-expressed iterate after adaptation {generation} is infeasible");
            let model = snapshots.last().cloned().expect("snapshot pushed above");
            return Ok(OptimizationRun {
                iterates,
                adaptation_events: events,
                final_xi: Some(LatentVector::from_slice(&xi)),
                final_model: model,
                final_objective: outcome.value,
                final_basis: Some(basis),
                snapshots,
                status: CgStatus::OracleFailure,
            });
        }
        basis = adapted.basis;
        xi = next_xi.0.as_slice().to_vec();
    }
}

/// CG directly over the coefficient field.
pub fn full_model_minimize(
    problem: &DiffusionProblem,
    m0: &Field,
    cg: &CgConfig,
) -> Result<OptimizationRun> {
    if m0.len() != problem.grid.n_cells {
        return Err(invalid("initial model does not match the grid"));
    }
    let mut obj = FullModelObjective::new(problem);
    let outcome = cg_minimize(&mut obj, m0.values(), cg)?;
    let mut iterates = Vec::new();
    push_records(&mut iterates, &outcome.history, 0, 0);
    let model = Field(outcome.x);
    Ok(OptimizationRun {
        iterates,
        adaptation_events: Vec::new(),
        final_xi: None,
        final_model: model.clone(),
        final_objective: outcome.value,
        final_basis: None,
        snapshots: vec![model],
        status: outcome.status,
    })
}

/// Rosenbrock function and gradient, used by tests and examples.
pub fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    let g = vec![
        -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
        200.0 * (b - a * a),
    ];
    (f, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    type Oracle = Option<(f64, Vec<f64>)>;

    fn quadratic() -> FnObjective<impl FnMut(&[f64]) -> Oracle> {
        FnObjective::new(|x: &[f64]| {
            Some((
                x.iter().map(|v| v * v).sum(),
                x.iter().map(|v| 2.0 * v).collect(),
            ))
        })
    }

    #[test]
    fn quadratic_converges_quickly() {
        let mut obj = quadratic();
        let out = cg_minimize(&mut obj, &[3.0, -4.0], &CgConfig::default()).unwrap();
        assert_eq!(out.status, CgStatus::Converged);
        assert!(out.x.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
        assert!(
            out.history.len() <= 6,
            "took {} iterations",
            out.history.len() - 1
        );
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let mut obj = quadratic();
        let out = cg_minimize(&mut obj, &[0.0, 0.0], &CgConfig::default()).unwrap();
        assert_eq!(out.status, CgStatus::Converged);
        assert_eq!(out.history.len(), 1);
        assert_eq!(obj.counts().forward, 1);
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let mut obj = FnObjective::new(|x: &[f64]| Some(rosenbrock(x)));
        let cfg = CgConfig {
            max_iters: 500,
            ..Default::default()
        };
        let out = cg_minimize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        assert!(out.value < 1e-6, "f = {}", out.value);
        assert!((out.x[0] - 1.0).abs() < 1e-2 && (out.x[1] - 1.0).abs() < 1e-2);
        assert!(out.history.len() <= 501);
    }

    #[test]
    fn fletcher_reeves_also_descends() {
        let mut obj = FnObjective::new(|x: &[f64]| Some(rosenbrock(x)));
        let cfg = CgConfig {
            max_iters: 2000,
            beta_formula: BetaFormula::FletcherReeves,
            restart_period: 10,
            ..Default::default()
        };
        let out = cg_minimize(&mut obj, &[-1.2, 1.0], &cfg).unwrap();
        assert!(out.value < 1e-4, "f = {}", out.value);
    }

    #[test]
    fn accepted_objectives_are_monotone() {
        let mut obj = FnObjective::new(|x: &[f64]| Some(rosenbrock(x)));
        let out = cg_minimize(&mut obj, &[-1.2, 1.0], &CgConfig::default()).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // Minimum of (x - 2)^2 lies beyond a wall at x = 1.
        let mut obj = FnObjective::new(|x: &[f64]| {
            (x[0] < 1.0).then(|| ((x[0] - 2.0).powi(2), vec![2.0 * (x[0] - 2.0)]))
        });
        let out = cg_minimize(&mut obj, &[0.0], &CgConfig::default()).unwrap();
        assert!(out.x[0] < 1.0 && out.x[0] > 0.9);
        assert_ne!(out.status, CgStatus::OracleFailure);
    }

    #[test]
    fn failing_start_is_reported() {
        let mut obj = FnObjective::new(|_: &[f64]| None);
        let out = cg_minimize(&mut obj, &[0.0], &CgConfig::default()).unwrap();
        assert_eq!(out.status, CgStatus::OracleFailure);
    }

    #[test]
    fn stall_detection() {
        let policy = AdaptPolicy {
            stall_window: 2,
            ..Default::default()
        };
        let rec = |objective| IterateRecord {
            iteration: 0,
            objective,
            grad_norm: 0.0,
            n_forward: 0,
            n_adjoint: 0,
        };
        assert!(!policy.is_stalled(&[rec(10.0), rec(5.0)]));
        assert!(!policy.is_stalled(&[rec(10.0), rec(5.0), rec(4.0)]));
        assert!(policy.is_stalled(&[rec(10.0), rec(10.0), rec(9.9999)]));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut obj = quadratic();
        let cfg = CgConfig {
            grad_tol: 0.0,
            ..Default::default()
        };
        assert!(cg_minimize(&mut obj, &[1.0], &cfg).is_err());
    }
}
