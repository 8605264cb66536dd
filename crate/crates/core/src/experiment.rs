//! Reproduction harness: builds the synthetic cases, runs the method
//! comparison and writes plot-ready artifacts.
//!
//! Output layout under `output_dir/<case>/`:
//!
//! ```text
//! config.json            resolved configuration
//! dataset.json           prior ensemble
//! truth.csv              true coefficient field
//! truth_trajectory.csv   forward run of the truth
//! observations.json
//! spectrum.csv           written by `spectrum`
//! basis.json             initial reduced basis, written by `run`
//! runs/<method>/         convergence.csv, final.csv, snapshot_<k>.csv,
//!                        events.jsonl, summary.json, timing.txt
//! ```
//!
//! Sub-seeds are derived from the master seed by fixed offsets
//! (see [`SeedPlan`]), so every artifact is a pure function of the
//! configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{
    fd_gradient, misfit, relative_l2_error, ObjectiveConfig, Observations, PriorPrecision,
};
use crate::basis::{eigendecompose, truncate, BasisExport, LatentVector, ReducedBasis, Truncation};
use crate::error::{invalid, Error, Result};
use crate::field::{
    add_low_frequency_noise, generate_prior, true_model, DatasetFile, Field, Grid, PerturbConfig,
    PriorDataset,
};
use crate::forward::{simulate, SimConfig};
use crate::optimize::{
    adaptive_minimize, full_model_minimize, AdaptPolicy, AdaptStrategy, CgConfig, DiffusionProblem,
    OptimizationRun, DEFAULT_D_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// Truth is the analytic model.
    Clean,
    /// Truth is the analytic model plus low-frequency noise.
    Noised,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::Clean => "clean",
            Case::Noised => "noised",
        }
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Case::Clean),
            "noised" => Ok(Case::Noised),
            other => Err(invalid(format!("unknown case '{other}'"))),
        }
    }
}

/// One optimization method of the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Pca,
    Rotation,
    Swap,
    Extension,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Full,
        Method::Pca,
        Method::Rotation,
        Method::Swap,
        Method::Extension,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Pca => "pca",
            Method::Rotation => "rotation",
            Method::Swap => "swap",
            Method::Extension => "extension",
        }
    }

    fn strategy(self) -> Option<AdaptStrategy> {
        match self {
            Method::Full => None,
            Method::Pca => Some(AdaptStrategy::None),
            Method::Rotation => Some(AdaptStrategy::Rotation),
            Method::Swap => Some(AdaptStrategy::Swap),
            Method::Extension => Some(AdaptStrategy::Extension),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

/// Parses a comma-separated method list such as `pca,rotation`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Method::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationConfig {
    /// Number of evenly spaced observation times; the last is the final step.
    pub n_times: usize,
    /// Observed cells; all cells when absent.
    pub locations: Option<Vec<usize>>,
    /// Data standard deviation used for weighting.
    pub noise_std: f64,
    /// Standard deviation of Gaussian noise added to the synthetic data.
    pub added_noise_std: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            n_times: 5,
            locations: None,
            noise_std: 0.01,
            added_noise_std: 0.0,
        }
    }
}

impl ObservationConfig {
    pub fn times(&self, n_steps: usize) -> Result<Vec<usize>> {
        if self.n_times == 0 || self.n_times > n_steps {
            return Err(invalid(format!(
                "n_times must lie in 1..={n_steps}, got {}",
                self.n_times
            )));
        }
        Ok((1..=self.n_times)
            .map(|k| k * n_steps / self.n_times)
            .collect())
    }

    pub fn locations(&self, n_cells: usize) -> Vec<usize> {
        self.locations
            .clone()
            .unwrap_or_else(|| (0..n_cells).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_realizations: usize,
    pub amplitude: f64,
    pub correlation_length: f64,
    /// Low-frequency noise added to the truth in the noised case.
    pub noise_amplitude: f64,
    pub noise_wavenumber: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_realizations: 600,
            amplitude: 0.3,
            correlation_length: 0.25,
            noise_amplitude: 0.3,
            noise_wavenumber: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub energy_threshold: f64,
    pub max_components: Option<usize>,
    pub export_complement: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 0.95,
            max_components: Some(15),
            export_complement: false,
        }
    }
}

impl BasisConfig {
    pub fn truncation(&self) -> Truncation {
        Truncation::Energy {
            threshold: self.energy_threshold,
            max_components: self.max_components,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPrecisionKind {
    /// `C_M^{-1} = scale * I`.
    Identity,
    /// Inverse of the prior dataset covariance plus jitter.
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveBlock {
    pub beta: f64,
    pub prior_precision: PriorPrecisionKind,
    pub prior_scale: f64,
    pub covariance_jitter: f64,
    pub d_floor: f64,
}

impl Default for ObjectiveBlock {
    fn default() -> Self {
        Self {
            beta: 1.0,
            prior_precision: PriorPrecisionKind::Identity,
            prior_scale: 1.0,
            covariance_jitter: 1e-6,
            d_floor: DEFAULT_D_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub n_cells: usize,
    pub n_steps: usize,
    pub n_realizations: usize,
    pub n_components: usize,
    pub fd_step: f64,
    pub newton_tol: f64,
    pub tolerance: f64,
    pub absolute_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_cells: 20,
            n_steps: 10,
            n_realizations: 60,
            n_components: 6,
            fd_step: 1e-6,
            newton_tol: 1e-12,
            tolerance: 1e-4,
            absolute_tolerance: 1e-10,
        }
    }
}

/// Complete experiment description; every block has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub grid: Grid,
    pub sim: SimConfig,
    pub observation: ObservationConfig,
    pub dataset: DatasetConfig,
    pub basis: BasisConfig,
    pub objective: ObjectiveBlock,
    pub cg: CgConfig,
    /// Stall and strategy parameters; the strategy itself comes from the method.
    pub policy: AdaptPolicy,
    pub gradcheck: GradcheckConfig,
    pub case: Case,
    pub strategies: Vec<Method>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            // Outflow through both ends; inflow grows without bound.
            sim: SimConfig {
                flux_left: 1.0,
                flux_right: -1.0,
                ..SimConfig::default()
            },
            observation: ObservationConfig::default(),
            dataset: DatasetConfig::default(),
            basis: BasisConfig::default(),
            objective: ObjectiveBlock::default(),
            cg: CgConfig {
                max_iters: 2000,
                ..CgConfig::default()
            },
            policy: AdaptPolicy::default(),
            gradcheck: GradcheckConfig::default(),
            case: Case::Clean,
            strategies: Method::ALL.to_vec(),
            output_dir: PathBuf::from("out"),
            master_seed: 2024,
        }
    }
}

/// Fixed offsets from the master seed for each random consumer.
#[derive(Debug, Clone, Copy)]
pub struct SeedPlan {
    pub prior: u64,
    pub truth_noise: u64,
    pub observation_noise: u64,
    pub gradcheck: u64,
}

impl SeedPlan {
    pub const PRIOR_OFFSET: u64 = 1;
    pub const TRUTH_NOISE_OFFSET: u64 = 2;
    pub const OBSERVATION_NOISE_OFFSET: u64 = 3;
    pub const GRADCHECK_OFFSET: u64 = 4;

    pub fn new(master: u64) -> Self {
        Self {
            prior: master.wrapping_add(Self::PRIOR_OFFSET),
            truth_noise: master.wrapping_add(Self::TRUTH_NOISE_OFFSET),
            observation_noise: master.wrapping_add(Self::OBSERVATION_NOISE_OFFSET),
            gradcheck: master.wrapping_add(Self::GRADCHECK_OFFSET),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.sim.validate()?;
        self.cg.validate()?;
        self.policy.validate()?;
        self.observation.times(self.sim.n_steps)?;
        if let Some(bad) = self
            .observation
            .locations(self.grid.n_cells)
            .iter()
            .find(|&&l| l >= self.grid.n_cells)
        {
            return Err(invalid(format!(
                "observation location {bad} outside the grid"
            )));
        }
        if self.dataset.n_realizations < 2 {
            return Err(invalid("dataset needs at least 2 realizations"));
        }
        self.perturb_config().validate()?;
        if !(0.0..=1.0).contains(&self.objective.beta) {
            return Err(invalid("objective beta must lie in [0, 1]"));
        }
        if self.strategies.is_empty() {
            return Err(invalid("no methods requested"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedPlan {
        SeedPlan::new(self.master_seed)
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            amplitude: self.dataset.amplitude,
            correlation_length: self.dataset.correlation_length,
            seed: self.seeds().prior,
        }
    }

    pub fn case_dir(&self) -> PathBuf {
        self.output_dir.join(self.case.name())
    }

    pub fn run_dir(&self, method: Method) -> PathBuf {
        self.case_dir().join("runs").join(method.name())
    }

    /// Truth field for the configured case.
    pub fn truth(&self) -> Result<Field> {
        let clean = true_model(&self.grid);
        match self.case {
            Case::Clean => Ok(clean),
            Case::Noised => add_low_frequency_noise(
                &clean,
                &self.grid,
                self.dataset.noise_amplitude,
                self.dataset.noise_wavenumber,
                self.seeds().truth_noise,
            ),
        }
    }

    fn objective_config(&self, dataset: &PriorDataset) -> Result<ObjectiveConfig> {
        let precision = match self.objective.prior_precision {
            PriorPrecisionKind::Identity => {
                PriorPrecision::ScaledIdentity(self.objective.prior_scale)
            }
            PriorPrecisionKind::Covariance => PriorPrecision::from_covariance(
                &dataset.covariance,
                self.objective.covariance_jitter,
            )?,
        };
        Ok(ObjectiveConfig {
            beta: self.objective.beta,
            m_prior: dataset.mean.clone(),
            precision,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Paths produced by [`cmd_generate`].
#[derive(Debug, Clone)]
pub struct GeneratedFiles {
    pub dataset: PathBuf,
    pub truth: PathBuf,
    pub truth_trajectory: PathBuf,
    pub observations: PathBuf,
}

impl GeneratedFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dataset: dir.join("dataset.json"),
            truth: dir.join("truth.csv"),
            truth_trajectory: dir.join("truth_trajectory.csv"),
            observations: dir.join("observations.json"),
        }
    }
}

/// Writes the prior dataset, truth, truth trajectory and observations.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GeneratedFiles> {
    cfg.validate()?;
    let dir = cfg.case_dir();
    std::fs::create_dir_all(&dir)?;
    let files = GeneratedFiles::in_dir(&dir);
    let seeds = cfg.seeds();

    // The prior is built around the clean model in both cases.
    let perturb = cfg.perturb_config();
    let base = true_model(&cfg.grid);
    let dataset = generate_prior(&base, &cfg.grid, cfg.dataset.n_realizations, &perturb)?;
    DatasetFile::new(cfg.grid, &dataset, perturb).write(&files.dataset)?;

    let truth = cfg.truth()?;
    truth.write_csv(&files.truth)?;
    let traj = simulate(&truth, &cfg.grid, &cfg.sim)?;
    traj.write_csv(&files.truth_trajectory)?;

    let added = (cfg.observation.added_noise_std > 0.0)
        .then_some((cfg.observation.added_noise_std, seeds.observation_noise));
    let obs = Observations::from_trajectory(
        &traj,
        cfg.observation.times(cfg.sim.n_steps)?,
        cfg.observation.locations(cfg.grid.n_cells),
        cfg.observation.noise_std,
        added,
    )?;
    obs.write(&files.observations)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(files)
}

/// One row of the eigenvalue spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumRow {
    pub index: usize,
    pub eigenvalue: f64,
    pub energy: f64,
    pub cumulative: f64,
}

pub fn spectrum(dataset: &PriorDataset) -> Result<Vec<SpectrumRow>> {
    let basis = eigendecompose(&dataset.covariance, &dataset.mean)?;
    let fractions = basis.energy_fractions()?;
    let mut cumulative = 0.0;
    Ok(basis
        .eigenvalues
        .iter()
        .zip(fractions)
        .enumerate()
        .map(|(index, (&eigenvalue, energy))| {
            cumulative += energy;
            SpectrumRow {
                index,
                eigenvalue,
                energy,
                cumulative,
            }
        })
        .collect())
}

/// Writes `index,eigenvalue,energy,cumulative_energy` for the full spectrum.
pub fn cmd_spectrum(dataset_path: &Path, out: &Path) -> Result<Vec<SpectrumRow>> {
    let dataset = DatasetFile::read(dataset_path)?.to_dataset()?;
    let rows = spectrum(&dataset)?;
    let mut text = String::from("index,eigenvalue,energy,cumulative_energy\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            r.index, r.eigenvalue, r.energy, r.cumulative
        ));
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, text)?;
    Ok(rows)
}

/// Per-method result summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub case: Case,
    pub status: String,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub final_misfit: f64,
    pub iterations: usize,
    pub n_forward: usize,
    pub n_adjoint: usize,
    pub n_adaptations: usize,
    pub n_retained_final: Option<usize>,
    pub n_snapshots: usize,
    pub truth_rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Inputs shared by all methods of one case.
pub struct RunInputs {
    pub problem: DiffusionProblem,
    pub basis: ReducedBasis,
    pub prior_mean: Field,
    pub truth: Field,
}

impl RunInputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let files = GeneratedFiles::in_dir(&cfg.case_dir());
        let file = DatasetFile::read(&files.dataset)?;
        if file.grid != cfg.grid {
            return Err(invalid("dataset grid does not match the configuration"));
        }
        let dataset = file.to_dataset()?;
        let observations = Observations::read(&files.observations)?;
        let truth = Field::read_csv(&files.truth)?;
        let full = eigendecompose(&dataset.covariance, &dataset.mean)?;
        let basis = truncate(&full, cfg.basis.truncation())?;
        let problem = DiffusionProblem {
            grid: cfg.grid,
            sim: cfg.sim,
            observations,
            objective: cfg.objective_config(&dataset)?,
            d_floor: cfg.objective.d_floor,
        };
        Ok(Self {
            problem,
            basis,
            prior_mean: dataset.mean,
            truth,
        })
    }
}

/// Runs one method from the prior mean.
pub fn run_method(
    inputs: &RunInputs,
    cfg: &ExperimentConfig,
    method: Method,
) -> Result<OptimizationRun> {
    match method.strategy() {
        None => full_model_minimize(&inputs.problem, &inputs.prior_mean, &cfg.cg),
        Some(strategy) => {
            let policy = AdaptPolicy {
                strategy,
                ..cfg.policy
            };
            let xi0 = LatentVector::zeros(inputs.basis.n_retained());
            adaptive_minimize(&inputs.problem, &inputs.basis, &xi0, &cfg.cg, &policy)
        }
    }
}

fn status_name(run: &OptimizationRun) -> String {
    serde_json::to_value(run.status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Relative L2 distance `||a - b|| / max(||a||, ||b||)`.
pub fn relative_distance(a: &Field, b: &Field) -> f64 {
    let norm = |f: &Field| f.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 =
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
    diff / norm(a).max(norm(b))
}

fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    method: Method,
    inputs: &RunInputs,
    run: &OptimizationRun,
) -> Result<RunSummary> {
    std::fs::write(dir.join("convergence.csv"), run.convergence_csv())?;
    run.final_model.write_csv(&dir.join("final.csv"))?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        snap.write_csv(&dir.join(format!("snapshot_{k}.csv")))?;
    }
    let mut events = String::new();
    for e in &run.adaptation_events {
        events.push_str(&serde_json::to_string(e).map_err(std::io::Error::from)?);
        events.push('\n');
    }
    std::fs::write(dir.join("events.jsonl"), events)?;

    let final_misfit = simulate(&run.final_model, &cfg.grid, &cfg.sim)
        .and_then(|t| misfit(&t, &inputs.problem.observations))
        .unwrap_or(f64::NAN);
    let summary = RunSummary {
        method,
        case: cfg.case,
        status: status_name(run),
        initial_objective: run.iterates.first().map_or(f64::NAN, |r| r.objective),
        final_objective: run.final_objective,
        final_misfit,
        iterations: run.iterates.last().map_or(0, |r| r.iteration),
        n_forward: run.counts().forward,
        n_adjoint: run.counts().adjoint,
        n_adaptations: run.adaptation_events.len(),
        n_retained_final: run.final_basis.as_ref().map(ReducedBasis::n_retained),
        n_snapshots: run.snapshots.len(),
        truth_rmse: run.final_model.rmse(&inputs.truth),
        error: None,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs every configured method and writes per-method artifacts. Optimizer
/// failures end up in the summaries; only I/O and input errors are returned.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let inputs = RunInputs::load(cfg)?;
    BasisExport::new(&inputs.basis, cfg.basis.export_complement)
        .write(&cfg.case_dir().join("basis.json"))?;

    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .strategies
            .iter()
            .map(|&method| {
                let inputs = &inputs;
                scope.spawn(move || -> Result<RunSummary> {
                    let dir = cfg.run_dir(method);
                    std::fs::create_dir_all(&dir)?;
                    let start = Instant::now();
                    let outcome = run_method(inputs, cfg, method);
                    let elapsed = start.elapsed().as_secs_f64();
                    std::fs::write(
                        dir.join("timing.txt"),
                        format!("wall_time_s {elapsed:.3}\n"),
                    )?;
                    match outcome {
                        Ok(run) => write_run_artifacts(&dir, cfg, method, inputs, &run),
                        Err(e) => {
                            let summary = RunSummary {
                                method,
                                case: cfg.case,
                                status: "error".into(),
                                initial_objective: f64::NAN,
                                final_objective: f64::NAN,
                                final_misfit: f64::NAN,
                                iterations: 0,
                                n_forward: 0,
                                n_adjoint: 0,
                                n_adaptations: 0,
                                n_retained_final: None,
                                n_snapshots: 0,
                                truth_rmse: f64::NAN,
                                error: Some(e.to_string()),
                            };
                            std::fs::write(
                                dir.join("convergence.csv"),
                                "iteration,objective,grad_norm,n_forward,n_adjoint,adaptation_id\n",
                            )?;
                            write_json(&dir.join("summary.json"), &summary)?;
                            Ok(summary)
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("method thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub model_error: f64,
    pub model_abs_error: f64,
    pub latent_error: f64,
    pub latent_abs_error: f64,
    pub passed: bool,
}

/// Small problem used by [`cmd_gradcheck`].
pub struct GradcheckProblem {
    pub problem: DiffusionProblem,
    pub basis: ReducedBasis,
    /// Model at which the gradients are compared.
    pub model: Field,
    pub fd_step: f64,
}

impl GradcheckProblem {
    /// Builds the check problem; with `matched` the observations are
    /// generated by the evaluation model itself.
    pub fn build(cfg: &ExperimentConfig, matched: bool) -> Result<Self> {
        let gc = &cfg.gradcheck;
        let grid = Grid::new(gc.n_cells, cfg.grid.length)?;
        let sim = SimConfig {
            n_steps: gc.n_steps,
            newton_tol: gc.newton_tol,
            ..cfg.sim
        };
        let seeds = cfg.seeds();
        let perturb = PerturbConfig {
            seed: seeds.gradcheck,
            ..cfg.perturb_config()
        };
        let truth = true_model(&grid);
        let dataset = generate_prior(&truth, &grid, gc.n_realizations, &perturb)?;
        let full = eigendecompose(&dataset.covariance, &dataset.mean)?;
        let basis = truncate(&full, Truncation::Count(gc.n_components.min(gc.n_cells)))?;
        // Both checks run at a model inside the reduced space. When matched,
        // the data come from that model so every gradient vanishes.
        let model = if matched {
            basis.synthesize(&basis.project(&truth)?)?
        } else {
            basis.synthesize(&basis.project(&dataset.realizations[0])?)?
        };
        let source = if matched { &model } else { &truth };
        let traj = simulate(source, &grid, &sim)?;
        let times = (1..=sim.n_steps).collect();
        let obs = Observations::from_trajectory(
            &traj,
            times,
            (0..grid.n_cells).collect(),
            cfg.observation.noise_std,
            None,
        )?;
        Ok(Self {
            problem: DiffusionProblem {
                grid,
                sim,
                observations: obs,
                objective: ObjectiveConfig::misfit_only(gc.n_cells),
                d_floor: cfg.objective.d_floor,
            },
            basis,
            model,
            fd_step: gc.fd_step,
        })
    }

    /// Compares `gradient` (model-space) with central differences in model
    /// space and, through the basis, in latent space.
    pub fn check_with(
        &self,
        gc: &GradcheckConfig,
        gradient: &dyn Fn(&DiffusionProblem, &Field) -> Result<Vec<f64>>,
    ) -> Result<GradcheckReport> {
        let p = &self.problem;
        let grad_m = gradient(p, &self.model)?;
        let h = self.fd_step;
        // One Richardson step removes the O(h^2) central-difference error,
        // which otherwise dominates near a matched model.
        let richardson = |coarse: Vec<f64>, fine: Vec<f64>| -> Vec<f64> {
            coarse
                .iter()
                .zip(&fine)
                .map(|(c, f)| (4.0 * f - c) / 3.0)
                .collect()
        };
        let fd_at = |step: f64| {
            fd_gradient(
                &self.model,
                &p.grid,
                &p.sim,
                &p.observations,
                &p.objective,
                step,
            )
        };
        let fd_m = richardson(fd_at(h)?, fd_at(0.5 * h)?);
        let xi = self.basis.project(&self.model)?;
        let grad_xi = self.basis.chain_gradient(&grad_m)?;
        let eval = |k: usize, delta: f64| -> Result<f64> {
            let mut x = xi.clone();
            x.0[k] += delta;
            let m = self.basis.synthesize(&x)?;
            p.value(&m)
                .ok_or_else(|| invalid("objective evaluation failed"))
        };
        let central = |k: usize, step: f64| -> Result<f64> {
            Ok((eval(k, step)? - eval(k, -step)?) / (2.0 * step))
        };
        let fd_xi = richardson(
            (0..xi.len())
                .map(|k| central(k, h))
                .collect::<Result<_>>()?,
            (0..xi.len())
                .map(|k| central(k, 0.5 * h))
                .collect::<Result<_>>()?,
        );
        let abs = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
        };
        let model_error = relative_l2_error(&grad_m, &fd_m);
        let latent_error = relative_l2_error(grad_xi.as_slice(), &fd_xi);
        let model_abs_error = abs(&grad_m, &fd_m);
        let latent_abs_error = abs(grad_xi.as_slice(), &fd_xi);
        let ok = |rel: f64, abs: f64| rel <= gc.tolerance || abs <= gc.absolute_tolerance;
        Ok(GradcheckReport {
            model_error,
            model_abs_error,
            latent_error,
            latent_abs_error,
            passed: ok(model_error, model_abs_error) && ok(latent_error, latent_abs_error),
        })
    }
}

fn adjoint_model_gradient(p: &DiffusionProblem, d: &Field) -> Result<Vec<f64>> {
    p.value_and_gradient(d)
        .map(|(_, g)| g)
        .ok_or_else(|| invalid("forward or adjoint solve failed"))
}

/// Adjoint-versus-finite-difference check on a small problem.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, matched: bool) -> Result<GradcheckReport> {
    let check = GradcheckProblem::build(cfg, matched)?;
    check.check_with(&cfg.gradcheck, &adjoint_model_gradient)
}
