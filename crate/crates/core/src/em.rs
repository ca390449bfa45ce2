//! Penalized EM for low-rank factorization under mixture of exponential power
//! noise, with random restarts.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alm::{
    factor_step, refine_reweighted, solve_weighted_l2, solve_weighted_lrmf, AlmOptions, L2Options,
    ProxWeights, ReweightOptions,
};
use crate::data::{FactorPair, ObservedMatrix};
use crate::error::{Error, Result};
use crate::mixture::{
    e_step, update_eta, update_pi, EpComponent, MoepModel, PenaltyConfig, Responsibilities,
    ETA_MAX, ETA_MIN, PARAMS_PER_COMPONENT,
};

/// How the factor update of the M-step is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorSolver {
    /// Weighted least squares when every surviving exponent is 2, otherwise ALM.
    Auto,
    Alm,
    WeightedL2,
    /// Reweighted least squares from the current factors, without ALM.
    #[default]
    Reweighted,
}

/// Starting precisions of the mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaInit {
    /// `η_k = 1` for every component.
    Unit,
    /// Each `η_k` fitted to the residuals of the initial factors, as the
    /// precision update would with equal responsibilities.
    #[default]
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub rank: usize,
    /// One exponent per initial component.
    pub p_candidates: Vec<f64>,
    pub penalty: PenaltyConfig,
    /// Relative change of the objective that ends a run.
    pub tol: f64,
    pub max_outer: usize,
    pub restarts: usize,
    pub seed: u64,
    pub alm: AlmOptions,
    pub l2: L2Options,
    pub solver: FactorSolver,
    /// Reweighted least squares run after the ALM solve (or in its place for
    /// [`FactorSolver::Reweighted`]); `max_rounds = 0` turns it off.
    pub reweight: ReweightOptions,
    pub eta_init: EtaInit,
    /// Start the first restart from the truncated SVD of the zero-filled data
    /// instead of random factors.
    #[serde(default)]
    pub svd_start: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            p_candidates: vec![0.2, 0.5, 1.0, 2.0],
            penalty: PenaltyConfig::default(),
            tol: 1e-6,
            max_outer: 100,
            restarts: 5,
            seed: 0,
            alm: AlmOptions::default(),
            l2: L2Options {
                max_iter: 50,
                tol: 1e-10,
            },
            solver: FactorSolver::default(),
            reweight: ReweightOptions::default(),
            eta_init: EtaInit::default(),
            svd_start: false,
        }
    }
}

impl EmConfig {
    pub fn k_start(&self) -> usize {
        self.p_candidates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_candidates.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one shape candidate is required".into(),
            ));
        }
        if let Some(p) = self
            .p_candidates
            .iter()
            .find(|p| !(**p > 0.0 && p.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "shape candidate {p} must be positive"
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter(
                "restarts must be at least 1".into(),
            ));
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidParameter(
                "max_outer must be at least 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.solver == FactorSolver::WeightedL2 && self.p_candidates.iter().any(|&p| p != 2.0) {
            return Err(Error::InvalidParameter(
                "the weighted least-squares solver needs every shape equal to 2".into(),
            ));
        }
        self.penalty.validate()?;
        let per_component = self.penalty.lambda * PARAMS_PER_COMPONENT;
        if per_component >= 1.0 {
            return Err(Error::PenaltyTooLarge(per_component));
        }
        self.alm.validate()
    }
}

/// Counters collected over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    /// Entries whose responsibilities fell back to uniform.
    pub underflows: usize,
    /// Precision updates that hit a clamp.
    pub eta_clamps: usize,
    /// Factor updates discarded because they lowered the expected
    /// complete-data log-likelihood.
    pub rejected_factor_updates: usize,
    /// Inner ALM solves that stopped at the iteration cap.
    pub alm_unconverged: usize,
    /// Row or column systems regularized by the least-squares solver.
    pub ridge_solves: usize,
    /// Variational E-steps that hit the sweep cap.
    pub estep_unconverged: usize,
}

impl EmDiagnostics {
    fn absorb(&mut self, other: &EmDiagnostics) {
        self.underflows += other.underflows;
        self.eta_clamps += other.eta_clamps;
        self.rejected_factor_updates += other.rejected_factor_updates;
        self.alm_unconverged += other.alm_unconverged;
        self.ridge_solves += other.ridge_solves;
        self.estep_unconverged += other.estep_unconverged;
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub factors: FactorPair,
    pub model: MoepModel,
    pub resp: Responsibilities,
    /// Penalized objective at the initial parameters and after every outer iteration.
    pub objective_trace: Vec<f64>,
    /// Component count after every outer iteration.
    pub k_trace: Vec<usize>,
    /// Unpenalized mixture log-likelihood `Σ_Ω ln Σ_k π_k f_k(e_ij)` at the final parameters.
    pub log_likelihood: f64,
    pub converged: bool,
    /// Index of the selected restart.
    pub restart: usize,
    /// Final objective of every restart, `None` for failed ones.
    pub restart_objectives: Vec<Option<f64>>,
    /// Failure messages of failed restarts.
    pub restart_failures: Vec<(usize, String)>,
    pub diagnostics: EmDiagnostics,
}

impl EmResult {
    pub fn k_final(&self) -> usize {
        self.model.k()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Outcome of [`objective_monotone_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonotoneCheck {
    pub monotone: bool,
    /// Index `t` of the first value with `trace[t] < trace[t-1] - slack`.
    pub first_violation: Option<usize>,
}

/// Non-decrease check with per-step slack `1e-8 (1 + |trace[t-1]|)`.
pub fn objective_monotone_check(trace: &[f64]) -> MonotoneCheck {
    let first_violation = trace
        .windows(2)
        .position(|w| w[1] < w[0] - 1e-8 * (1.0 + w[0].abs()))
        .map(|t| t + 1);
    MonotoneCheck {
        monotone: first_violation.is_none(),
        first_violation,
    }
}

/// Responsibility update used by the driver. Returns the new responsibilities
/// and the unpenalized objective they attain together with the current
/// parameters.
pub(crate) trait Posterior {
    fn initial(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)>;

    fn refresh(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        prev: Responsibilities,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)>;
}

/// Exact posterior; the objective is the mixture log-likelihood.
pub(crate) struct ExactPosterior;

impl Posterior for ExactPosterior {
    fn initial(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)> {
        let out = e_step(residuals, model)?;
        diag.underflows += out.underflows;
        Ok((out.resp, out.log_likelihood))
    }

    fn refresh(
        &mut self,
        residuals: &[f64],
        model: &MoepModel,
        _prev: Responsibilities,
        diag: &mut EmDiagnostics,
    ) -> Result<(Responsibilities, f64)> {
        self.initial(residuals, model, diag)
    }
}

/// Seeded generator for restart `index`.
pub fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Gaussian factors scaled by `(‖Y‖_F / √(m n r))^{1/2}`.
pub fn random_factors(y: &ObservedMatrix, rank: usize, rng: &mut impl Rng) -> FactorPair {
    let (m, n) = y.shape();
    let norm = y.observed_norm();
    let base = if norm > 0.0 { norm } else { 1.0 };
    let scale = (base / ((m * n * rank) as f64).sqrt()).sqrt();
    let u = DMatrix::from_fn(m, rank, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let v = DMatrix::from_fn(n, rank, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    FactorPair { u, v }
}

/// Uniform proportions and unit precisions. Repeated shapes get precisions
/// spread by powers of ten so that their responsibilities can separate.
pub fn initial_model(shapes: &[f64]) -> Result<MoepModel> {
    let k = shapes.len() as f64;
    let comps = shapes
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let same: Vec<usize> = (0..shapes.len()).filter(|&j| shapes[j] == p).collect();
            let rank = same
                .iter()
                .position(|&j| j == i)
                .expect("i has its own shape");
            let offset = rank as f64 - (same.len() - 1) as f64 / 2.0;
            EpComponent {
                p,
                eta: 10f64.powf(offset),
                pi: 1.0 / k,
            }
        })
        .collect();
    MoepModel::new(comps)
}

/// Single-run result before restart selection.
pub(crate) struct RunOutput {
    pub factors: FactorPair,
    pub model: MoepModel,
    pub resp: Responsibilities,
    pub trace: Vec<f64>,
    pub k_trace: Vec<usize>,
    pub converged: bool,
    pub diagnostics: EmDiagnostics,
}

fn penalty_of(config: &EmConfig, y: &ObservedMatrix, model: &MoepModel) -> f64 {
    let mult = config.penalty.multiplier(y.ncols(), y.omega_size());
    config.penalty.value(&model.proportions(), mult)
}

/// One EM run from the given initial factors.
pub(crate) fn run_once<P: Posterior>(
    y: &ObservedMatrix,
    config: &EmConfig,
    init: FactorPair,
    posterior: &mut P,
) -> Result<RunOutput> {
    let omega = y.omega_size();
    let mut diag = EmDiagnostics::default();
    let mut factors = init;
    let mut residuals = y.residuals(&factors);
    let mut model = initial_model(&config.p_candidates)?;
    if config.eta_init == EtaInit::Matched {
        let uniform = Responsibilities::uniform(residuals.len(), model.k());
        let fitted = update_eta(&uniform, &residuals, &model)?.eta;
        let spread: Vec<f64> = model
            .precisions()
            .iter()
            .zip(&fitted)
            .map(|(s, f)| (s * f).clamp(ETA_MIN, ETA_MAX))
            .collect();
        model.set_precisions(&spread);
    }
    let (mut resp, value) = posterior.initial(&residuals, &model, &mut diag)?;
    let mut trace = vec![value - penalty_of(config, y, &model)];
    let mut k_trace = vec![model.k()];
    let mut converged = false;
    for _ in 0..config.max_outer {
        let pi = update_pi(&resp, &config.penalty, omega)?;
        if pi.survivors.len() < model.k() {
            model.retain(&pi.survivors);
            resp.retain(&pi.survivors);
        }
        model.set_proportions(&pi.pi);
        let eta = update_eta(&resp, &residuals, &model)?;
        diag.eta_clamps += eta.clamped;
        model.set_precisions(&eta.eta);

        factors = update_factors(y, config, &model, &resp, factors, &residuals, &mut diag)?;
        residuals = y.residuals(&factors);

        let (new_resp, value) = posterior.refresh(&residuals, &model, resp, &mut diag)?;
        resp = new_resp;
        let objective = value - penalty_of(config, y, &model);
        if !objective.is_finite() {
            return Err(Error::NonFinite("penalized objective".into()));
        }
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(objective);
        k_trace.push(model.k());
        if (objective - prev).abs() < config.tol * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(RunOutput {
        factors,
        model,
        resp,
        trace,
        k_trace,
        converged,
        diagnostics: diag,
    })
}

/// M-step for `(U, V)`: minimizes `Σ_Ω Σ_k η_k γ_ijk |e_ij|^p_k` starting from
/// the current factors; the update is discarded if it does not improve on them.
fn update_factors(
    y: &ObservedMatrix,
    config: &EmConfig,
    model: &MoepModel,
    resp: &Responsibilities,
    current: FactorPair,
    residuals: &[f64],
    diag: &mut EmDiagnostics,
) -> Result<FactorPair> {
    let weights = ProxWeights::from_mixture(model, resp)?;
    let before = weights.objective(residuals);
    let quadratic = weights.all_quadratic();
    let (mut best, mut best_value) = (current, before);
    let use_alm = match config.solver {
        FactorSolver::Auto => !quadratic,
        FactorSolver::Alm => true,
        FactorSolver::WeightedL2 | FactorSolver::Reweighted => false,
    };
    let consider = |candidate: FactorPair, best: &mut FactorPair, best_value: &mut f64| {
        let value = weights.objective(&y.residuals(&candidate));
        if value <= *best_value {
            *best = candidate;
            *best_value = value;
        }
    };
    if config.solver == FactorSolver::WeightedL2
        || (config.solver == FactorSolver::Auto && quadratic)
    {
        let out = solve_weighted_l2(y, &weights.l2_weights(y), config.rank, &best, &config.l2)?;
        diag.ridge_solves += out.ridge_solves;
        consider(out.factors, &mut best, &mut best_value);
    } else {
        if use_alm {
            let out = solve_weighted_lrmf(y, &weights, config.rank, &best, &config.alm)?;
            if !out.converged {
                diag.alm_unconverged += 1;
            }
            consider(out.factors, &mut best, &mut best_value);
        }
        if config.reweight.max_rounds > 0 {
            let floors: Vec<f64> = model
                .components()
                .iter()
                .map(|c| c.params().sigma())
                .collect();
            let refined =
                refine_reweighted(y, &weights, &floors, config.rank, &best, &config.reweight)?;
            consider(refined, &mut best, &mut best_value);
        }
    }
    if !(best_value < before) {
        diag.rejected_factor_updates += 1;
    }
    Ok(best)
}

/// Runs every restart with a fresh posterior from `make` and keeps the one
/// with the highest final objective (lowest index on ties).
pub(crate) fn fit_with<P: Posterior>(
    y: &ObservedMatrix,
    config: &EmConfig,
    mut make: impl FnMut() -> P,
) -> Result<EmResult> {
    config.validate()?;
    y.check_rank_requirement(config.rank)?;
    let mut best: Option<(usize, RunOutput)> = None;
    let mut restart_objectives = Vec::with_capacity(config.restarts);
    let mut restart_failures = Vec::new();
    let mut diagnostics = EmDiagnostics::default();
    for index in 0..config.restarts {
        let mut rng = restart_rng(config.seed, index);
        let init = if config.svd_start && index == 0 {
            factor_step(y.values(), config.rank)?
        } else {
            random_factors(y, config.rank, &mut rng)
        };
        let mut posterior = make();
        match run_once(y, config, init, &mut posterior) {
            Ok(run) => {
                let value = *run.trace.last().expect("trace is never empty");
                restart_objectives.push(Some(value));
                diagnostics.absorb(&run.diagnostics);
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| value > *b.trace.last().expect("trace is never empty"));
                if better {
                    best = Some((index, run));
                }
            }
            Err(err) => {
                restart_objectives.push(None);
                restart_failures.push((index, err.to_string()));
            }
        }
    }
    let Some((restart, run)) = best else {
        let msg = restart_failures
            .first()
            .map(|(_, m)| m.clone())
            .unwrap_or_default();
        return Err(Error::AllRestartsFailed(config.restarts, msg));
    };
    let residuals = y.residuals(&run.factors);
    let log_likelihood = crate::mixture::log_likelihood(&residuals, &run.model);
    Ok(EmResult {
        factors: run.factors,
        model: run.model,
        resp: run.resp,
        objective_trace: run.trace,
        k_trace: run.k_trace,
        log_likelihood,
        converged: run.converged,
        restart,
        restart_objectives,
        restart_failures,
        diagnostics,
    })
}

/// Fits the penalized mixture-of-EP factorization.
pub fn fit_pmoep(y: &ObservedMatrix, config: &EmConfig) -> Result<EmResult> {
    fit_with(y, config, || ExactPosterior)
}
