//! Mixture-of-exponential-power noise model: responsibilities, penalized
//! M-step updates for the mixing proportions and precisions, and pruning.

use serde::{Deserialize, Serialize};

use crate::ep::{log_normalizer, EpParams};
use crate::error::{Error, Result};
use crate::special::log_sum_exp;

/// Free parameters per component (`π_k` and `η_k`).
pub const PARAMS_PER_COMPONENT: f64 = 2.0;
/// Lower clamp for fitted precisions.
pub const ETA_MIN: f64 = 1e-8;
/// Upper clamp for fitted precisions.
pub const ETA_MAX: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpComponent {
    pub p: f64,
    pub eta: f64,
    pub pi: f64,
}

impl EpComponent {
    pub fn params(&self) -> EpParams {
        EpParams::new(self.p, self.eta).expect("component parameters are validated by MoepModel")
    }

    #[inline]
    fn abs_pow(&self, e: f64) -> f64 {
        abs_pow(e, self.p)
    }
}

#[inline]
pub(crate) fn abs_pow(e: f64, p: f64) -> f64 {
    if p == 2.0 {
        e * e
    } else if p == 1.0 {
        e.abs()
    } else {
        e.abs().powf(p)
    }
}

/// An ordered list of weighted exponential power components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoepModel {
    components: Vec<EpComponent>,
}

impl MoepModel {
    pub fn new(components: Vec<EpComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter(
                "a mixture needs at least one component".into(),
            ));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            EpParams::new(c.p, c.eta)?;
            if !(c.pi.is_finite() && c.pi >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "pi[{k}] = {} is not a proportion",
                    c.pi
                )));
            }
            total += c.pi;
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "mixing proportions sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// Uniform proportions and unit precisions over the given shapes.
    pub fn uniform(shapes: &[f64]) -> Result<Self> {
        let k = shapes.len() as f64;
        Self::new(
            shapes
                .iter()
                .map(|&p| EpComponent {
                    p,
                    eta: 1.0,
                    pi: 1.0 / k,
                })
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[EpComponent] {
        &self.components
    }

    pub fn shapes(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.p).collect()
    }

    pub fn proportions(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.pi).collect()
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.eta).collect()
    }

    /// Replaces proportions. `pi` must have one entry per component.
    pub fn set_proportions(&mut self, pi: &[f64]) {
        assert_eq!(pi.len(), self.k());
        for (c, &v) in self.components.iter_mut().zip(pi) {
            c.pi = v;
        }
    }

    pub fn set_precisions(&mut self, eta: &[f64]) {
        assert_eq!(eta.len(), self.k());
        for (c, &v) in self.components.iter_mut().zip(eta) {
            c.eta = v;
        }
    }

    /// Keeps only the listed components, in order.
    pub fn retain(&mut self, survivors: &[usize]) {
        self.components = survivors.iter().map(|&k| self.components[k]).collect();
    }

    /// Mixture log-density at `e`.
    pub fn log_pdf(&self, e: f64) -> f64 {
        let terms = self.log_terms();
        let mut buf = vec![0.0; self.k()];
        terms.fill(e, &mut buf);
        log_sum_exp(&buf)
    }

    /// Index of the component with the largest variance.
    pub fn widest_component(&self) -> usize {
        let mut best = 0;
        let mut best_var = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let var = c.params().variance();
            if var > best_var {
                best_var = var;
                best = k;
            }
        }
        best
    }

    pub(crate) fn log_terms(&self) -> LogTerms {
        LogTerms {
            offset: self
                .components
                .iter()
                .map(|c| c.pi.ln() + log_normalizer(c.p, c.eta))
                .collect(),
            comps: self.components.clone(),
        }
    }
}

/// Precomputed `ln π_k + ln C_k` per component.
pub(crate) struct LogTerms {
    offset: Vec<f64>,
    comps: Vec<EpComponent>,
}

impl LogTerms {
    /// Writes `ln π_k + ln f_k(e)` into `out`.
    #[inline]
    pub(crate) fn fill(&self, e: f64, out: &mut [f64]) {
        for ((o, &off), c) in out.iter_mut().zip(&self.offset).zip(&self.comps) {
            *o = off - c.eta * c.abs_pow(e);
        }
    }
}

/// Penalty multiplier convention for the log-type proportion penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScale {
    /// Column count of the data matrix.
    Columns,
    /// Number of observed entries.
    #[default]
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub scale: PenaltyScale,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epsilon: 1e-6,
            scale: PenaltyScale::Observed,
        }
    }
}

impl PenaltyConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-2) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1e-2], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Multiplier in front of `λ Σ D_k ln((ε + π_k)/ε)`.
    pub fn multiplier(&self, ncols: usize, omega_size: usize) -> f64 {
        match self.scale {
            PenaltyScale::Columns => ncols as f64,
            PenaltyScale::Observed => omega_size as f64,
        }
    }

    /// `multiplier · λ · Σ_k D_k ln((ε + π_k)/ε)`.
    pub fn value(&self, pi: &[f64], multiplier: f64) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let sum: f64 = pi
            .iter()
            .map(|&p| PARAMS_PER_COMPONENT * (p / self.epsilon).ln_1p())
            .sum();
        multiplier * self.lambda * sum
    }
}

/// Posterior (or variational) component weights over observed entries,
/// stored entry-major: `gamma[idx * K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    gamma: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(k: usize, gamma: Vec<f64>) -> Result<Self> {
        if k == 0 || gamma.len() % k != 0 {
            return Err(Error::Shape(format!(
                "{} values cannot form rows of {k}",
                gamma.len()
            )));
        }
        Ok(Self { k, gamma })
    }

    pub fn uniform(entries: usize, k: usize) -> Self {
        Self {
            k,
            gamma: vec![1.0 / k as f64; entries * k],
        }
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn n_entries(&self) -> usize {
        self.gamma.len() / self.k
    }

    #[inline]
    pub fn row(&self, idx: usize) -> &[f64] {
        &self.gamma[idx * self.k..(idx + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    /// `N_k = Σ_Ω γ_ijk`.
    pub fn component_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.k];
        for row in self.gamma.chunks_exact(self.k) {
            for (s, &g) in sums.iter_mut().zip(row) {
                *s += g;
            }
        }
        sums
    }

    /// Keeps the listed components without renormalizing rows.
    pub fn retain(&mut self, survivors: &[usize]) {
        if survivors.len() == self.k {
            return;
        }
        let new_k = survivors.len();
        let mut gamma = Vec::with_capacity(self.n_entries() * new_k);
        for row in self.gamma.chunks_exact(self.k) {
            gamma.extend(survivors.iter().map(|&k| row[k]));
        }
        self.k = new_k;
        self.gamma = gamma;
    }

    /// Rescales each row to sum to one; all-zero rows become uniform.
    pub fn renormalize(&mut self) {
        let k = self.k;
        for row in self.gamma.chunks_exact_mut(k) {
            let s: f64 = row.iter().sum();
            if s > 0.0 && s.is_finite() {
                row.iter_mut().for_each(|g| *g /= s);
            } else {
                row.iter_mut().for_each(|g| *g = 1.0 / k as f64);
            }
        }
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.gamma
            .chunks_exact(self.k)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of [`e_step`].
#[derive(Debug, Clone)]
pub struct EStep {
    pub resp: Responsibilities,
    /// `Σ_Ω ln Σ_k π_k f_k(e_ij)`.
    pub log_likelihood: f64,
    /// Entries where every component density underflowed.
    pub underflows: usize,
}

/// Posterior responsibilities `γ_ijk ∝ π_k f_k(e_ij)` via log-sum-exp.
pub fn e_step(residuals: &[f64], model: &MoepModel) -> Result<EStep> {
    let k = model.k();
    let terms = model.log_terms();
    let mut gamma = vec![0.0; residuals.len() * k];
    let mut log_likelihood = 0.0;
    let mut underflows = 0;
    for (&e, row) in residuals.iter().zip(gamma.chunks_exact_mut(k)) {
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("residual {e}")));
        }
        terms.fill(e, row);
        let lse = log_sum_exp(row);
        if lse.is_finite() {
            log_likelihood += lse;
            row.iter_mut().for_each(|g| *g = (*g - lse).exp());
        } else {
            underflows += 1;
            log_likelihood += lse;
            row.iter_mut().for_each(|g| *g = 1.0 / k as f64);
        }
    }
    Ok(EStep {
        resp: Responsibilities { k, gamma },
        log_likelihood,
        underflows,
    })
}

/// Mixture log-likelihood `Σ_Ω ln Σ_k π_k f_k(e_ij)`.
pub fn log_likelihood(residuals: &[f64], model: &MoepModel) -> f64 {
    let terms = model.log_terms();
    let mut buf = vec![0.0; model.k()];
    residuals
        .iter()
        .map(|&e| {
            terms.fill(e, &mut buf);
            log_sum_exp(&buf)
        })
        .sum()
}

/// Result of the penalized proportion update.
#[derive(Debug, Clone, PartialEq)]
pub struct PiUpdate {
    /// Renormalized proportions of the surviving components.
    pub pi: Vec<f64>,
    /// Indices (into the pre-update model) of surviving components.
    pub survivors: Vec<usize>,
    /// Truncated values before renormalization, one per input component.
    pub raw: Vec<f64>,
}

/// Penalized proportion update with truncation at zero and pruning.
///
/// `π_k = max{0, (N_k/|Ω| - λ D_k) / (1 - λ D̂)}` with `D̂ = 2K` for the
/// current `K`. Survivors are renormalized to sum to one; the component with
/// the largest `N_k` is kept when every raw value truncates to zero.
///
/// When `λ D̂ ≥ 1` the common factor is dropped, so the raw values are
/// `max{0, N_k/|Ω| - λ D_k}`; after renormalization this agrees with the
/// formula wherever the formula is defined. `λ D_k ≥ 1` leaves nothing to
/// weigh and is rejected.
pub fn update_pi(
    resp: &Responsibilities,
    penalty: &PenaltyConfig,
    omega_size: usize,
) -> Result<PiUpdate> {
    penalty.validate()?;
    if omega_size == 0 {
        return Err(Error::InvalidParameter("no observed entries".into()));
    }
    let k = resp.n_components();
    let per_component = penalty.lambda * PARAMS_PER_COMPONENT;
    if per_component >= 1.0 {
        return Err(Error::PenaltyTooLarge(per_component));
    }
    let sums = resp.component_sums();
    if k == 1 {
        return Ok(PiUpdate {
            pi: vec![1.0],
            survivors: vec![0],
            raw: vec![1.0],
        });
    }
    let load = per_component * k as f64;
    let denom = if load < 1.0 { 1.0 - load } else { 1.0 };
    let raw: Vec<f64> = sums
        .iter()
        .map(|&n| {
            ((n / omega_size as f64 - penalty.lambda * PARAMS_PER_COMPONENT) / denom).max(0.0)
        })
        .collect();
    let mut survivors: Vec<usize> = (0..k).filter(|&i| raw[i] > 0.0).collect();
    if survivors.is_empty() {
        let best = (0..k)
            .max_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        survivors.push(best);
    }
    let total: f64 = survivors.iter().map(|&i| raw[i]).sum();
    let pi = if total > 0.0 {
        survivors.iter().map(|&i| raw[i] / total).collect()
    } else {
        vec![1.0]
    };
    Ok(PiUpdate { pi, survivors, raw })
}

/// Result of the precision update.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaUpdate {
    pub eta: Vec<f64>,
    /// Components whose value hit a clamp bound.
    pub clamped: usize,
    /// Components with an all-zero weighted residual sum.
    pub degenerate: usize,
}

/// `η_k = N_k / (p_k Σ_Ω γ_ijk |e_ij|^p_k)`, clamped to `[ETA_MIN, ETA_MAX]`.
pub fn update_eta(
    resp: &Responsibilities,
    residuals: &[f64],
    model: &MoepModel,
) -> Result<EtaUpdate> {
    let k = model.k();
    if resp.n_components() != k {
        return Err(Error::Shape(format!(
            "responsibilities have {} components, model has {k}",
            resp.n_components()
        )));
    }
    if resp.n_entries() != residuals.len() {
        return Err(Error::Shape(format!(
            "{} responsibility rows for {} residuals",
            resp.n_entries(),
            residuals.len()
        )));
    }
    let comps = model.components();
    let mut mass = vec![0.0; k];
    let mut moment = vec![0.0; k];
    for (&e, row) in residuals.iter().zip(resp.as_slice().chunks_exact(k)) {
        for c in 0..k {
            mass[c] += row[c];
            moment[c] += row[c] * abs_pow(e, comps[c].p);
        }
    }
    let mut clamped = 0;
    let mut degenerate = 0;
    let eta = (0..k)
        .map(|c| {
            let denom = comps[c].p * moment[c];
            let value = if denom > 0.0 {
                mass[c] / denom
            } else {
                degenerate += 1;
                ETA_MAX
            };
            let bounded = value.clamp(ETA_MIN, ETA_MAX);
            if bounded != value || denom <= 0.0 {
                clamped += 1;
            }
            bounded
        })
        .collect();
    Ok(EtaUpdate {
        eta,
        clamped,
        degenerate,
    })
}

/// `Σ_Ω ln Σ_k π_k f_k(e_ij) − n λ Σ_k D_k ln((ε+π_k)/ε)` where `n` follows
/// the penalty's [`PenaltyScale`].
pub fn penalized_log_likelihood(
    residuals: &[f64],
    model: &MoepModel,
    penalty: &PenaltyConfig,
    ncols: usize,
    omega_size: usize,
) -> f64 {
    log_likelihood(residuals, model)
        - penalty.value(&model.proportions(), penalty.multiplier(ncols, omega_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(parts: &[(f64, f64, f64)]) -> MoepModel {
        MoepModel::new(
            parts
                .iter()
                .map(|&(p, eta, pi)| EpComponent { p, eta, pi })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_component_takes_everything() {
        let m = model(&[(1.3, 2.0, 1.0)]);
        let out = e_step(&[0.0, -4.0, 17.0], &m).unwrap();
        assert!(out.resp.as_slice().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn identical_components_reproduce_proportions() {
        let m = model(&[(1.5, 3.0, 0.3), (1.5, 3.0, 0.7)]);
        let out = e_step(&[0.0, 0.4, -2.0], &m).unwrap();
        for idx in 0..3 {
            let row = out.resp.row(idx);
            assert!((row[0] - 0.3).abs() < 1e-14 && (row[1] - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn responsibilities_at_zero_scale_with_eta_root() {
        let m = model(&[(2.0, 1.0, 0.5), (2.0, 100.0, 0.5)]);
        let out = e_step(&[0.0], &m).unwrap();
        let row = out.resp.row(0);
        assert!((row[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((row[1] - 10.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn far_tail_does_not_underflow_in_log_space() {
        let m = model(&[(2.0, 1e8, 0.5), (0.5, 1.0, 0.5)]);
        let out = e_step(&[1e4], &m).unwrap();
        assert_eq!(out.underflows, 0);
        assert!((out.resp.row(0)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_densities_fall_back_to_uniform() {
        // Every component density underflows at an astronomically large residual.
        let m = model(&[(2.0, 1e8, 0.5), (2.0, 1e7, 0.5)]);
        let out = e_step(&[1e160], &m).unwrap();
        assert_eq!(out.underflows, 1);
        assert_eq!(out.resp.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn unpenalized_pi_is_average_responsibility() {
        let resp =
            Responsibilities::from_rows(2, vec![0.2, 0.8, 0.6, 0.4, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = update_pi(&resp, &PenaltyConfig::new(0.0), 4).unwrap();
        assert_eq!(up.survivors, vec![0, 1]);
        assert!((up.pi[0] - 0.45).abs() < 1e-14 && (up.pi[1] - 0.55).abs() < 1e-14);
    }

    #[test]
    fn penalized_pi_prunes_weak_component() {
        // N/|Ω| = (0.05, 0.95), λ = 0.1: raw (0, 1.25) -> pruned to K = 1.
        let resp = Responsibilities::from_rows(2, [[0.05, 0.95]; 20].concat()).unwrap();
        let up = update_pi(&resp, &PenaltyConfig::new(0.1), 20).unwrap();
        assert_eq!(up.raw[0], 0.0);
        assert!((up.raw[1] - 1.25).abs() < 1e-12);
        assert_eq!(up.survivors, vec![1]);
        assert_eq!(up.pi, vec![1.0]);
    }

    #[test]
    fn single_component_pi_is_one() {
        let resp = Responsibilities::uniform(7, 1);
        let up = update_pi(&resp, &PenaltyConfig::new(0.3), 7).unwrap();
        assert_eq!(up.pi, vec![1.0]);
    }

    #[test]
    fn oversized_penalty_is_rejected() {
        let resp = Responsibilities::uniform(10, 4);
        assert!(matches!(
            update_pi(&resp, &PenaltyConfig::new(0.5), 10),
            Err(Error::PenaltyTooLarge(_))
        ));
    }

    #[test]
    fn heavy_penalty_drops_the_common_factor() {
        // λ = 0.15, K = 4: 1 - λD̂ < 0, so raw = max{0, N_k/|Ω| - 0.3}.
        let resp = Responsibilities::from_rows(4, vec![0.5, 0.4, 0.05, 0.05, 0.4, 0.5, 0.05, 0.05])
            .unwrap();
        let up = update_pi(&resp, &PenaltyConfig::new(0.15), 2).unwrap();
        assert_eq!(up.survivors, vec![0, 1]);
        assert!((up.raw[0] - 0.15).abs() < 1e-12);
        assert_eq!(up.pi, vec![0.5, 0.5]);
    }

    #[test]
    fn partial_truncation_renormalizes_survivors() {
        // λ = 0.16: raw = ((0.30, 0.36, 0.34) - 0.32) / 0.04 = (0, 1, 0.5).
        let resp = Responsibilities::from_rows(3, [[0.3, 0.36, 0.34]; 10].concat()).unwrap();
        let up = update_pi(&resp, &PenaltyConfig::new(0.16), 10).unwrap();
        assert_eq!(up.survivors, vec![1, 2]);
        assert!((up.pi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((up.pi[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eta_matches_gaussian_and_laplace_mle() {
        let e = [0.5, -1.0, 1.5, -0.25];
        let resp = Responsibilities::uniform(4, 1);
        let ms: f64 = e.iter().map(|x| x * x).sum::<f64>() / 4.0;
        let gauss = update_eta(&resp, &e, &model(&[(2.0, 1.0, 1.0)])).unwrap();
        assert!((gauss.eta[0] - 1.0 / (2.0 * ms)).abs() < 1e-12);
        let mean_abs: f64 = e.iter().map(|x| x.abs()).sum::<f64>() / 4.0;
        let lap = update_eta(&resp, &e, &model(&[(1.0, 1.0, 1.0)])).unwrap();
        assert!((lap.eta[0] - 1.0 / mean_abs).abs() < 1e-12);
    }

    #[test]
    fn eta_on_three_by_three_toy() {
        // Residuals of a 3x3 toy with hand-set responsibilities.
        let e = [0.1, -0.2, 0.3, 1.0, -2.0, 0.05, 0.0, 4.0, -0.5];
        let g1 = [0.9, 0.8, 0.7, 0.1, 0.2, 0.95, 1.0, 0.0, 0.5];
        let rows: Vec<f64> = g1.iter().flat_map(|&g| [g, 1.0 - g]).collect();
        let resp = Responsibilities::from_rows(2, rows).unwrap();
        let m = model(&[(2.0, 1.0, 0.5), (0.5, 1.0, 0.5)]);
        let up = update_eta(&resp, &e, &m).unwrap();
        // Hand evaluation.
        let n1: f64 = g1.iter().sum();
        let s1: f64 = g1.iter().zip(&e).map(|(g, x)| g * x * x).sum();
        let n2: f64 = g1.iter().map(|g| 1.0 - g).sum();
        let s2: f64 = g1
            .iter()
            .zip(&e)
            .map(|(g, x)| (1.0 - g) * x.abs().sqrt())
            .sum();
        assert!((up.eta[0] - n1 / (2.0 * s1)).abs() < 1e-12);
        assert!((up.eta[1] - n2 / (0.5 * s2)).abs() < 1e-12);
        assert_eq!(up.clamped, 0);
    }

    #[test]
    fn eta_clamps_on_zero_residuals() {
        let resp = Responsibilities::uniform(3, 1);
        let up = update_eta(&resp, &[0.0, 0.0, 0.0], &model(&[(2.0, 1.0, 1.0)])).unwrap();
        assert_eq!(up.eta, vec![ETA_MAX]);
        assert_eq!(up.degenerate, 1);
    }

    #[test]
    fn penalty_vanishes_for_empty_component() {
        let pen = PenaltyConfig::new(0.1);
        assert_eq!(pen.value(&[0.0], 20.0), 0.0);
        assert!(pen.value(&[0.5], 20.0) > 0.0);
    }

    #[test]
    fn unpenalized_single_gaussian_objective() {
        let e = [0.3, -0.7, 1.1];
        let m = model(&[(2.0, 0.8, 1.0)]);
        let direct: f64 = e
            .iter()
            .map(|x| -0.5 * (std::f64::consts::PI / 0.8).ln() - 0.8 * x * x)
            .sum();
        let got = penalized_log_likelihood(&e, &m, &PenaltyConfig::new(0.0), 3, 3);
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn model_validation() {
        assert!(MoepModel::new(vec![]).is_err());
        assert!(MoepModel::new(vec![EpComponent {
            p: 1.0,
            eta: 1.0,
            pi: 0.7
        }])
        .is_err());
        assert!(MoepModel::uniform(&[0.5, 1.0, 2.0]).is_ok());
    }
}
