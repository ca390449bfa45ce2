//! Choice of the penalty weight λ by a modified BIC.

use crate::data::ObservedMatrix;
use crate::em::{fit_pmoep, EmConfig, EmResult};
use crate::error::{Error, Result};
use crate::mixture::{MoepModel, PARAMS_PER_COMPONENT};

/// `Σ_Ω log Σ_k π_k f_k(e_ij) − ½ (Σ_k D_k) log |Ω|` with `D_k = 2`.
pub fn bic(log_likelihood: f64, k: usize, omega_size: usize) -> f64 {
    log_likelihood - 0.5 * PARAMS_PER_COMPONENT * k as f64 * (omega_size as f64).ln()
}

/// [`bic`] at the fitted parameters of `result`.
pub fn bic_score(result: &EmResult, omega_size: usize) -> f64 {
    bic(result.log_likelihood, result.k_final(), omega_size)
}

/// Outcome of one grid point.
#[derive(Debug, Clone)]
pub struct LambdaRecord {
    pub lambda: f64,
    /// The fit, or the reason it failed.
    pub outcome: std::result::Result<LambdaFit, String>,
}

#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub k_hat: usize,
    pub bic: f64,
    pub model: MoepModel,
    pub result: EmResult,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub records: Vec<LambdaRecord>,
    /// Index into `records` of the chosen λ.
    pub chosen: usize,
}

impl SelectionReport {
    pub fn chosen_lambda(&self) -> f64 {
        self.records[self.chosen].lambda
    }

    pub fn chosen_fit(&self) -> &LambdaFit {
        self.records[self.chosen]
            .outcome
            .as_ref()
            .expect("the chosen record completed")
    }
}

/// Fits every λ of `grid` with the restart seeds of `base` and keeps the one
/// with the highest BIC. Ties go to the larger λ. Grid points whose fit fails
/// (for instance because `2Kλ ≥ 1`) are recorded and skipped.
pub fn select_lambda(y: &ObservedMatrix, base: &EmConfig, grid: &[f64]) -> Result<SelectionReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("the λ grid is empty".into()));
    }
    let omega = y.omega_size();
    let mut records = Vec::with_capacity(grid.len());
    let mut chosen: Option<(usize, f64, f64)> = None;
    for &lambda in grid {
        let mut config = base.clone();
        config.penalty.lambda = lambda;
        let outcome = match fit_pmoep(y, &config) {
            Ok(result) => {
                let score = bic_score(&result, omega);
                let better = match chosen {
                    None => true,
                    Some((_, best, best_lambda)) => {
                        score > best || (score == best && lambda > best_lambda)
                    }
                };
                if better && score.is_finite() {
                    chosen = Some((records.len(), score, lambda));
                }
                Ok(LambdaFit {
                    k_hat: result.k_final(),
                    bic: score,
                    model: result.model.clone(),
                    result,
                })
            }
            Err(err) => Err(err.to_string()),
        };
        records.push(LambdaRecord { lambda, outcome });
    }
    match chosen {
        Some((chosen, _, _)) => Ok(SelectionReport { records, chosen }),
        None => {
            let reasons: Vec<String> = records
                .iter()
                .filter_map(|r| {
                    r.outcome
                        .as_ref()
                        .err()
                        .map(|e| format!("λ={}: {e}", r.lambda))
                })
                .collect();
            Err(Error::AllCandidatesFailed(grid.len(), reasons.join("; ")))
        }
    }
}
