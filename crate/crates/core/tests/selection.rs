use moep_lrmf::bench::{generate_synthetic, Regime, SyntheticSpec};
use moep_lrmf::em::{fit_pmoep, EmConfig};
use moep_lrmf::ep::ep_log_pdf;
use moep_lrmf::select::{bic, bic_score, select_lambda};
use moep_lrmf::{EpComponent, MoepModel, PenaltyConfig};

fn small_config(seed: u64) -> EmConfig {
    EmConfig {
        restarts: 2,
        seed,
        ..EmConfig::default()
    }
}

#[test]
fn single_lambda_grid_is_chosen() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Gaussian, 0)).unwrap();
    let report = select_lambda(&data.observed(), &small_config(0), &[0.05]).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.chosen_lambda(), 0.05);
}

#[test]
fn empty_grid_is_an_error() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Gaussian, 0)).unwrap();
    assert!(select_lambda(&data.observed(), &small_config(0), &[]).is_err());
}

#[test]
fn oversized_lambdas_are_skipped() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Laplace, 1)).unwrap();
    let report = select_lambda(&data.observed(), &small_config(1), &[0.6, 0.1]).unwrap();
    assert!(report.records[0].outcome.is_err());
    assert_eq!(report.chosen_lambda(), 0.1);
    let all_bad = select_lambda(&data.observed(), &small_config(1), &[0.5, 0.7]);
    assert!(all_bad.is_err());
}

#[test]
fn chosen_record_maximizes_bic_and_is_reproducible() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Mixture2, 2)).unwrap();
    let y = data.observed();
    let grid = [0.005, 0.05, 0.15];
    let a = select_lambda(&y, &small_config(2), &grid).unwrap();
    let b = select_lambda(&y, &small_config(2), &grid).unwrap();
    assert_eq!(a.chosen, b.chosen);
    let best = a.chosen_fit().bic;
    for record in &a.records {
        if let Ok(fit) = &record.outcome {
            assert!(fit.bic <= best);
            assert_eq!(fit.bic, bic_score(&fit.result, y.omega_size()));
        }
    }
}

#[test]
fn bic_matches_direct_summation() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Mixture1, 3)).unwrap();
    let y = data.observed();
    let config = EmConfig {
        penalty: PenaltyConfig::new(0.01),
        ..small_config(3)
    };
    let result = fit_pmoep(&y, &config).unwrap();
    let residuals = y.residuals(&result.factors);
    // Compensated sum of log Σ_k π_k f_k(e).
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &e in &residuals {
        let terms: Vec<f64> = result
            .model
            .components()
            .iter()
            .map(|c| c.pi.ln() + ep_log_pdf(e, &c.params()).unwrap())
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        let yk = v - carry;
        let t = sum + yk;
        carry = (t - sum) - yk;
        sum = t;
    }
    let omega = y.omega_size() as f64;
    let expected = sum - result.k_final() as f64 * omega.ln();
    let got = bic_score(&result, y.omega_size());
    assert!(
        (got - expected).abs() <= 1e-9 * expected.abs().max(1.0),
        "{got} vs {expected}"
    );
}

#[test]
fn bic_ignores_component_order() {
    let comps = vec![
        EpComponent {
            p: 0.5,
            eta: 3.0,
            pi: 0.2,
        },
        EpComponent {
            p: 2.0,
            eta: 40.0,
            pi: 0.8,
        },
    ];
    let a = MoepModel::new(comps.clone()).unwrap();
    let b = MoepModel::new(comps.into_iter().rev().collect()).unwrap();
    let residuals = [0.01, -0.2, 0.5, 3.0, -0.03];
    let la = moep_lrmf::mixture::log_likelihood(&residuals, &a);
    let lb = moep_lrmf::mixture::log_likelihood(&residuals, &b);
    assert!((bic(la, 2, 5) - bic(lb, 2, 5)).abs() < 1e-12);
}
