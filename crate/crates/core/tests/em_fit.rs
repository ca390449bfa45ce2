use moep_lrmf::bench::{evaluate, generate_synthetic, Regime, SyntheticSpec};
use moep_lrmf::em::{fit_pmoep, objective_monotone_check, EmConfig, FactorSolver};
use moep_lrmf::{Error, ObservedMatrix, PenaltyConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn single_gaussian(rank: usize, seed: u64) -> EmConfig {
    EmConfig {
        rank,
        p_candidates: vec![2.0],
        penalty: PenaltyConfig::new(0.0),
        seed,
        ..EmConfig::default()
    }
}

#[test]
fn exact_low_rank_is_reconstructed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = randn(30, 3, &mut rng) * randn(3, 12, &mut rng);
    let obs = ObservedMatrix::fully_observed(y.clone()).unwrap();
    let result = fit_pmoep(&obs, &single_gaussian(3, 2)).unwrap();
    let rel = (&y - result.factors.product()).norm() / y.norm();
    assert!(rel <= 1e-6, "relative error {rel}");
    assert_eq!(result.k_final(), 1);
}

#[test]
fn single_gaussian_fixed_point_is_the_truncated_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = randn(25, 3, &mut rng) * randn(3, 10, &mut rng) + randn(25, 10, &mut rng) * 0.1;
    let obs = ObservedMatrix::fully_observed(y.clone()).unwrap();
    let result = fit_pmoep(&obs, &single_gaussian(3, 0)).unwrap();
    let svd = y.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut best = DMatrix::zeros(25, 10);
    for &k in &order[..3] {
        best += u.column(k) * vt.row(k) * svd.singular_values[k];
    }
    let rel = (&best - result.factors.product()).norm() / best.norm();
    assert!(rel <= 1e-6, "relative difference {rel}");
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Mixture2, 4)).unwrap();
    let y = data.observed();
    let config = EmConfig {
        penalty: PenaltyConfig::new(0.005),
        restarts: 2,
        seed: 9,
        ..EmConfig::default()
    };
    let a = fit_pmoep(&y, &config).unwrap();
    let b = fit_pmoep(&y, &config).unwrap();
    assert_eq!(a.objective_trace, b.objective_trace);
    assert_eq!(a.factors, b.factors);
    assert_eq!(a.model, b.model);
}

#[test]
fn components_never_come_back() {
    for (regime, seed) in [
        (Regime::Mixture1, 0),
        (Regime::Laplace, 1),
        (Regime::Sparse, 2),
    ] {
        let data = generate_synthetic(&SyntheticSpec::new(regime, seed)).unwrap();
        let config = EmConfig {
            penalty: PenaltyConfig::new(0.01),
            restarts: 2,
            seed,
            ..EmConfig::default()
        };
        let result = fit_pmoep(&data.observed(), &config).unwrap();
        assert!(
            result.k_trace.windows(2).all(|w| w[1] <= w[0]),
            "{}: {:?}",
            regime.name(),
            result.k_trace
        );
        assert_eq!(*result.k_trace.last().unwrap(), result.k_final());
        assert!(result.objective_trace.iter().all(|v| v.is_finite()));
        let check = objective_monotone_check(&result.objective_trace);
        assert!(
            check.monotone,
            "{}: dip at {:?}",
            regime.name(),
            check.first_violation
        );
    }
}

#[test]
fn every_solver_keeps_the_objective_monotone() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Mixture1, 3)).unwrap();
    for solver in [
        FactorSolver::Auto,
        FactorSolver::Alm,
        FactorSolver::Reweighted,
    ] {
        let mut config = EmConfig {
            penalty: PenaltyConfig::new(0.01),
            restarts: 1,
            seed: 3,
            solver,
            ..EmConfig::default()
        };
        config.max_outer = 15;
        let result = fit_pmoep(&data.observed(), &config).unwrap();
        let check = objective_monotone_check(&result.objective_trace);
        assert!(
            check.monotone,
            "{solver:?}: dip at {:?}",
            check.first_violation
        );
    }
}

#[test]
fn sparse_noise_subspace_is_recovered() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Sparse, 0)).unwrap();
    let config = EmConfig {
        penalty: PenaltyConfig::new(0.005),
        restarts: 20,
        seed: 0,
        ..EmConfig::default()
    };
    let result = fit_pmoep(&data.observed(), &config).unwrap();
    let m = evaluate(&result.factors, &data).unwrap();
    assert!(m.c5 <= 1e-3, "C5 = {}", m.c5);
}

#[test]
fn too_few_observed_entries_are_rejected() {
    let mut mask = DMatrix::from_element(6, 5, false);
    for j in 0..5 {
        mask[(0, j)] = true;
    }
    let y = ObservedMatrix::new(DMatrix::zeros(6, 5), mask).unwrap();
    let err = fit_pmoep(&y, &single_gaussian(2, 0)).unwrap_err();
    assert!(matches!(err, Error::TooFewObserved { .. }), "{err}");
}

#[test]
fn invalid_configs_fail_before_fitting() {
    let y = ObservedMatrix::fully_observed(DMatrix::from_element(4, 4, 1.0)).unwrap();
    let bad = [
        EmConfig {
            p_candidates: vec![],
            ..EmConfig::default()
        },
        EmConfig {
            p_candidates: vec![0.0, 2.0],
            ..EmConfig::default()
        },
        EmConfig {
            restarts: 0,
            ..EmConfig::default()
        },
        EmConfig {
            solver: FactorSolver::WeightedL2,
            ..EmConfig::default()
        },
    ];
    for config in bad {
        assert!(matches!(
            fit_pmoep(&y, &EmConfig { rank: 1, ..config }),
            Err(Error::InvalidParameter(_))
        ));
    }
}

#[test]
fn svd_start_is_used_by_the_first_restart() {
    let data = generate_synthetic(&SyntheticSpec::new(Regime::Gaussian, 6)).unwrap();
    let y = data.observed();
    let config = EmConfig {
        penalty: PenaltyConfig::new(0.15),
        restarts: 1,
        svd_start: true,
        ..EmConfig::default()
    };
    let a = fit_pmoep(&y, &config).unwrap();
    let b = fit_pmoep(
        &y,
        &EmConfig {
            svd_start: false,
            ..config
        },
    )
    .unwrap();
    assert_ne!(a.objective_trace[0], b.objective_trace[0]);
}
