//! Cross-checks of the fitted optimum against optimizer-independent oracles:
//! a profiled grid refinement, a random box search, the expected flatness of
//! the likelihood along the variance-decay ridge, and a distributional screen
//! of the standardized Monte Carlo estimates.

use biou::{
    draw_recursive, fit_mle, neg_log_lik_fast, profile_cross_covariance, replication_rng,
    run_replications, BivariateSample, ExperimentSpec, FitOptions, GridPolicy, ParamBox, Params,
    SamplingGrid, Scenario,
};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn reference_sample() -> BivariateSample {
    let psi0 = Params::new(1.0, 1.5, 0.4, 12.0).unwrap();
    let mut rng = replication_rng(7701, 0);
    let grid = SamplingGrid::uniform_random(300, &mut rng).unwrap();
    draw_recursive(&psi0, &grid, &mut rng)
}

/// Negative log-likelihood at `theta` with the cross covariance profiled out.
fn profiled_nll(theta: f64, sample: &BivariateSample) -> f64 {
    let a = profile_cross_covariance(theta, sample).unwrap();
    let rho = (a[(0, 1)] / (a[(0, 0)] * a[(1, 1)]).sqrt()).clamp(-0.999_999, 0.999_999);
    let params = Params::new(a[(0, 0)], a[(1, 1)], rho, theta).unwrap();
    neg_log_lik_fast(&params, sample).unwrap().total
}

fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|k| (llo + (lhi - llo) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

#[test]
fn fit_matches_profiled_grid_refinement() {
    let sample = reference_sample();
    let fit = fit_mle(&sample, &ParamBox::default(), &FitOptions::default()).unwrap();
    assert!(fit.converged, "reference fit must converge");

    let coarse = log_space(0.1, 100.0, 120);
    let theta_star = coarse
        .iter()
        .copied()
        .min_by(|&a, &b| profiled_nll(a, &sample).total_cmp(&profiled_nll(b, &sample)))
        .unwrap();
    let refined = log_space(theta_star * 0.85, theta_star * 1.15, 400);
    let grid_min = refined
        .iter()
        .map(|&t| profiled_nll(t, &sample))
        .fold(f64::INFINITY, f64::min);

    let gap = (fit.nll_at_min - grid_min).abs();
    assert!(
        gap <= 0.01,
        "fit nll {} vs refined profiled grid minimum {} (gap {gap})",
        fit.nll_at_min,
        grid_min
    );
}

#[test]
fn fit_dominates_random_box_search() {
    let sample = reference_sample();
    let fit = fit_mle(&sample, &ParamBox::default(), &FitOptions::default()).unwrap();

    let mut rng = replication_rng(7702, 0);
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let s1 = rng.random_range(1e-4_f64.ln()..1e4_f64.ln()).exp();
        let s2 = rng.random_range(1e-4_f64.ln()..1e4_f64.ln()).exp();
        let rho = rng.random_range(-0.999..0.999);
        let theta = rng.random_range(0.1_f64.ln()..100.0_f64.ln()).exp();
        let params = Params::new(s1, s2, rho, theta).unwrap();
        if let Ok(terms) = neg_log_lik_fast(&params, &sample) {
            best = best.min(terms.total);
        }
    }
    assert!(
        fit.nll_at_min <= best + 1e-6,
        "fit nll {} must not exceed the best of 1000 random draws {}",
        fit.nll_at_min,
        best
    );
}

#[test]
fn likelihood_is_flat_along_the_microergodic_ridge() {
    let sample = reference_sample();
    let fit = fit_mle(&sample, &ParamBox::default(), &FitOptions::default()).unwrap();
    let p = &fit.psi_hat;

    let mut ridge_max = 0.0_f64;
    let mut across_min = f64::INFINITY;
    for c in [0.9, 1.1] {
        let ridge = Params::new(
            c * p.sigma1_sq(),
            c * p.sigma2_sq(),
            p.rho(),
            p.theta() / c,
        )
        .unwrap();
        let across =
            Params::new(c * p.sigma1_sq(), c * p.sigma2_sq(), p.rho(), p.theta()).unwrap();
        let nll_ridge = neg_log_lik_fast(&ridge, &sample).unwrap().total - fit.nll_at_min;
        let nll_across = neg_log_lik_fast(&across, &sample).unwrap().total - fit.nll_at_min;
        ridge_max = ridge_max.max(nll_ridge);
        across_min = across_min.min(nll_across);
    }
    assert!(
        ridge_max >= 0.0 && across_min > 0.0,
        "the fitted point must be a minimum (ridge {ridge_max}, across {across_min})"
    );
    assert!(
        ridge_max <= 0.05 * across_min,
        "scaling the variances with the rate held fixed must cost far more than \
         moving along the ridge: ridge {ridge_max} vs across {across_min}"
    );
}

/// Anderson-Darling statistic against the standard normal.
fn anderson_darling(values: &[f64]) -> f64 {
    let norm = Normal::new(0.0, 1.0).unwrap();
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let m = x.len();
    let mut a2 = -(m as f64);
    for (i, &v) in x.iter().enumerate() {
        let phi = norm.cdf(v).clamp(1e-300, 1.0 - 1e-16);
        let phi_rev = norm.cdf(x[m - 1 - i]).clamp(1e-300, 1.0 - 1e-16);
        a2 -= (2.0 * (i + 1) as f64 - 1.0) / m as f64 * (phi.ln() + (1.0 - phi_rev).ln());
    }
    a2
}

#[test]
fn standardized_estimates_pass_a_normality_screen() {
    let spec = ExperimentSpec {
        psi0: Params::new(1.0, 1.0, 0.0, 15.0).unwrap(),
        n: 1000,
        m: 400,
        scenario: Scenario::ThetaRho,
        master_seed: 61,
        grid_policy: GridPolicy::Redraw,
        quantile_probs: vec![0.05, 0.25, 0.5, 0.75, 0.95],
    };
    let batch = run_replications(&spec, 0..spec.m).unwrap();
    for idx in 0..2 {
        let a2 = anderson_darling(batch.standardized(idx));
        assert!(
            a2 < 6.0,
            "statistic {idx} fails the 0.1% Anderson-Darling screen: A2 = {a2}"
        );
    }
}
