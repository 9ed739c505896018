//! Exact negative log-likelihood of a sample, twice.
//!
//! [`neg_log_lik_fast`] exploits the Markov structure of the exponential
//! correlation in one O(n) pass. [`neg_log_lik_dense`] factorizes the full
//! `2n x 2n` covariance and exists as an independent reference: the two
//! implementations share no intermediate quantities, so agreement between
//! them is a meaningful check. Both return `-2 log density`, split into its
//! log-determinant, quadratic-form, and constant parts.

use nalgebra::{DVector, Matrix2};

use crate::error::{Error, Result};
use crate::model::{dense_covariance, BivariateSample, Params};

/// Largest grid size the dense path will factorize.
pub const DENSE_MAX_N: usize = 4096;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `-2 log density` split into parts; `total = log_det + quad_form + constant`.
#[derive(Debug, Clone, Copy)]
pub struct LikelihoodTerms {
    /// Log-determinant of the `2n x 2n` covariance.
    pub log_det: f64,
    /// Mahalanobis quadratic form of the stacked data vector.
    pub quad_form: f64,
    /// `2 n log(2 pi)`.
    pub constant: f64,
    pub total: f64,
}

impl LikelihoodTerms {
    fn assemble(log_det: f64, quad_form: f64, n: usize) -> Result<Self> {
        let constant = 2.0 * n as f64 * LN_2PI;
        let total = log_det + quad_form + constant;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "likelihood not finite: log_det={log_det}, quad_form={quad_form}"
            )));
        }
        Ok(Self {
            log_det,
            quad_form,
            constant,
            total,
        })
    }
}

/// Walks the innovation decomposition of the sample for a given `theta`:
/// calls `visit(r1, r2, u)` with the one-step prediction residuals of both
/// components and the residual weight `u`. The first call carries the raw
/// first observations with `u = 1`.
fn for_each_innovation<F>(theta: f64, sample: &BivariateSample, mut visit: F) -> Result<()>
where
    F: FnMut(f64, f64, f64),
{
    let z1 = sample.z1();
    let z2 = sample.z2();
    visit(z1[0], z2[0], 1.0);
    for (k, &d) in sample.grid().deltas().iter().enumerate() {
        let e = (-theta * d).exp();
        let u = -(-2.0 * theta * d).exp_m1();
        if u <= 0.0 || !u.is_finite() {
            return Err(Error::Numeric(format!(
                "residual weight underflowed (theta={theta}, delta={d:e})"
            )));
        }
        visit(z1[k + 1] - e * z1[k], z2[k + 1] - e * z2[k], u);
    }
    Ok(())
}

/// O(n) negative log-likelihood via the innovation decomposition.
pub fn neg_log_lik_fast(params: &Params, sample: &BivariateSample) -> Result<LikelihoodTerms> {
    let n = sample.n();
    let (sigma1, sigma2, rho) = (params.sigma1(), params.sigma2(), params.rho());
    let one_minus_rho_sq = 1.0 - rho * rho;

    let mut quad = 0.0;
    let mut log_u_sum = 0.0;
    for_each_innovation(params.theta(), sample, |r1, r2, u| {
        // Per-step quadratic form written as a sum of two squares, so the
        // accumulated value stays nonnegative even at rho close to +-1.
        let x = r1 / sigma1;
        let y = r2 / sigma2;
        let t = x - rho * y;
        quad += (t * t / one_minus_rho_sq + y * y) / u;
        if u != 1.0 {
            log_u_sum += u.ln();
        }
    })?;
    // u == 1.0 exactly only for the first-observation term, whose log weight
    // is zero either way; skipping it keeps log_u_sum an (n-1)-term sum.

    let log_det = n as f64 * (params.sigma1_sq() * params.sigma2_sq() * one_minus_rho_sq).ln()
        + 2.0 * log_u_sum;
    LikelihoodTerms::assemble(log_det, quad, n)
}

/// Negative log-likelihood through a Cholesky factorization of the full
/// covariance. Quadratic in memory and cubic in time; refuses grids larger
/// than [`DENSE_MAX_N`].
pub fn neg_log_lik_dense(params: &Params, sample: &BivariateSample) -> Result<LikelihoodTerms> {
    let n = sample.n();
    if n > DENSE_MAX_N {
        return Err(Error::Domain(format!(
            "dense path supports up to {DENSE_MAX_N} points, got {n}"
        )));
    }
    let cov = dense_covariance(params, sample.grid());
    let chol = cov.cholesky().ok_or_else(|| {
        Error::Numeric(format!(
            "dense covariance is not positive definite for {params:?}"
        ))
    })?;

    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let z = DVector::from_iterator(
        2 * n,
        sample.z1().iter().copied().chain(sample.z2().iter().copied()),
    );
    let w = chol
        .l_dirty()
        .solve_lower_triangular(&z)
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    LikelihoodTerms::assemble(log_det, w.norm_squared(), n)
}

/// Analytic gradient of the fast negative log-likelihood in the parameter
/// order `(sigma1_sq, sigma2_sq, rho, theta)`.
pub fn neg_log_lik_gradient(params: &Params, sample: &BivariateSample) -> Result<[f64; 4]> {
    let n = sample.n() as f64;
    let z1 = sample.z1();
    let z2 = sample.z2();
    let (s1sq, s2sq, rho, theta) = (
        params.sigma1_sq(),
        params.sigma2_sq(),
        params.rho(),
        params.theta(),
    );
    let (sigma1, sigma2) = (params.sigma1(), params.sigma2());
    let omr = 1.0 - rho * rho;

    // Weighted residual sums and their theta derivatives, accumulated in a
    // single pass. s_k = sum r_k^2/u, c = sum r_1 r_2/u.
    let mut s1 = z1[0] * z1[0];
    let mut s2 = z2[0] * z2[0];
    let mut c = z1[0] * z2[0];
    let mut ds1 = 0.0;
    let mut ds2 = 0.0;
    let mut dc = 0.0;
    let mut dlog = 0.0;
    for (k, &d) in sample.grid().deltas().iter().enumerate() {
        let e = (-theta * d).exp();
        let u = -(-2.0 * theta * d).exp_m1();
        if u <= 0.0 || !u.is_finite() {
            return Err(Error::Numeric(format!(
                "residual weight underflowed (theta={theta}, delta={d:e})"
            )));
        }
        let r1 = z1[k + 1] - e * z1[k];
        let r2 = z2[k + 1] - e * z2[k];
        s1 += r1 * r1 / u;
        s2 += r2 * r2 / u;
        c += r1 * r2 / u;

        let de = d * e; // -d(e)/d(theta)
        let du = 2.0 * d * e * e; // d(u)/d(theta)
        ds1 += (2.0 * r1 * de * z1[k] - r1 * r1 * du / u) / u;
        ds2 += (2.0 * r2 * de * z2[k] - r2 * r2 * du / u) / u;
        dc += (de * (z1[k] * r2 + r1 * z2[k]) - r1 * r2 * du / u) / u;
        dlog += 2.0 * du / u;
    }

    let q = s1 / s1sq + s2 / s2sq - 2.0 * rho * c / (sigma1 * sigma2);
    let g_s1 = n / s1sq + (-s1 / (s1sq * s1sq) + rho * c / (s1sq * sigma1 * sigma2)) / omr;
    let g_s2 = n / s2sq + (-s2 / (s2sq * s2sq) + rho * c / (s2sq * sigma1 * sigma2)) / omr;
    let g_rho =
        -2.0 * n * rho / omr + 2.0 * rho * q / (omr * omr) - 2.0 * c / (sigma1 * sigma2 * omr);
    let g_theta =
        dlog + (ds1 / s1sq + ds2 / s2sq - 2.0 * rho * dc / (sigma1 * sigma2)) / omr;

    let grad = [g_s1, g_s2, g_rho, g_theta];
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient not finite".into()));
    }
    Ok(grad)
}

/// Cross-covariance estimate that maximizes the likelihood over
/// `(sigma1_sq, sigma2_sq, rho)` at a fixed `theta`:
/// `A_hat[k][l] = (1/n) Z_k' R^{-1} Z_l`, evaluated in O(n) through the
/// innovation decomposition. Needs `n >= 2`.
///
/// The matrix is returned as computed. With degenerate data (for example
/// `z1 == z2`) it is singular and the implied correlation sits at the
/// boundary; callers that need a valid `rho` must clip it.
pub fn profile_cross_covariance(theta: f64, sample: &BivariateSample) -> Result<Matrix2<f64>> {
    if sample.n() < 2 {
        return Err(Error::Domain(format!(
            "profiling needs at least 2 points, got {}",
            sample.n()
        )));
    }
    if !theta.is_finite() || theta <= 0.0 {
        return Err(Error::Domain(format!(
            "theta must be finite and positive, got {theta}"
        )));
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut c = 0.0;
    for_each_innovation(theta, sample, |r1, r2, u| {
        s1 += r1 * r1 / u;
        s2 += r2 * r2 / u;
        c += r1 * r2 / u;
    })?;
    let n = sample.n() as f64;
    if s1 <= 0.0 || s2 <= 0.0 {
        return Err(Error::Estimation(
            "degenerate sample: a component has zero weighted variation".into(),
        ));
    }
    Ok(Matrix2::new(s1 / n, c / n, c / n, s2 / n))
}
