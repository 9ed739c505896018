//! Closed-form asymptotic theory: the symmetrized entropy between two
//! parameterizations, the equivalence/orthogonality classifier, the limiting
//! covariance matrices of the estimable combinations, and the standardized
//! innovation diagnostics that drive them.

use nalgebra::{DMatrix, Matrix3};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimate::FitResult;
use crate::likelihood::DENSE_MAX_N;
use crate::model::{dense_covariance, BivariateSample, Params, SamplingGrid};

/// Default relative tolerance of [`classify_equivalence`]. The condition is
/// algebraic, so the slack only absorbs float noise.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// Which parameters a fit left free, and therefore which standardized
/// coordinates a table row reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Variances and correlation pinned at truth; only the decay rate free.
    ThetaOnly,
    /// Variances pinned at truth; decay rate and correlation free.
    ThetaRho,
    /// All four parameters free.
    Full,
}

impl Scenario {
    /// Names of the standardized coordinates, in output order.
    pub fn labels(&self) -> &'static [&'static str] {
        match self {
            Scenario::ThetaOnly => &["theta"],
            Scenario::ThetaRho => &["theta", "rho"],
            Scenario::Full => &["sigma1_sq_theta", "sigma2_sq_theta", "rho"],
        }
    }

    pub fn dim(&self) -> usize {
        self.labels().len()
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta_only" | "theta-only" => Ok(Scenario::ThetaOnly),
            "theta_rho" | "theta-rho" => Ok(Scenario::ThetaRho),
            "full" => Ok(Scenario::Full),
            other => Err(Error::Domain(format!(
                "unknown scenario {other:?}, expected theta_only, theta_rho, or full"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Equivalent,
    Orthogonal,
}

/// How the entropy gets evaluated. The closed form is the production path;
/// the dense path exists as an independent cross-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyMethod {
    ClosedForm,
    Dense,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyReport {
    /// Symmetrized Kullback-Leibler divergence between the two measures
    /// restricted to the grid.
    pub i_n: f64,
    pub n: usize,
    pub classification: Classification,
    /// Absolute residuals of the equivalence conditions:
    /// `|sigma1_sq_1*theta_1 - sigma1_sq_2*theta_2|`, the same for the second
    /// component, and `|rho_1 - rho_2|`.
    pub condition_residuals: [f64; 3],
}

/// Absolute residuals of the three equivalence conditions.
pub fn condition_residuals(psi1: &Params, psi2: &Params) -> [f64; 3] {
    [
        (psi1.sigma1_sq() * psi1.theta() - psi2.sigma1_sq() * psi2.theta()).abs(),
        (psi1.sigma2_sq() * psi1.theta() - psi2.sigma2_sq() * psi2.theta()).abs(),
        (psi1.rho() - psi2.rho()).abs(),
    ]
}

/// Decides whether the two parameter points induce equivalent Gaussian
/// measures: both variance-decay products and the correlation must agree to
/// `tol` relative.
pub fn classify_equivalence(psi1: &Params, psi2: &Params, tol: f64) -> Classification {
    let r = condition_residuals(psi1, psi2);
    let scales = [
        (psi1.sigma1_sq() * psi1.theta())
            .abs()
            .max((psi2.sigma1_sq() * psi2.theta()).abs())
            .max(1.0),
        (psi1.sigma2_sq() * psi1.theta())
            .abs()
            .max((psi2.sigma2_sq() * psi2.theta()).abs())
            .max(1.0),
        psi1.rho().abs().max(psi2.rho().abs()).max(1.0),
    ];
    if r.iter().zip(scales).all(|(res, s)| *res <= tol * s) {
        Classification::Equivalent
    } else {
        Classification::Orthogonal
    }
}

/// `tr(R_j R_k^{-1})` for two decay rates on a common grid, expanded through
/// the tridiagonal inverse of the correlation matrix of a Markov process.
fn tr_corr_ratio(theta_j: f64, theta_k: f64, deltas: &[f64]) -> f64 {
    let mut acc = 1.0;
    for &d in deltas {
        let ej = (-theta_j * d).exp();
        let ek = (-theta_k * d).exp();
        let uj = -(-2.0 * theta_j * d).exp_m1();
        let uk = -(-2.0 * theta_k * d).exp_m1();
        acc += ((ek - ej) * (ek - ej) + uj) / uk;
    }
    acc
}

/// Symmetrized entropy via the O(n) closed form; see
/// [`symmetrized_entropy_with`] for the dense variant.
pub fn symmetrized_entropy(
    psi1: &Params,
    psi2: &Params,
    grid: &SamplingGrid,
) -> Result<EntropyReport> {
    symmetrized_entropy_with(psi1, psi2, grid, EntropyMethod::ClosedForm)
}

pub fn symmetrized_entropy_with(
    psi1: &Params,
    psi2: &Params,
    grid: &SamplingGrid,
    method: EntropyMethod,
) -> Result<EntropyReport> {
    let n = grid.n();
    if n < 2 {
        return Err(Error::Domain(format!(
            "entropy needs at least 2 grid points, got {n}"
        )));
    }
    let raw = match method {
        EntropyMethod::ClosedForm => {
            let a1 = psi1.cross_covariance();
            let a2 = psi2.cross_covariance();
            let a2_inv_a1 = a2
                .try_inverse()
                .ok_or_else(|| Error::Numeric("cross-covariance not invertible".into()))?
                * a1;
            let a1_inv_a2 = a1
                .try_inverse()
                .ok_or_else(|| Error::Numeric("cross-covariance not invertible".into()))?
                * a2;
            let d = grid.deltas();
            0.5 * (a2_inv_a1.trace() * tr_corr_ratio(psi1.theta(), psi2.theta(), d)
                + a1_inv_a2.trace() * tr_corr_ratio(psi2.theta(), psi1.theta(), d))
                - 2.0 * n as f64
        }
        EntropyMethod::Dense => {
            if n > DENSE_MAX_N {
                return Err(Error::Domain(format!(
                    "dense entropy supports up to {DENSE_MAX_N} points, got {n}"
                )));
            }
            let s1 = dense_covariance(psi1, grid);
            let s2 = dense_covariance(psi2, grid);
            let kl = |sa: &DMatrix<f64>, sb: &DMatrix<f64>| -> Result<f64> {
                let cha = sa
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("covariance not positive definite".into()))?;
                let chb = sb
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Numeric("covariance not positive definite".into()))?;
                let logdet_a: f64 = cha.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
                let logdet_b: f64 = chb.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
                let trace = chb.solve(sa).trace();
                Ok(0.5 * (trace - 2.0 * n as f64) + logdet_b - logdet_a)
            };
            kl(&s1, &s2)? + kl(&s2, &s1)?
        }
    };
    if !raw.is_finite() {
        return Err(Error::Numeric(format!(
            "entropy evaluated to a non-finite value ({raw})"
        )));
    }
    Ok(EntropyReport {
        i_n: raw.max(0.0),
        n,
        classification: classify_equivalence(psi1, psi2, EQUIVALENCE_TOL),
        condition_residuals: condition_residuals(psi1, psi2),
    })
}

/// Limiting covariance of the standardized estimates under a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymCov {
    pub scenario: Scenario,
    pub labels: Vec<&'static str>,
    pub matrix: DMatrix<f64>,
}

impl Serialize for AsymCov {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..self.matrix.nrows())
            .map(|i| (0..self.matrix.ncols()).map(|j| self.matrix[(i, j)]).collect())
            .collect();
        let mut st = serializer.serialize_struct("AsymCov", 3)?;
        st.serialize_field("scenario", &self.scenario)?;
        st.serialize_field("labels", &self.labels)?;
        st.serialize_field("matrix", &rows)?;
        st.end()
    }
}

/// Covariance matrix of the limit law for the scenario's free combinations.
pub fn asym_cov(scenario: Scenario, psi0: &Params) -> AsymCov {
    let t = psi0.theta();
    let r = psi0.rho();
    let s1sq = psi0.sigma1_sq();
    let s2sq = psi0.sigma2_sq();
    let one_m_r2 = 1.0 - r * r;
    let matrix = match scenario {
        Scenario::ThetaOnly => DMatrix::from_row_slice(1, 1, &[t * t]),
        Scenario::ThetaRho => DMatrix::from_row_slice(
            2,
            2,
            &[
                t * t * (1.0 + r * r),
                t * r * one_m_r2,
                t * r * one_m_r2,
                one_m_r2 * one_m_r2,
            ],
        ),
        Scenario::Full => {
            let cross = 2.0 * (t * r * psi0.sigma1() * psi0.sigma2()).powi(2);
            let c13 = t * r * s1sq * one_m_r2;
            let c23 = t * r * s2sq * one_m_r2;
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    2.0 * (t * s1sq) * (t * s1sq),
                    cross,
                    c13,
                    cross,
                    2.0 * (t * s2sq) * (t * s2sq),
                    c23,
                    c13,
                    c23,
                    one_m_r2 * one_m_r2,
                ],
            )
        }
    };
    AsymCov {
        scenario,
        labels: scenario.labels().to_vec(),
        matrix,
    }
}

/// Covariance of the innovation moment vector `(xi_1, xi_2, xi_3)` driving
/// the central limit theorem behind [`asym_cov`].
pub fn xi_covariance(rho0: f64) -> Result<Matrix3<f64>> {
    if !rho0.is_finite() || rho0.abs() >= 1.0 {
        return Err(Error::Domain(format!(
            "correlation must lie in (-1, 1), got {rho0}"
        )));
    }
    let c = (1.0 + rho0 * rho0).sqrt();
    let off = 2.0 * rho0 / c;
    Ok(Matrix3::new(
        2.0,
        2.0 * rho0 * rho0,
        off,
        2.0 * rho0 * rho0,
        2.0,
        off,
        off,
        off,
        1.0,
    ))
}

/// Sample moments of the diagnostic sequences.
#[derive(Debug, Clone, Copy)]
pub struct SampleMoments {
    pub mean_y: f64,
    pub var_y: f64,
    pub mean_xi: [f64; 3],
    /// Sample covariance of `(xi_1, xi_2, xi_3)`; compare to [`xi_covariance`].
    pub cov_xi: Matrix3<f64>,
}

/// Standardized innovations and the product statistics built from them.
#[derive(Debug, Clone)]
pub struct DiagnosticStats {
    pub w1_values: Vec<f64>,
    pub w2_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub xi_values: [Vec<f64>; 3],
    pub sample_moments: SampleMoments,
}

/// Builds the standardized one-step innovations under the true parameters
/// and the moment statistics whose limits the covariance formulas encode:
/// `W_k` has mean 0 and variance 1, the product statistic `Y` has mean
/// `rho0/sqrt(1+rho0^2)` and variance 1, and `xi = (W_1^2-1, W_2^2-1,
/// Y - E[Y])` has covariance [`xi_covariance`].
pub fn compute_diagnostics(sample: &BivariateSample, psi0: &Params) -> Result<DiagnosticStats> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Domain(format!(
            "diagnostics need at least 2 points, got {n}"
        )));
    }
    let m = n - 1;
    let (sigma1, sigma2, rho0, theta) = (psi0.sigma1(), psi0.sigma2(), psi0.rho(), psi0.theta());
    let c = (1.0 + rho0 * rho0).sqrt();
    let y_mean_limit = rho0 / c;

    let z1 = sample.z1();
    let z2 = sample.z2();
    let mut w1 = Vec::with_capacity(m);
    let mut w2 = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for (k, &d) in sample.grid().deltas().iter().enumerate() {
        let e = (-theta * d).exp();
        let u = -(-2.0 * theta * d).exp_m1();
        if u <= 0.0 || !u.is_finite() {
            return Err(Error::Numeric(format!(
                "innovation weight underflowed (theta={theta}, delta={d:e})"
            )));
        }
        let root_u = u.sqrt();
        let a = (z1[k + 1] - e * z1[k]) / (sigma1 * root_u);
        let b = (z2[k + 1] - e * z2[k]) / (sigma2 * root_u);
        w1.push(a);
        w2.push(b);
        y.push(a * b / c);
    }
    let xi1: Vec<f64> = w1.iter().map(|v| v * v - 1.0).collect();
    let xi2: Vec<f64> = w2.iter().map(|v| v * v - 1.0).collect();
    let xi3: Vec<f64> = y.iter().map(|v| v - y_mean_limit).collect();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_y = mean(&y);
    let var_y = if m > 1 {
        y.iter().map(|v| (v - mean_y) * (v - mean_y)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let mean_xi = [mean(&xi1), mean(&xi2), mean(&xi3)];
    let xis = [&xi1, &xi2, &xi3];
    let mut cov_xi = Matrix3::zeros();
    if m > 1 {
        for i in 0..3 {
            for j in 0..3 {
                cov_xi[(i, j)] = xis[i]
                    .iter()
                    .zip(xis[j])
                    .map(|(a, b)| (a - mean_xi[i]) * (b - mean_xi[j]))
                    .sum::<f64>()
                    / (m - 1) as f64;
            }
        }
    }
    Ok(DiagnosticStats {
        w1_values: w1,
        w2_values: w2,
        y_values: y,
        xi_values: [xi1, xi2, xi3],
        sample_moments: SampleMoments {
            mean_y,
            var_y,
            mean_xi,
            cov_xi,
        },
    })
}

fn expect_pin(actual: bool, expected: bool, name: &str, scenario: Scenario) -> Result<()> {
    if actual != expected {
        let verb = if expected { "pinned" } else { "free" };
        return Err(Error::Domain(format!(
            "scenario {scenario:?} expects {name} to be {verb} in the fit"
        )));
    }
    Ok(())
}

/// Centers and scales the scenario's estimable combinations by their limit
/// law, so each coordinate is approximately standard normal under the truth.
/// The fit's pin pattern must match the scenario.
pub fn standardize(
    fit: &FitResult,
    psi0: &Params,
    scenario: Scenario,
    n: usize,
) -> Result<Vec<f64>> {
    use crate::estimate::BoundState;
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let pinned = |s: BoundState| s == BoundState::Pinned;
    let b = &fit.boundary;
    match scenario {
        Scenario::ThetaOnly => {
            expect_pin(pinned(b.sigma1_sq), true, "sigma1_sq", scenario)?;
            expect_pin(pinned(b.sigma2_sq), true, "sigma2_sq", scenario)?;
            expect_pin(pinned(b.rho), true, "rho", scenario)?;
            expect_pin(pinned(b.theta), false, "theta", scenario)?;
        }
        Scenario::ThetaRho => {
            expect_pin(pinned(b.sigma1_sq), true, "sigma1_sq", scenario)?;
            expect_pin(pinned(b.sigma2_sq), true, "sigma2_sq", scenario)?;
            expect_pin(pinned(b.rho), false, "rho", scenario)?;
            expect_pin(pinned(b.theta), false, "theta", scenario)?;
        }
        Scenario::Full => {
            expect_pin(pinned(b.sigma1_sq), false, "sigma1_sq", scenario)?;
            expect_pin(pinned(b.sigma2_sq), false, "sigma2_sq", scenario)?;
            expect_pin(pinned(b.rho), false, "rho", scenario)?;
            expect_pin(pinned(b.theta), false, "theta", scenario)?;
        }
    }
    let estimates = match scenario {
        Scenario::ThetaOnly => vec![fit.psi_hat.theta()],
        Scenario::ThetaRho => vec![fit.psi_hat.theta(), fit.psi_hat.rho()],
        Scenario::Full => vec![
            fit.microergodic.sigma1_sq_theta,
            fit.microergodic.sigma2_sq_theta,
            fit.microergodic.rho,
        ],
    };
    let targets = match scenario {
        Scenario::ThetaOnly => vec![psi0.theta()],
        Scenario::ThetaRho => vec![psi0.theta(), psi0.rho()],
        Scenario::Full => vec![
            psi0.sigma1_sq() * psi0.theta(),
            psi0.sigma2_sq() * psi0.theta(),
            psi0.rho(),
        ],
    };
    let cov = asym_cov(scenario, psi0);
    let root_n = (n as f64).sqrt();
    Ok(estimates
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(j, (est, tgt))| root_n * (est - tgt) / cov.matrix[(j, j)].sqrt())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::{fit_mle, Coord, FitOptions, ParamBox};
    use crate::simulate::{draw_recursive, replication_rng};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn equiv_pair() -> (Params, Params) {
        (
            Params::new(1.0, 1.0, 0.5, 3.0).unwrap(),
            Params::new(2.0, 2.0, 0.5, 1.5).unwrap(),
        )
    }

    #[test]
    fn entropy_matches_frozen_values() {
        let (p1, p2) = equiv_pair();
        let p3 = Params::new(1.0, 1.0, 0.4, 3.0).unwrap();
        let g5 = SamplingGrid::equispaced(5).unwrap();
        let r = symmetrized_entropy(&p1, &p2, &g5).unwrap();
        assert_relative_eq!(r.i_n, 1.5289238146274418, max_relative = 1e-13);
        assert_eq!(r.classification, Classification::Equivalent);
        assert_eq!(r.n, 5);
        let r = symmetrized_entropy(&p1, &p3, &g5).unwrap();
        assert_relative_eq!(r.i_n, 0.0952380952380949, max_relative = 1e-11);
        assert_eq!(r.classification, Classification::Orthogonal);
    }

    #[test]
    fn entropy_bounded_for_equivalent_divergent_for_orthogonal() {
        let (p1, p2) = equiv_pair();
        let p3 = Params::new(1.0, 1.0, 0.4, 3.0).unwrap();
        let g100 = SamplingGrid::equispaced(100).unwrap();
        let g400 = SamplingGrid::equispaced(400).unwrap();
        let eq100 = symmetrized_entropy(&p1, &p2, &g100).unwrap().i_n;
        let eq400 = symmetrized_entropy(&p1, &p2, &g400).unwrap().i_n;
        // The value is a small difference of O(n) trace sums, so summation
        // order costs a few digits; the tolerance leaves room for that.
        assert_relative_eq!(eq100, 1.6248076162936798, max_relative = 1e-10);
        assert_relative_eq!(eq400, 1.624988095180015, max_relative = 1e-9);
        assert!(eq400 <= 1.25 * eq100);
        let or100 = symmetrized_entropy(&p1, &p3, &g100).unwrap().i_n;
        let or400 = symmetrized_entropy(&p1, &p3, &g400).unwrap().i_n;
        assert_relative_eq!(or100, 1.9047619047619264, max_relative = 1e-10);
        assert_relative_eq!(or400, 7.619047619047706, max_relative = 1e-9);
        assert!(or400 >= 2.0 * or100);
    }

    #[test]
    fn entropy_zero_for_identical_params() {
        let p = Params::new(1.3, 0.8, -0.25, 4.0).unwrap();
        let g = SamplingGrid::equispaced(64).unwrap();
        let r = symmetrized_entropy(&p, &p, &g).unwrap();
        assert_abs_diff_eq!(r.i_n, 0.0, epsilon = 1e-10);
        assert_eq!(r.classification, Classification::Equivalent);
        assert_eq!(r.condition_residuals, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_is_symmetric_as_computed() {
        let mut rng = replication_rng(404, 0);
        for _ in 0..20 {
            let p1 = random_params(&mut rng);
            let p2 = random_params(&mut rng);
            let g = SamplingGrid::uniform_random(30, &mut rng).unwrap();
            let a = symmetrized_entropy(&p1, &p2, &g).unwrap().i_n;
            let b = symmetrized_entropy(&p2, &p1, &g).unwrap().i_n;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn closed_form_matches_dense_oracle() {
        let mut rng = replication_rng(405, 0);
        for k in 0..15 {
            let p1 = random_params(&mut rng);
            let p2 = random_params(&mut rng);
            let n = 2 + (k * 13) % 120;
            let g = SamplingGrid::uniform_random(n, &mut rng).unwrap();
            let fast = symmetrized_entropy_with(&p1, &p2, &g, EntropyMethod::ClosedForm).unwrap();
            let dense = symmetrized_entropy_with(&p1, &p2, &g, EntropyMethod::Dense).unwrap();
            let scale = fast.i_n.abs().max(dense.i_n.abs()).max(1.0);
            assert!(
                (fast.i_n - dense.i_n).abs() <= 1e-6 * scale,
                "closed {} vs dense {} at n={n}",
                fast.i_n,
                dense.i_n
            );
        }
    }

    #[test]
    fn entropy_grows_under_grid_refinement() {
        let mut rng = replication_rng(406, 0);
        for _ in 0..20 {
            let p1 = random_params(&mut rng);
            let p2 = random_params(&mut rng);
            let fine = SamplingGrid::uniform_random(60, &mut rng).unwrap();
            let coarse_pts: Vec<f64> = fine.points().iter().step_by(2).copied().collect();
            let coarse = SamplingGrid::new(coarse_pts).unwrap();
            let i_coarse = symmetrized_entropy(&p1, &p2, &coarse).unwrap().i_n;
            let i_fine = symmetrized_entropy(&p1, &p2, &fine).unwrap().i_n;
            assert!(
                i_fine >= i_coarse - 1e-9 * (1.0 + i_coarse.abs()),
                "refinement decreased entropy: {i_coarse} -> {i_fine}"
            );
        }
    }

    #[test]
    fn entropy_rejects_single_point_grid() {
        let (p1, p2) = equiv_pair();
        let g = SamplingGrid::new(vec![0.5]).unwrap();
        assert!(matches!(
            symmetrized_entropy(&p1, &p2, &g),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn classifier_on_known_pairs() {
        let (p1, p2) = equiv_pair();
        assert_eq!(
            classify_equivalence(&p1, &p2, EQUIVALENCE_TOL),
            Classification::Equivalent
        );
        assert_eq!(
            classify_equivalence(&p1, &p1, EQUIVALENCE_TOL),
            Classification::Equivalent
        );
        let p3 = Params::new(1.0, 1.0, 0.2, 3.0).unwrap();
        assert_eq!(
            classify_equivalence(&p1, &p3, EQUIVALENCE_TOL),
            Classification::Orthogonal
        );
    }

    #[test]
    fn classifier_invariant_under_rescaling() {
        let mut rng = replication_rng(407, 0);
        for _ in 0..50 {
            let p = random_params(&mut rng);
            let c: f64 = rng.random_range(0.05..20.0);
            let q = Params::new(
                c * p.sigma1_sq(),
                c * p.sigma2_sq(),
                p.rho(),
                p.theta() / c,
            )
            .unwrap();
            assert_eq!(
                classify_equivalence(&p, &q, EQUIVALENCE_TOL),
                Classification::Equivalent
            );
        }
    }

    #[test]
    fn asym_cov_frozen_examples() {
        let p = Params::new(0.5, 0.5, 0.5, 15.0).unwrap();
        let full = asym_cov(Scenario::Full, &p);
        let expected = [
            [112.5, 28.125, 2.8125],
            [28.125, 112.5, 2.8125],
            [2.8125, 2.8125, 0.5625],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(full.matrix[(i, j)], expected[i][j], max_relative = 1e-14);
            }
        }
        assert_eq!(full.labels, vec!["sigma1_sq_theta", "sigma2_sq_theta", "rho"]);

        let p = Params::new(1.0, 1.0, 0.5, 15.0).unwrap();
        let tr = asym_cov(Scenario::ThetaRho, &p);
        assert_relative_eq!(tr.matrix[(0, 0)], 281.25, max_relative = 1e-14);
        assert_relative_eq!(tr.matrix[(0, 1)], 5.625, max_relative = 1e-14);
        assert_relative_eq!(tr.matrix[(1, 0)], 5.625, max_relative = 1e-14);
        assert_relative_eq!(tr.matrix[(1, 1)], 0.5625, max_relative = 1e-14);

        let only = asym_cov(Scenario::ThetaOnly, &p);
        assert_eq!(only.matrix[(0, 0)], 225.0);
        assert_eq!(only.labels, vec!["theta"]);
    }

    #[test]
    fn asym_cov_diagonal_at_zero_correlation() {
        let p = Params::new(0.5, 2.0, 0.0, 15.0).unwrap();
        let full = asym_cov(Scenario::Full, &p);
        assert_eq!(full.matrix[(0, 0)], 2.0 * 7.5 * 7.5);
        assert_eq!(full.matrix[(1, 1)], 2.0 * 30.0 * 30.0);
        assert_eq!(full.matrix[(2, 2)], 1.0);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(full.matrix[(i, j)], 0.0);
                }
            }
        }
        let tr = asym_cov(Scenario::ThetaRho, &p);
        assert_eq!(tr.matrix[(0, 0)], 225.0);
        assert_eq!(tr.matrix[(1, 1)], 1.0);
        assert_eq!(tr.matrix[(0, 1)], 0.0);
    }

    #[test]
    fn asym_cov_positive_semidefinite() {
        let mut rng = replication_rng(408, 0);
        for _ in 0..100 {
            let p = random_params(&mut rng);
            for scenario in [Scenario::ThetaOnly, Scenario::ThetaRho, Scenario::Full] {
                let m = asym_cov(scenario, &p).matrix;
                let eig = m.clone().symmetric_eigen().eigenvalues;
                let floor = -1e-9 * m.diagonal().amax();
                assert!(
                    eig.iter().all(|&v| v >= floor),
                    "negative eigenvalue {eig:?} for {scenario:?} at {p:?}"
                );
            }
        }
    }

    #[test]
    fn xi_covariance_examples() {
        let m = xi_covariance(0.0).unwrap();
        assert_eq!(m, Matrix3::from_diagonal(&[2.0, 2.0, 1.0].into()));
        let m = xi_covariance(0.5).unwrap();
        assert_eq!(m[(0, 1)], 0.5);
        assert_relative_eq!(m[(0, 2)], 1.0 / 1.25_f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(m[(0, 2)], 0.894427, max_relative = 1e-6);
        assert_eq!(m[(2, 2)], 1.0);
        assert!(xi_covariance(1.0).is_err());
        assert!(xi_covariance(f64::NAN).is_err());
    }

    #[test]
    fn diagnostics_match_limit_moments() {
        for (seed, rho0) in [(90_u64, 0.0), (91, 0.2), (92, 0.5)] {
            let psi0 = Params::new(1.0, 2.0, rho0, 10.0).unwrap();
            let mut rng = replication_rng(seed, 0);
            let g = SamplingGrid::uniform_random(5000, &mut rng).unwrap();
            let s = draw_recursive(&psi0, &g, &mut rng);
            let d = compute_diagnostics(&s, &psi0).unwrap();
            let m = (s.n() - 1) as f64;
            let se_mean = 1.0 / m.sqrt();
            let target = rho0 / (1.0 + rho0 * rho0).sqrt();
            assert_abs_diff_eq!(d.sample_moments.mean_y, target, epsilon = 4.0 * se_mean);
            let mu4 = d
                .y_values
                .iter()
                .map(|y| (y - d.sample_moments.mean_y).powi(4))
                .sum::<f64>()
                / m;
            let se_var = ((mu4 - d.sample_moments.var_y.powi(2)).max(0.0) / m).sqrt();
            assert_abs_diff_eq!(d.sample_moments.var_y, 1.0, epsilon = 4.0 * se_var);
        }
    }

    #[test]
    fn diagnostics_xi_identity_and_lengths() {
        let psi0 = Params::new(1.0, 1.0, 0.3, 8.0).unwrap();
        let mut rng = replication_rng(93, 0);
        let g = SamplingGrid::uniform_random(40, &mut rng).unwrap();
        let s = draw_recursive(&psi0, &g, &mut rng);
        let d = compute_diagnostics(&s, &psi0).unwrap();
        assert_eq!(d.y_values.len(), 39);
        assert_eq!(d.w1_values.len(), 39);
        assert_eq!(d.xi_values[2].len(), 39);
        let shift = 0.3 / 1.09_f64.sqrt();
        for (xi3, y) in d.xi_values[2].iter().zip(&d.y_values) {
            assert_eq!(*xi3, y - shift);
        }
        for ((xi1, w1), (xi2, w2)) in d.xi_values[0]
            .iter()
            .zip(&d.w1_values)
            .zip(d.xi_values[1].iter().zip(&d.w2_values))
        {
            assert_eq!(*xi1, w1 * w1 - 1.0);
            assert_eq!(*xi2, w2 * w2 - 1.0);
        }
    }

    #[test]
    fn xi_sample_covariance_matches_theory() {
        let rho0 = 0.5;
        let psi0 = Params::new(1.0, 1.0, rho0, 10.0).unwrap();
        let mut rng = replication_rng(94, 0);
        let g = SamplingGrid::uniform_random(5000, &mut rng).unwrap();
        let s = draw_recursive(&psi0, &g, &mut rng);
        let d = compute_diagnostics(&s, &psi0).unwrap();
        let theory = xi_covariance(rho0).unwrap();
        let m = (s.n() - 1) as f64;
        for i in 0..3 {
            for j in 0..3 {
                let prods: Vec<f64> = d.xi_values[i]
                    .iter()
                    .zip(&d.xi_values[j])
                    .map(|(a, b)| a * b)
                    .collect();
                let mean_p = prods.iter().sum::<f64>() / m;
                let var_p = prods.iter().map(|p| (p - mean_p) * (p - mean_p)).sum::<f64>() / m;
                let se = (var_p / m).sqrt();
                assert_abs_diff_eq!(
                    d.sample_moments.cov_xi[(i, j)],
                    theory[(i, j)],
                    epsilon = 4.0 * se + 1e-3
                );
            }
        }
    }

    #[test]
    fn standardize_frozen_arithmetic() {
        let psi0 = Params::new(1.0, 1.0, 0.0, 15.0).unwrap();
        let truth_box = ParamBox::default()
            .pin(Coord::Sigma1Sq, 1.0)
            .unwrap()
            .pin(Coord::Sigma2Sq, 1.0)
            .unwrap();
        let mut rng = replication_rng(95, 0);
        let g = SamplingGrid::uniform_random(50, &mut rng).unwrap();
        let s = draw_recursive(&psi0, &g, &mut rng);
        let mut fit = fit_mle(&s, &truth_box, &FitOptions::default()).unwrap();
        fit.psi_hat = Params::new(1.0, 1.0, fit.psi_hat.rho(), 16.0).unwrap();
        let v = standardize(&fit, &psi0, Scenario::ThetaRho, 400).unwrap();
        assert_eq!(v.len(), 2);
        assert_relative_eq!(v[0], 20.0 / 15.0, max_relative = 1e-14);
        // theta hit exactly gives a zero coordinate.
        fit.psi_hat = Params::new(1.0, 1.0, fit.psi_hat.rho(), 15.0).unwrap();
        let v = standardize(&fit, &psi0, Scenario::ThetaRho, 400).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn standardize_rejects_scenario_mismatch() {
        let psi0 = Params::new(1.0, 1.0, 0.0, 15.0).unwrap();
        let mut rng = replication_rng(96, 0);
        let g = SamplingGrid::uniform_random(50, &mut rng).unwrap();
        let s = draw_recursive(&psi0, &g, &mut rng);
        let fit = fit_mle(&s, &ParamBox::default(), &FitOptions::default()).unwrap();
        assert!(standardize(&fit, &psi0, Scenario::Full, 50).is_ok());
        assert!(matches!(
            standardize(&fit, &psi0, Scenario::ThetaRho, 50),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            standardize(&fit, &psi0, Scenario::ThetaOnly, 50),
            Err(Error::Domain(_))
        ));
    }

    fn random_params<R: Rng>(rng: &mut R) -> Params {
        Params::new(
            rng.random_range(0.1_f64.ln()..10.0_f64.ln()).exp(),
            rng.random_range(0.1_f64.ln()..10.0_f64.ln()).exp(),
            rng.random_range(-0.9..0.9),
            rng.random_range(0.5_f64.ln()..50.0_f64.ln()).exp(),
        )
        .unwrap()
    }
}
