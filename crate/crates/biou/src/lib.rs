//! Bivariate Ornstein-Uhlenbeck toolkit.
//!
//! A zero-mean bivariate Gaussian process on `[0, 1]` with the separable
//! exponential covariance
//!
//! ```text
//! cov(Z_i(s), Z_j(t)) = A_ij * exp(-theta |s - t|),
//! A = [[sigma1^2, sigma1 sigma2 rho], [sigma1 sigma2 rho, sigma2^2]]
//! ```
//!
//! is Markov along the line, which makes everything here exact and fast:
//!
//! - [`simulate`]: exact draws, either through the dense Cholesky factor or
//!   through the O(n) one-step recursion.
//! - [`likelihood`]: O(n) negative log-likelihood, analytic gradient, and the
//!   closed-form profile of the cross-covariance matrix at fixed decay rate.
//! - [`estimate`]: box-constrained maximum likelihood with pinning, driven by
//!   a profiled line search plus a projected Newton polish.
//! - [`asymptotics`]: symmetrized entropy between two parameterizations, the
//!   equivalence classifier, the limiting covariances of the estimable
//!   combinations, and innovation diagnostics.
//! - [`montecarlo`]: deterministic parallel replication of the
//!   simulate-fit-standardize pipeline into quantile tables.
//!
//! Only the products `sigma_k^2 * theta` and the colocated correlation `rho`
//! can be estimated consistently from a fixed interval; the library's
//! estimators, standardizations, and tables are organized around that fact.

pub mod asymptotics;
pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod model;
pub mod montecarlo;
pub mod simulate;

pub use asymptotics::{
    asym_cov, classify_equivalence, compute_diagnostics, standardize, symmetrized_entropy,
    symmetrized_entropy_with, xi_covariance, AsymCov, Classification, DiagnosticStats,
    EntropyMethod, EntropyReport, SampleMoments, Scenario, EQUIVALENCE_TOL,
};
pub use error::{Error, Result};
pub use estimate::{
    fit_mle, microergodic, BoundState, BoxActivity, Coord, FitOptions, FitResult, Microergodic,
    ParamBox,
};
pub use likelihood::{
    neg_log_lik_dense, neg_log_lik_fast, neg_log_lik_gradient, profile_cross_covariance,
    LikelihoodTerms,
};
pub use model::{
    dense_covariance, kernel, BivariateSample, Params, SamplingGrid, MIN_SPACING,
};
pub use montecarlo::{
    consistency_sweep, normal_quantiles, quantiles_type1, run_experiment, run_replications,
    scenario_box, summarize, ConsistencyReport, ExperimentSpec, GridPolicy, QuantileRow,
    QuantileTable, RawBatch,
};
pub use simulate::{
    draw_dense, draw_recursive, replication_rng, simulate, simulate_dense, simulate_recursive,
    SimConfig, SimMethod,
};
