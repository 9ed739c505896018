//! Replicated simulate-fit-standardize experiments with deterministic
//! parallelism.
//!
//! Every replication derives its generator from `(master_seed, index)`, so
//! tables are identical for any worker count, batches can be split and
//! merged, and a single replication can be replayed in isolation.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{standardize, Scenario};
use crate::error::{Error, Result};
use crate::estimate::{fit_mle, microergodic, Coord, FitOptions, ParamBox};
use crate::model::{Params, SamplingGrid};
use crate::simulate::{draw_recursive, replication_rng};

/// Whether each replication samples its own grid or all replications share
/// one grid drawn up front (stream 0 of the master seed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPolicy {
    Redraw,
    Frozen,
}

/// Guard on in-memory retention of raw replication values.
pub const MAX_REPLICATIONS: usize = 100_000;

pub const DEFAULT_QUANTILE_PROBS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn default_grid_policy() -> GridPolicy {
    GridPolicy::Redraw
}

fn default_probs() -> Vec<f64> {
    DEFAULT_QUANTILE_PROBS.to_vec()
}

/// Full description of one experiment; deserializable from a JSON config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub psi0: Params,
    /// Points per sample.
    pub n: usize,
    /// Replication count.
    pub m: usize,
    pub scenario: Scenario,
    pub master_seed: u64,
    #[serde(default = "default_grid_policy")]
    pub grid_policy: GridPolicy,
    #[serde(default = "default_probs")]
    pub quantile_probs: Vec<f64>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Domain(format!(
                "experiment needs n >= 2 points per sample, got {}",
                self.n
            )));
        }
        if self.m < 1 {
            return Err(Error::Domain("replication count must be positive".into()));
        }
        if self.m > MAX_REPLICATIONS {
            return Err(Error::Domain(format!(
                "replication count {} exceeds the in-memory limit {MAX_REPLICATIONS}",
                self.m
            )));
        }
        if self.quantile_probs.is_empty() {
            return Err(Error::Domain("quantile probabilities are empty".into()));
        }
        let increasing = self
            .quantile_probs
            .windows(2)
            .all(|w| w[0] < w[1]);
        let in_range = self
            .quantile_probs
            .iter()
            .all(|p| p.is_finite() && *p > 0.0 && *p < 1.0);
        if !increasing || !in_range {
            return Err(Error::Domain(format!(
                "quantile probabilities must be strictly increasing within (0, 1), got {:?}",
                self.quantile_probs
            )));
        }
        Ok(())
    }
}

/// Search box matching a scenario: pinned coordinates are fixed at the truth.
pub fn scenario_box(scenario: Scenario, psi0: &Params) -> Result<ParamBox> {
    let b = ParamBox::default();
    match scenario {
        Scenario::Full => Ok(b),
        Scenario::ThetaRho => b
            .pin(Coord::Sigma1Sq, psi0.sigma1_sq())?
            .pin(Coord::Sigma2Sq, psi0.sigma2_sq()),
        Scenario::ThetaOnly => b
            .pin(Coord::Sigma1Sq, psi0.sigma1_sq())?
            .pin(Coord::Sigma2Sq, psi0.sigma2_sq())?
            .pin(Coord::Rho, psi0.rho()),
    }
}

/// Raw per-replication outputs in replication order, before aggregation.
/// Batches over disjoint index ranges of the same spec merge losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBatch {
    labels: Vec<&'static str>,
    /// One vector per label: standardized statistic per successful replication.
    standardized: Vec<Vec<f64>>,
    /// One vector per label: raw (non-standardized) estimator values.
    raw: Vec<Vec<f64>>,
    /// Raw decay-rate estimate per successful replication, kept regardless
    /// of scenario for the non-consistency diagnostic.
    theta_hats: Vec<f64>,
    attempted: usize,
    failures: usize,
    /// First few failure messages, for the over-threshold diagnostic.
    failure_notes: Vec<String>,
}

impl RawBatch {
    pub fn labels(&self) -> &[&'static str] {
        &self.labels
    }

    pub fn attempted(&self) -> usize {
        self.attempted
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    pub fn standardized(&self, label_index: usize) -> &[f64] {
        &self.standardized[label_index]
    }

    pub fn raw(&self, label_index: usize) -> &[f64] {
        &self.raw[label_index]
    }

    pub fn theta_hats(&self) -> &[f64] {
        &self.theta_hats
    }

    /// Concatenates a batch that continues this one's replication range.
    pub fn merge(mut self, later: RawBatch) -> Result<RawBatch> {
        if self.labels != later.labels {
            return Err(Error::Domain(format!(
                "cannot merge batches with statistics {:?} and {:?}",
                self.labels, later.labels
            )));
        }
        for (dst, src) in self.standardized.iter_mut().zip(later.standardized) {
            dst.extend(src);
        }
        for (dst, src) in self.raw.iter_mut().zip(later.raw) {
            dst.extend(src);
        }
        self.theta_hats.extend(later.theta_hats);
        self.attempted += later.attempted;
        self.failures += later.failures;
        self.failure_notes.extend(later.failure_notes);
        self.failure_notes.truncate(8);
        Ok(self)
    }
}

enum RepOutcome {
    Success {
        standardized: Vec<f64>,
        raw: Vec<f64>,
        theta_hat: f64,
    },
    Failure(String),
}

fn run_one(spec: &ExperimentSpec, frozen_grid: Option<&SamplingGrid>, rep: usize) -> RepOutcome {
    let mut rng = replication_rng(spec.master_seed, rep as u64 + 1);
    let grid = match frozen_grid {
        Some(g) => g.clone(),
        None => match SamplingGrid::uniform_random(spec.n, &mut rng) {
            Ok(g) => g,
            Err(e) => return RepOutcome::Failure(format!("grid draw failed: {e}")),
        },
    };
    let sample = draw_recursive(&spec.psi0, &grid, &mut rng);
    let bounds = match scenario_box(spec.scenario, &spec.psi0) {
        Ok(b) => b,
        Err(e) => return RepOutcome::Failure(format!("scenario box invalid: {e}")),
    };
    let fit = match fit_mle(&sample, &bounds, &FitOptions::default()) {
        Ok(f) => f,
        Err(e) => return RepOutcome::Failure(format!("fit failed: {e}")),
    };
    if !fit.converged {
        return RepOutcome::Failure("fit did not converge".into());
    }
    let standardized = match standardize(&fit, &spec.psi0, spec.scenario, spec.n) {
        Ok(v) => v,
        Err(e) => return RepOutcome::Failure(format!("standardization failed: {e}")),
    };
    let m = microergodic(&fit.psi_hat);
    let raw = match spec.scenario {
        Scenario::ThetaOnly => vec![fit.psi_hat.theta()],
        Scenario::ThetaRho => vec![fit.psi_hat.theta(), fit.psi_hat.rho()],
        Scenario::Full => vec![m.sigma1_sq_theta, m.sigma2_sq_theta, m.rho],
    };
    RepOutcome::Success {
        standardized,
        raw,
        theta_hat: fit.psi_hat.theta(),
    }
}

/// Runs the replications with indices in `reps` and collects their raw
/// outputs in index order. The full experiment is `0..spec.m`; disjoint
/// adjacent ranges merge into the same batch the full range produces.
pub fn run_replications(spec: &ExperimentSpec, reps: Range<usize>) -> Result<RawBatch> {
    spec.validate()?;
    if reps.end > spec.m {
        return Err(Error::Domain(format!(
            "replication range {reps:?} exceeds m={}",
            spec.m
        )));
    }
    let frozen_grid = match spec.grid_policy {
        GridPolicy::Frozen => Some(SamplingGrid::uniform_random(
            spec.n,
            &mut replication_rng(spec.master_seed, 0),
        )?),
        GridPolicy::Redraw => None,
    };
    let outcomes: Vec<RepOutcome> = reps
        .clone()
        .into_par_iter()
        .map(|rep| run_one(spec, frozen_grid.as_ref(), rep))
        .collect();

    let labels = spec.scenario.labels().to_vec();
    let k = labels.len();
    let mut batch = RawBatch {
        labels,
        standardized: vec![Vec::new(); k],
        raw: vec![Vec::new(); k],
        theta_hats: Vec::new(),
        attempted: reps.len(),
        failures: 0,
        failure_notes: Vec::new(),
    };
    for outcome in outcomes {
        match outcome {
            RepOutcome::Success {
                standardized,
                raw,
                theta_hat,
            } => {
                for (j, v) in standardized.into_iter().enumerate() {
                    batch.standardized[j].push(v);
                }
                for (j, v) in raw.into_iter().enumerate() {
                    batch.raw[j].push(v);
                }
                batch.theta_hats.push(theta_hat);
            }
            RepOutcome::Failure(note) => {
                batch.failures += 1;
                if batch.failure_notes.len() < 8 {
                    batch.failure_notes.push(note);
                }
            }
        }
    }
    Ok(batch)
}

/// Empirical quantile by the inverted-CDF rule: the order statistic with
/// one-based rank `ceil(p * m)`.
pub fn quantiles_type1(sorted: &[f64], probs: &[f64]) -> Vec<f64> {
    let m = sorted.len();
    probs
        .iter()
        .map(|&p| {
            let rank = (p * m as f64).ceil().max(1.0) as usize;
            sorted[rank.min(m) - 1]
        })
        .collect()
}

/// Standard normal quantiles, the reference row printed under each table.
pub fn normal_quantiles(probs: &[f64]) -> Vec<f64> {
    let norm = Normal::new(0.0, 1.0).unwrap();
    probs.iter().map(|&p| norm.inverse_cdf(p)).collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64
}

/// One aggregated table row: quantiles of a standardized statistic plus the
/// variance of its raw estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRow {
    pub n: usize,
    pub theta0: f64,
    pub rho0: f64,
    pub statistic: String,
    pub quantiles: Vec<f64>,
    pub variance: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileTable {
    pub psi0: Params,
    pub scenario: Scenario,
    pub grid_policy: GridPolicy,
    pub master_seed: u64,
    pub m: usize,
    pub quantile_probs: Vec<f64>,
    pub rows: Vec<QuantileRow>,
    /// Standard normal quantiles at the same probabilities.
    pub normal_reference: Vec<f64>,
}

/// Aggregates a batch into the table shape, refusing when more than 5% of
/// the attempted replications failed.
pub fn summarize(spec: &ExperimentSpec, batch: &RawBatch) -> Result<QuantileTable> {
    spec.validate()?;
    if batch.attempted == 0 {
        return Err(Error::Experiment("batch holds no replications".into()));
    }
    let failure_rate = batch.failures as f64 / batch.attempted as f64;
    if failure_rate > 0.05 {
        return Err(Error::Experiment(format!(
            "{} of {} replications failed ({:.1}%); first failures: {:?}",
            batch.failures,
            batch.attempted,
            100.0 * failure_rate,
            batch.failure_notes
        )));
    }
    let successes = batch.attempted - batch.failures;
    let rows = batch
        .labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let mut sorted = batch.standardized[j].clone();
            sorted.sort_by(f64::total_cmp);
            QuantileRow {
                n: spec.n,
                theta0: spec.psi0.theta(),
                rho0: spec.psi0.rho(),
                statistic: (*label).to_string(),
                quantiles: quantiles_type1(&sorted, &spec.quantile_probs),
                variance: sample_variance(&batch.raw[j]),
                replications: successes,
                failures: batch.failures,
            }
        })
        .collect();
    Ok(QuantileTable {
        psi0: spec.psi0,
        scenario: spec.scenario,
        grid_policy: spec.grid_policy,
        master_seed: spec.master_seed,
        m: spec.m,
        quantile_probs: spec.quantile_probs.clone(),
        rows,
        normal_reference: normal_quantiles(&spec.quantile_probs),
    })
}

/// Runs the full experiment and aggregates it.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<QuantileTable> {
    let batch = run_replications(spec, 0..spec.m)?;
    summarize(spec, &batch)
}

/// Per-sample-size error summary of the estimable combinations.
#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub ns: Vec<usize>,
    pub m: usize,
    pub labels: Vec<&'static str>,
    /// Median absolute error of each combination, one row per sample size.
    pub median_abs_error: Vec<[f64; 3]>,
    /// Sample standard deviation of the raw decay-rate estimate per sample
    /// size. Not expected to shrink: the rate alone is not consistently
    /// estimable on a fixed domain.
    pub sd_theta: Vec<f64>,
}

/// Repeats the full-scenario experiment across increasing sample sizes and
/// reports how the microergodic errors shrink.
pub fn consistency_sweep(
    psi0: &Params,
    ns: &[usize],
    m: usize,
    master_seed: u64,
) -> Result<ConsistencyReport> {
    if ns.is_empty() || !ns.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Domain(format!(
            "sample sizes must be strictly increasing, got {ns:?}"
        )));
    }
    let truth = [
        psi0.sigma1_sq() * psi0.theta(),
        psi0.sigma2_sq() * psi0.theta(),
        psi0.rho(),
    ];
    let mut median_abs_error = Vec::with_capacity(ns.len());
    let mut sd_theta = Vec::with_capacity(ns.len());
    for &n in ns {
        let spec = ExperimentSpec {
            psi0: *psi0,
            n,
            m,
            scenario: Scenario::Full,
            master_seed: master_seed.wrapping_add(n as u64),
            grid_policy: GridPolicy::Redraw,
            quantile_probs: default_probs(),
        };
        let batch = run_replications(&spec, 0..m)?;
        let failure_rate = batch.failures as f64 / batch.attempted as f64;
        if failure_rate > 0.05 {
            return Err(Error::Experiment(format!(
                "{} of {} replications failed at n={n}; first failures: {:?}",
                batch.failures, batch.attempted, batch.failure_notes
            )));
        }
        let mut row = [0.0; 3];
        for (j, r) in row.iter_mut().enumerate() {
            let mut errs: Vec<f64> = batch.raw[j].iter().map(|v| (v - truth[j]).abs()).collect();
            errs.sort_by(f64::total_cmp);
            *r = quantiles_type1(&errs, &[0.5])[0];
        }
        median_abs_error.push(row);
        sd_theta.push(sample_variance(batch.theta_hats()).sqrt());
    }
    Ok(ConsistencyReport {
        ns: ns.to_vec(),
        m,
        labels: Scenario::Full.labels().to_vec(),
        median_abs_error,
        sd_theta,
    })
}
