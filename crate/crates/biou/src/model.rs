//! Process parameters, sampling grids, observed samples, and the dense
//! covariance builder.
//!
//! The process has two components over locations in `[0, 1]`. Component `i`
//! has variance `sigma_i^2`, the components are correlated with coefficient
//! `rho` at a common location, and dependence across locations decays as
//! `exp(-theta * distance)`. Stacking component 1 over component 2 gives a
//! `2n`-variate Gaussian with covariance `A (x) R`, the Kronecker product of
//! the 2x2 cross-covariance `A` and the `n x n` location correlation `R`.

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest spacing between consecutive grid points accepted by
/// [`SamplingGrid`]. Closer points make the location correlation matrix
/// numerically singular.
pub const MIN_SPACING: f64 = 1e-12;

/// Model parameters `(sigma1_sq, sigma2_sq, rho, theta)`.
///
/// Validation is eager: a constructed value always satisfies
/// `sigma1_sq > 0`, `sigma2_sq > 0`, `|rho| < 1`, `theta > 0`, all finite.
/// Downstream code relies on this and does not re-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct Params {
    sigma1_sq: f64,
    sigma2_sq: f64,
    rho: f64,
    theta: f64,
}

#[derive(Deserialize)]
struct RawParams {
    sigma1_sq: f64,
    sigma2_sq: f64,
    rho: f64,
    theta: f64,
}

impl TryFrom<RawParams> for Params {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        Params::new(raw.sigma1_sq, raw.sigma2_sq, raw.rho, raw.theta)
    }
}

impl Params {
    pub fn new(sigma1_sq: f64, sigma2_sq: f64, rho: f64, theta: f64) -> Result<Self> {
        if !sigma1_sq.is_finite() || sigma1_sq <= 0.0 {
            return Err(Error::Domain(format!(
                "sigma1_sq must be finite and positive, got {sigma1_sq}"
            )));
        }
        if !sigma2_sq.is_finite() || sigma2_sq <= 0.0 {
            return Err(Error::Domain(format!(
                "sigma2_sq must be finite and positive, got {sigma2_sq}"
            )));
        }
        if !rho.is_finite() || rho.abs() >= 1.0 {
            return Err(Error::Domain(format!(
                "rho must lie strictly inside (-1, 1), got {rho}"
            )));
        }
        if !theta.is_finite() || theta <= 0.0 {
            return Err(Error::Domain(format!(
                "theta must be finite and positive, got {theta}"
            )));
        }
        Ok(Self {
            sigma1_sq,
            sigma2_sq,
            rho,
            theta,
        })
    }

    pub fn sigma1_sq(&self) -> f64 {
        self.sigma1_sq
    }

    pub fn sigma2_sq(&self) -> f64 {
        self.sigma2_sq
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma1_sq.sqrt()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2_sq.sqrt()
    }

    /// Cross-covariance `A` of the two components at a common location.
    pub fn cross_covariance(&self) -> Matrix2<f64> {
        let off = self.sigma1() * self.sigma2() * self.rho;
        Matrix2::new(self.sigma1_sq, off, off, self.sigma2_sq)
    }
}

/// Covariance between component `i` at one location and component `j` at a
/// location `h` apart. Components are indexed 1 and 2.
pub fn kernel(params: &Params, i: usize, j: usize, h: f64) -> Result<f64> {
    if !(1..=2).contains(&i) || !(1..=2).contains(&j) {
        return Err(Error::Domain(format!(
            "component indices must be 1 or 2, got ({i}, {j})"
        )));
    }
    let sigma = |k: usize| if k == 1 { params.sigma1() } else { params.sigma2() };
    let cross = if i == j { 1.0 } else { params.rho };
    Ok(sigma(i) * sigma(j) * cross * (-params.theta * h.abs()).exp())
}

/// Strictly increasing observation locations in `[0, 1]`.
///
/// Spacings below [`MIN_SPACING`] are rejected at construction, so every
/// consumer can divide by `1 - exp(-2 theta delta)` without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    points: Vec<f64>,
    deltas: Vec<f64>,
}

impl SamplingGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("grid must contain at least one point".into()));
        }
        for (k, &s) in points.iter().enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!(
                    "grid point {k} must lie in [0, 1], got {s}"
                )));
            }
        }
        let mut deltas = Vec::with_capacity(points.len() - 1);
        for w in points.windows(2) {
            let d = w[1] - w[0];
            if d < MIN_SPACING {
                return Err(Error::Domain(format!(
                    "grid points must be strictly increasing with spacing >= {MIN_SPACING:e}, got spacing {d:e}"
                )));
            }
            deltas.push(d);
        }
        Ok(Self { points, deltas })
    }

    /// `n` equally spaced points covering `[0, 1]` inclusively. Needs `n >= 2`.
    pub fn equispaced(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "equispaced grid needs at least 2 points, got {n}"
            )));
        }
        let step = 1.0 / (n - 1) as f64;
        Self::new((0..n).map(|k| (k as f64 * step).min(1.0)).collect())
    }

    /// `n` points drawn uniformly at random on `[0, 1]` and sorted. Redraws on
    /// the (practically impossible) event of a spacing collision.
    pub fn uniform_random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("grid must contain at least one point".into()));
        }
        for _ in 0..100 {
            let mut points: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            points.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if let Ok(grid) = Self::new(points) {
                return Ok(grid);
            }
        }
        Err(Error::Numeric(format!(
            "could not draw {n} points with spacing >= {MIN_SPACING:e}"
        )))
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Spacings between consecutive points; length `n - 1`.
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }
}

/// One observed path of both components over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateSample {
    grid: SamplingGrid,
    z1: Vec<f64>,
    z2: Vec<f64>,
}

impl BivariateSample {
    pub fn new(grid: SamplingGrid, z1: Vec<f64>, z2: Vec<f64>) -> Result<Self> {
        if z1.len() != grid.n() || z2.len() != grid.n() {
            return Err(Error::Domain(format!(
                "component lengths ({}, {}) must match grid size {}",
                z1.len(),
                z2.len(),
                grid.n()
            )));
        }
        if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("sample values must be finite".into()));
        }
        Ok(Self { grid, z1, z2 })
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }

    pub fn z1(&self) -> &[f64] {
        &self.z1
    }

    pub fn z2(&self) -> &[f64] {
        &self.z2
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }
}

/// Full `2n x 2n` covariance of the stacked vector `(z1, z2)`, laid out as
/// the Kronecker product of the cross-covariance with the location
/// correlation matrix.
pub fn dense_covariance(params: &Params, grid: &SamplingGrid) -> DMatrix<f64> {
    let n = grid.n();
    let a = params.cross_covariance();
    let s = grid.points();
    DMatrix::from_fn(2 * n, 2 * n, |row, col| {
        let (bi, p) = (row / n, row % n);
        let (bj, q) = (col / n, col % n);
        a[(bi, bj)] * (-params.theta * (s[p] - s[q]).abs()).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_validation_is_eager() {
        assert!(Params::new(1.0, 1.0, 0.0, 1.0).is_ok());
        assert!(Params::new(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(Params::new(1.0, -2.0, 0.0, 1.0).is_err());
        assert!(Params::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(Params::new(1.0, 1.0, -1.0, 1.0).is_err());
        assert!(Params::new(1.0, 1.0, 0.0, 0.0).is_err());
        assert!(Params::new(f64::NAN, 1.0, 0.0, 1.0).is_err());
        assert!(Params::new(1.0, 1.0, 0.0, f64::INFINITY).is_err());
        assert!(Params::new(1.0, 1.0, 0.999_999, 1e6).is_ok());
    }

    #[test]
    fn params_deserialization_revalidates() {
        let ok: std::result::Result<Params, _> =
            serde_json::from_str(r#"{"sigma1_sq":1.0,"sigma2_sq":2.0,"rho":0.5,"theta":3.0}"#);
        assert!(ok.is_ok());
        let bad: std::result::Result<Params, _> =
            serde_json::from_str(r#"{"sigma1_sq":1.0,"sigma2_sq":2.0,"rho":1.5,"theta":3.0}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn kernel_matches_hand_values() {
        let p = Params::new(1.0, 1.0, 0.5, 3.0).unwrap();
        assert_relative_eq!(kernel(&p, 1, 2, 0.0).unwrap(), 0.5);
        assert_relative_eq!(kernel(&p, 1, 1, 0.0).unwrap(), 1.0);

        let q = Params::new(4.0, 9.0, 0.5, 2.0).unwrap();
        assert_relative_eq!(
            kernel(&q, 1, 2, 0.5).unwrap(),
            1.103_638_323_514_327,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            kernel(&q, 2, 2, 0.25).unwrap(),
            5.458_775_937_413_701,
            max_relative = 1e-15
        );
    }

    #[test]
    fn kernel_is_symmetric_and_even_in_distance() {
        let p = Params::new(2.0, 0.5, -0.7, 4.0).unwrap();
        for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            for h in [0.0, 0.1, 0.73, 1.0] {
                let a = kernel(&p, i, j, h).unwrap();
                assert_eq!(a, kernel(&p, j, i, h).unwrap());
                assert_eq!(a, kernel(&p, i, j, -h).unwrap());
            }
        }
    }

    #[test]
    fn kernel_rejects_bad_component_index() {
        let p = Params::new(1.0, 1.0, 0.0, 1.0).unwrap();
        assert!(kernel(&p, 0, 1, 0.1).is_err());
        assert!(kernel(&p, 1, 3, 0.1).is_err());
    }

    #[test]
    fn grid_validation_rejects_bad_inputs() {
        assert!(SamplingGrid::new(vec![]).is_err());
        assert!(SamplingGrid::new(vec![0.2, 0.1]).is_err());
        assert!(SamplingGrid::new(vec![0.1, 0.1]).is_err());
        assert!(SamplingGrid::new(vec![0.1, 0.1 + 1e-13]).is_err());
        assert!(SamplingGrid::new(vec![-0.1, 0.5]).is_err());
        assert!(SamplingGrid::new(vec![0.5, 1.1]).is_err());
        assert!(SamplingGrid::new(vec![f64::NAN]).is_err());
        assert!(SamplingGrid::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(SamplingGrid::new(vec![0.42]).is_ok());
    }

    #[test]
    fn equispaced_covers_unit_interval() {
        let g = SamplingGrid::equispaced(5).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.deltas().len(), 4);
        assert!(SamplingGrid::equispaced(1).is_err());
    }

    #[test]
    fn uniform_random_grid_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let g1 = SamplingGrid::uniform_random(50, &mut r1).unwrap();
        let g2 = SamplingGrid::uniform_random(50, &mut r2).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.points().iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn sample_rejects_length_mismatch() {
        let g = SamplingGrid::equispaced(3).unwrap();
        assert!(BivariateSample::new(g.clone(), vec![1.0, 2.0], vec![1.0, 2.0, 3.0]).is_err());
        assert!(BivariateSample::new(g, vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).is_ok());
    }

    #[test]
    fn dense_covariance_n1_equals_cross_covariance() {
        let p = Params::new(1.5, 2.5, -0.3, 7.0).unwrap();
        let g = SamplingGrid::new(vec![0.4]).unwrap();
        let cov = dense_covariance(&p, &g);
        let a = p.cross_covariance();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cov[(i, j)], a[(i, j)]);
            }
        }
    }

    #[test]
    fn dense_covariance_decouples_components_when_rho_is_zero() {
        let p = Params::new(1.0, 4.0, 0.0, 2.0).unwrap();
        let g = SamplingGrid::new(vec![0.0, 1.0]).unwrap();
        let cov = dense_covariance(&p, &g);
        let e = (-2.0_f64).exp();
        assert_relative_eq!(cov[(0, 1)], e, max_relative = 1e-15);
        assert_relative_eq!(cov[(2, 3)], 4.0 * e, max_relative = 1e-15);
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(cov[(i, j)], 0.0);
                assert_eq!(cov[(j, i)], 0.0);
            }
        }
    }

    #[test]
    fn dense_covariance_entries_match_kernel() {
        let p = Params::new(0.8, 1.7, 0.6, 5.0).unwrap();
        let g = SamplingGrid::new(vec![0.0, 0.21, 0.5, 0.77, 1.0]).unwrap();
        let cov = dense_covariance(&p, &g);
        let n = g.n();
        for bi in 0..2 {
            for bj in 0..2 {
                for pth in 0..n {
                    for q in 0..n {
                        let h = g.points()[pth] - g.points()[q];
                        let want = kernel(&p, bi + 1, bj + 1, h).unwrap();
                        assert_relative_eq!(
                            cov[(bi * n + pth, bj * n + q)],
                            want,
                            max_relative = 1e-14
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dense_covariance_factorizes_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 2 + (rng.random::<f64>() * 48.0) as usize;
            let theta = 10f64.powf(rng.random::<f64>() * 3.0 - 1.0);
            let rho = 1.9 * rng.random::<f64>() - 0.95;
            let s1 = 10f64.powf(rng.random::<f64>() * 2.0 - 1.0);
            let s2 = 10f64.powf(rng.random::<f64>() * 2.0 - 1.0);
            let p = Params::new(s1, s2, rho, theta).unwrap();
            let g = SamplingGrid::uniform_random(n, &mut rng).unwrap();
            assert!(
                dense_covariance(&p, &g).cholesky().is_some(),
                "covariance not PD for {p:?}"
            );
        }
    }
}
