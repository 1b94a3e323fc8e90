//! Least-squares FIR identification and the F-quantile confidence ellipsoid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::lti::Dataset;

/// Pivots of the R factor below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Regressor matrix with rows `[u_t, u_{t-1}, ..., u_{t-n+1}]`, zero pre-windowed.
pub fn build_regressor(u: &[f64], order: usize, rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, order, |t, i| if i <= t && t - i < u.len() { u[t - i] } else { 0.0 })
}

/// Least-squares FIR estimate with its estimated covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FirEstimate {
    g_hat: DVector<f64>,
    /// Lower Cholesky factor of the estimated covariance.
    sigma_chol: DMatrix<f64>,
    sigma_v_sq_hat: f64,
    samples: usize,
}

impl FirEstimate {
    pub fn g_hat(&self) -> &DVector<f64> {
        &self.g_hat
    }

    pub fn order(&self) -> usize {
        self.g_hat.len()
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn sigma_v_sq_hat(&self) -> f64 {
        self.sigma_v_sq_hat
    }

    pub fn sigma_chol(&self) -> &DMatrix<f64> {
        &self.sigma_chol
    }

    /// Estimated covariance `sigma_v^2 (Phi^T Phi)^{-1}`.
    pub fn sigma_hat(&self) -> DMatrix<f64> {
        &self.sigma_chol * self.sigma_chol.transpose()
    }

    /// Squared Mahalanobis distance `(g - g_hat)^T Sigma^{-1} (g - g_hat)`.
    pub fn mahalanobis_sq(&self, g: &[f64]) -> Result<f64> {
        let n = self.order();
        if g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: g.len(),
            });
        }
        let diff = DVector::from_column_slice(g) - &self.g_hat;
        if self.sigma_v_sq_hat <= 0.0 {
            return Ok(if diff.iter().all(|&d| d == 0.0) { 0.0 } else { f64::INFINITY });
        }
        let z = self
            .sigma_chol
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::InvalidArgument("singular covariance factor".into()))?;
        Ok(z.norm_squared())
    }

    /// Rebuilds an estimate from its serialized parts.
    pub fn from_parts(
        g_hat: Vec<f64>,
        sigma_chol: DMatrix<f64>,
        sigma_v_sq_hat: f64,
        samples: usize,
    ) -> Result<Self> {
        let n = g_hat.len();
        if sigma_chol.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: sigma_chol.nrows(),
            });
        }
        if samples <= n + 1 {
            return Err(Error::InsufficientData { samples, order: n });
        }
        Ok(FirEstimate {
            g_hat: DVector::from_vec(g_hat),
            sigma_chol: sigma_chol.lower_triangle(),
            sigma_v_sq_hat,
            samples,
        })
    }
}

/// Fits an order-`order` FIR model by QR-based least squares.
pub fn least_squares_fir(data: &Dataset, order: usize) -> Result<FirEstimate> {
    let samples = data.len();
    if order == 0 {
        return Err(Error::InvalidArgument("FIR order must be positive".into()));
    }
    if samples <= order + 1 {
        return Err(Error::InsufficientData { samples, order });
    }
    let phi = build_regressor(&data.u, order, samples);
    let y = DVector::from_column_slice(&data.y);

    let qr = phi.clone().qr();
    let r = qr.r();
    let max_pivot = r.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rank = r
        .diagonal()
        .iter()
        .filter(|x| x.abs() > RANK_TOL * max_pivot)
        .count();
    if rank < order || max_pivot == 0.0 {
        return Err(Error::InsufficientExcitation { rank, order });
    }

    let qty = qr.q().transpose() * &y;
    let g_hat = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::InsufficientExcitation { rank, order })?;
    let resid = &y - &phi * &g_hat;
    let sigma_v_sq_hat = resid.norm_squared() / (samples - order - 1) as f64;

    // (Phi^T Phi)^{-1} = R^{-1} R^{-T}
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(order, order))
        .ok_or(Error::InsufficientExcitation { rank, order })?;
    let mut p = &r_inv * r_inv.transpose();
    p = (&p + p.transpose()) * 0.5;
    let p_chol = p
        .cholesky()
        .ok_or(Error::InsufficientExcitation { rank, order })?
        .unpack();
    let sigma_chol = p_chol * sigma_v_sq_hat.sqrt();

    Ok(FirEstimate {
        g_hat,
        sigma_chol,
        sigma_v_sq_hat,
        samples,
    })
}

/// CDF of the F(d1, d2) distribution.
pub fn f_cdf(x: f64, d1: usize, d2: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let (a, b) = (d1 as f64, d2 as f64);
    let z = a * x / (a * x + b);
    beta_reg(a / 2.0, b / 2.0, z)
}

/// `x` with `F(d1, d2)` CDF equal to `prob`, by bisection.
pub fn f_quantile(prob: f64, d1: usize, d2: usize) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile probability must lie in (0, 1), got {prob}"
        )));
    }
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidArgument(
            "F distribution degrees of freedom must be positive".into(),
        ));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f_cdf(hi, d1, d2) < prob {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::InvalidArgument(
                "F quantile bracket diverged".into(),
            ));
        }
    }
    for _ in 0..400 {
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f_cdf(mid, d1, d2) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How the ellipsoid radius is derived from the F quantile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiusRule {
    /// `n * F_{1-alpha}(n, N - n)`: the classical finite-sample ellipsoid.
    #[default]
    OrderScaled,
    /// Bare `F_{1-alpha}(n, N - n)`.
    Bare,
}

/// Confidence ellipsoid `{g : (g - g_hat)^T Sigma^{-1} (g - g_hat) <= radius_sq}`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    center: FirEstimate,
    radius_sq: f64,
    alpha: f64,
}

impl UncertaintySet {
    pub fn with_radius(center: FirEstimate, radius_sq: f64, alpha: f64) -> Result<Self> {
        if !(radius_sq > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "radius must be positive, got {radius_sq}"
            )));
        }
        Ok(UncertaintySet {
            center,
            radius_sq,
            alpha,
        })
    }

    pub fn center(&self) -> &FirEstimate {
        &self.center
    }

    pub fn radius_sq(&self) -> f64 {
        self.radius_sq
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn order(&self) -> usize {
        self.center.order()
    }

    pub fn contains(&self, g: &[f64]) -> Result<bool> {
        Ok(self.center.mahalanobis_sq(g)? <= self.radius_sq)
    }
}

/// Ellipsoid covering the true FIR coefficients with probability `1 - alpha`.
pub fn uncertainty_set(est: FirEstimate, alpha: f64, rule: RadiusRule) -> Result<UncertaintySet> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let n = est.order();
    let q = f_quantile(1.0 - alpha, n, est.samples() - n)?;
    let radius_sq = match rule {
        RadiusRule::OrderScaled => n as f64 * q,
        RadiusRule::Bare => q,
    };
    UncertaintySet::with_radius(est, radius_sq, alpha)
}

/// Ellipsoid membership test.
pub fn membership(uset: &UncertaintySet, g: &[f64]) -> Result<bool> {
    uset.contains(g)
}

/// JSON form of an identified uncertainty set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateFile {
    pub g_hat: Vec<f64>,
    /// Rows of the lower Cholesky factor of the covariance estimate.
    pub sigma_chol: Vec<Vec<f64>>,
    pub sigma_v_sq_hat: f64,
    pub n: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    pub alpha: f64,
    pub radius_sq: f64,
}

impl From<&UncertaintySet> for EstimateFile {
    fn from(u: &UncertaintySet) -> Self {
        let c = u.center();
        let l = c.sigma_chol();
        EstimateFile {
            g_hat: c.g_hat().iter().copied().collect(),
            sigma_chol: (0..l.nrows())
                .map(|i| (0..=i).map(|j| l[(i, j)]).collect())
                .collect(),
            sigma_v_sq_hat: c.sigma_v_sq_hat(),
            n: c.order(),
            samples: c.samples(),
            alpha: u.alpha(),
            radius_sq: u.radius_sq(),
        }
    }
}

impl EstimateFile {
    pub fn into_set(self) -> Result<UncertaintySet> {
        let n = self.n;
        if self.g_hat.len() != n || self.sigma_chol.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.g_hat.len(),
            });
        }
        let mut l = DMatrix::zeros(n, n);
        for (i, row) in self.sigma_chol.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::DimensionMismatch {
                    expected: i + 1,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                l[(i, j)] = v;
            }
        }
        let est = FirEstimate::from_parts(self.g_hat, l, self.sigma_v_sq_hat, self.samples)?;
        UncertaintySet::with_radius(est, self.radius_sq, self.alpha)
    }
}
