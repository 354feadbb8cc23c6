//! Frictionless Merton consumption/investment problem in a Black–Scholes
//! market with constant coefficients.
//!
//! The value function is `g(t) U(w)` with power utility `U(w) = w^(1-R)/(1-R)`,
//! the optimal consumption rate is `g(t)^(-1/R) w` and the optimal holdings
//! keep the constant fractions `pi = (sigma sigma^T)^-1 (mu - r 1) / R` of
//! wealth in the risky assets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest accepted condition number of `sigma sigma^T`.
pub const MAX_COVARIANCE_CONDITION: f64 = 1e10;

/// Below this magnitude the constant `nu` is treated as zero.
pub const NU_DEGENERACY_TOL: f64 = 1e-12;

/// Constant-coefficient market: drifts, volatility rows and the interest rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    r: f64,
    covariance: DMatrix<f64>,
}

impl MarketParams {
    /// Builds a market from the drift vector, the volatility matrix given by
    /// rows (`sigma[j]` is the volatility vector of asset `j`) and the rate.
    pub fn new(mu: Vec<f64>, sigma: Vec<Vec<f64>>, r: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidParameter("market dimension must be >= 1".into()));
        }
        if sigma.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma.len() });
        }
        for row in &sigma {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
        }
        let sigma = DMatrix::from_fn(d, d, |i, j| sigma[i][j]);
        Self::from_matrices(DVector::from_vec(mu), sigma, r)
    }

    pub fn from_matrices(mu: DVector<f64>, sigma: DMatrix<f64>, r: f64) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidParameter("market dimension must be >= 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma.nrows() });
        }
        if !r.is_finite() || mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("market parameters must be finite".into()));
        }
        let covariance = &sigma * sigma.transpose();
        let eig = covariance.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        if min <= 0.0 || max / min > MAX_COVARIANCE_CONDITION {
            let condition = if min <= 0.0 { f64::INFINITY } else { max / min };
            return Err(Error::SingularCovariance { condition });
        }
        Ok(Self { mu, sigma, r, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn rate(&self) -> f64 {
        self.r
    }

    /// `sigma sigma^T`.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// `mu - r 1`.
    pub fn excess_return(&self) -> DVector<f64> {
        self.mu.map(|m| m - self.r)
    }

    /// Solves `(sigma sigma^T) x = b`.
    pub fn solve_covariance(&self, b: &DVector<f64>) -> DVector<f64> {
        // positive definiteness was checked at construction
        let chol = self.covariance.clone().cholesky().expect("covariance is SPD");
        chol.solve(b)
    }
}

/// Investor preferences and the impact model shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvestorImpactParams {
    /// Relative risk aversion `R`, strictly between 0 and 1.
    pub risk_aversion: f64,
    /// Horizon `T`.
    pub horizon: f64,
    /// Impact scale `kappa`.
    pub kappa: f64,
    /// Impact exponent `m > 2`.
    pub m: f64,
}

impl InvestorImpactParams {
    pub fn new(risk_aversion: f64, horizon: f64, kappa: f64, m: f64) -> Result<Self> {
        let p = Self { risk_aversion, horizon, kappa, m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.risk_aversion > 0.0 && self.risk_aversion < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "risk aversion must lie in (0, 1), got {}",
                self.risk_aversion
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.m > 2.0 && self.m.is_finite()) {
            return Err(Error::InvalidParameter(format!("impact exponent m must exceed 2, got {}", self.m)));
        }
        Ok(())
    }

    /// `m* = 1/(3m - 2)`: the utility loss is of order `eps^(2 m*)`.
    pub fn m_star(&self) -> f64 {
        1.0 / (3.0 * self.m - 2.0)
    }

    /// `alpha = 1/(m - 1)`: the power of the trading rate in the price shift.
    pub fn alpha(&self) -> f64 {
        1.0 / (self.m - 1.0)
    }
}

/// Power utility `c^(1-R)/(1-R)`.
#[inline]
pub fn utility(c: f64, risk_aversion: f64) -> f64 {
    c.max(0.0).powf(1.0 - risk_aversion) / (1.0 - risk_aversion)
}

/// `(1/R) (sigma sigma^T)^-1 (mu - r 1)`.
pub fn merton_fraction(market: &MarketParams, inv: &InvestorImpactParams) -> Result<DVector<f64>> {
    let pi = market.solve_covariance(&market.excess_return()) / inv.risk_aversion;
    Ok(pi)
}

/// True iff every fraction is positive and the fractions sum to less than one
/// (no short selling, no borrowing).
pub fn validate_simplex(pi: &[f64]) -> bool {
    !pi.is_empty() && pi.iter().all(|&p| p > 0.0) && pi.iter().sum::<f64>() < 1.0
}

/// The constant `nu = (R-1) (r/R + (mu-r1)^T (sigma sigma^T)^-1 (mu-r1) / (2R^2))`.
pub fn nu_constant(market: &MarketParams, inv: &InvestorImpactParams, pi: &DVector<f64>) -> Result<f64> {
    let r = inv.risk_aversion;
    // (mu - r1)^T (sigma sigma^T)^-1 (mu - r1) = R pi.(mu - r1)
    let quad = r * pi.dot(&market.excess_return());
    let nu = (r - 1.0) * (market.rate() / r + quad / (2.0 * r * r));
    if nu.abs() <= NU_DEGENERACY_TOL {
        return Err(Error::DegenerateNu { nu });
    }
    Ok(nu)
}

/// Time factor of the frictionless value function, `g(t) = G(t)^R` with
/// `G(t) = (1 + (nu-1) e^(-nu (T-t))) / nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GFunction {
    pub nu: f64,
    pub risk_aversion: f64,
    pub horizon: f64,
}

impl GFunction {
    pub fn new(nu: f64, risk_aversion: f64, horizon: f64) -> Result<Self> {
        if nu.abs() <= NU_DEGENERACY_TOL {
            return Err(Error::DegenerateNu { nu });
        }
        Ok(Self { nu, risk_aversion, horizon })
    }

    /// `G(t) = g(t)^(1/R)`.
    #[inline]
    pub fn base(&self, t: f64) -> f64 {
        (1.0 + (self.nu - 1.0) * (-self.nu * (self.horizon - t)).exp()) / self.nu
    }

    /// `g(t)`, checked.
    pub fn try_value(&self, t: f64) -> Result<f64> {
        let inner = self.base(t);
        if !(inner > 0.0) {
            return Err(Error::GDomain { inner });
        }
        Ok(inner.powf(self.risk_aversion))
    }

    /// `g(t)` for `t` in `[0, T]`, where the inner expression is always positive.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.base(t).powf(self.risk_aversion)
    }

    /// `g(t)^(-1/R)`, the frictionless consumption-to-wealth ratio.
    #[inline]
    pub fn inv_power(&self, t: f64) -> f64 {
        1.0 / self.base(t)
    }

    /// Exact `int_a^b g(u)^(-1/R) du`, using `G' = nu G - 1`.
    #[inline]
    pub fn integral_inv_power(&self, a: f64, b: f64) -> f64 {
        self.nu * (b - a) - (self.base(b) / self.base(a)).ln()
    }

    /// `g` tabulated on a time grid.
    pub fn tabulate(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.value(t)).collect()
    }
}

/// `g(t)` from its closed form.
pub fn g(t: f64, nu: f64, risk_aversion: f64, horizon: f64) -> Result<f64> {
    GFunction::new(nu, risk_aversion, horizon)?.try_value(t)
}

/// `V0(t, w) = g(t) U(w)`.
pub fn frictionless_value(t: f64, w: f64, g_fn: &GFunction, risk_aversion: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    Ok(g_fn.try_value(t)? * utility(w, risk_aversion))
}

/// `c0(t, w) = g(t)^(-1/R) w`.
pub fn optimal_consumption_rate(t: f64, w: f64, g_fn: &GFunction, risk_aversion: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    Ok(g_fn.try_value(t)?.powf(-1.0 / risk_aversion) * w)
}

/// Frictionless share holdings `h0_i = pi_i w / s_i`.
pub fn h0_shares(_t: f64, w: f64, s: &DVector<f64>, pi: &DVector<f64>) -> Result<DVector<f64>> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    if s.len() != pi.len() {
        return Err(Error::DimensionMismatch { expected: pi.len(), got: s.len() });
    }
    check_prices(s)?;
    Ok(DVector::from_fn(pi.len(), |i, _| pi[i] * w / s[i]))
}

pub(crate) fn check_prices(s: &DVector<f64>) -> Result<()> {
    for (index, &value) in s.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositivePrice { index, value });
        }
    }
    Ok(())
}

/// Everything downstream modules need from the frictionless problem.
#[derive(Debug, Clone)]
pub struct MertonSolution {
    pub pi: DVector<f64>,
    pub nu: f64,
    pub g: GFunction,
    /// `(mu - r1)^T (sigma sigma^T)^-1 (mu - r1)`.
    pub sharpe_sq: f64,
    pub market: MarketParams,
    pub inv: InvestorImpactParams,
}

impl MertonSolution {
    /// Solves the frictionless problem and rejects parameters whose Merton
    /// fractions leave the open simplex.
    pub fn new(market: &MarketParams, inv: &InvestorImpactParams) -> Result<Self> {
        inv.validate()?;
        let pi = merton_fraction(market, inv)?;
        if !validate_simplex(pi.as_slice()) {
            return Err(Error::InvalidParameter(format!(
                "Merton fractions {:?} are not strictly inside the simplex",
                pi.as_slice()
            )));
        }
        let nu = nu_constant(market, inv, &pi)?;
        let g = GFunction::new(nu, inv.risk_aversion, inv.horizon)?;
        let sharpe_sq = inv.risk_aversion * pi.dot(&market.excess_return());
        Ok(Self { pi, nu, g, sharpe_sq, market: market.clone(), inv: *inv })
    }

    pub fn dim(&self) -> usize {
        self.pi.len()
    }

    /// `pi* = min_i pi_i  min  (1 - sum pi)`.
    pub fn pi_star(&self) -> f64 {
        let min = self.pi.min();
        min.min(1.0 - self.pi.sum())
    }

    pub fn value(&self, t: f64, w: f64) -> f64 {
        self.g.value(t) * utility(w, self.inv.risk_aversion)
    }

    /// `V0_w = g(t) w^-R`.
    pub fn value_w(&self, t: f64, w: f64) -> f64 {
        self.g.value(t) * w.powf(-self.inv.risk_aversion)
    }

    /// `V0_ww = -R g(t) w^(-R-1)`.
    pub fn value_ww(&self, t: f64, w: f64) -> f64 {
        let r = self.inv.risk_aversion;
        -r * self.g.value(t) * w.powf(-r - 1.0)
    }

    pub fn consumption(&self, t: f64, w: f64) -> f64 {
        self.g.inv_power(t) * w
    }
}
