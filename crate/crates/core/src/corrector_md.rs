//! Multidimensional first corrector by factorization.
//!
//! With `𝔖 = (σσᵀ)^{1/2}` and `Σ` the matrix whose `i`-th column is
//! `π_i R 𝔖(π − e_i)`, the ergodic equation in the rescaled displacement `x`
//! separates along the coordinates of `x` once the diagonal entries
//! `D_j = ((Σ𝔖)ᵀ(Σ𝔖))_jj` are positive:
//!
//! ```text
//! ϖ̃(x) = Σ_j β_j w(γ_j x_j),    λ = λ_m Σ_j R / (2 γ_j²),
//! ```
//!
//! where `w` is the one-dimensional corrector. The full corrector in the
//! original variables is `ϖ(t,w,s,ξ) = g(t) w^{1−R+4m*} ϖ̃(𝔖(ξ×s)/w^{1+m*})`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corrector1d::Corrector1D;
use crate::error::{Error, Result};
use crate::merton::{check_prices, GFunction, InvestorImpactParams, MarketParams, MertonSolution};

/// Symmetric square root of a symmetric positive definite matrix.
pub fn matrix_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::NotSpd(format!("{}x{} matrix", a.nrows(), a.ncols())));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > 1e-12 * scale.max(1.0) {
        return Err(Error::NotSpd("matrix is not symmetric".into()));
    }
    let eig = a.clone().symmetric_eigen();
    if let Some(&min) = eig.eigenvalues.iter().min_by(|x, y| x.total_cmp(y)) {
        if !(min > 0.0) {
            return Err(Error::NotSpd(format!("smallest eigenvalue {min:.3e}")));
        }
    }
    let root = eig.eigenvalues.map(f64::sqrt);
    let b = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

/// Constants of the factorized solution, as exported in run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorConstants {
    pub lambda_m: f64,
    pub lambda: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub diag_ss: Vec<f64>,
}

/// Solved multidimensional corrector. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CorrectorMD {
    pub s_half: DMatrix<f64>,
    pub s_half_inv: DMatrix<f64>,
    /// Columns `π_i R 𝔖(π − e_i)`.
    pub sigma_mat: DMatrix<f64>,
    pub diag_ss: DVector<f64>,
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub lambda_m: f64,
    pub risk_aversion: f64,
    pub kappa: f64,
    pub m: f64,
    pub m_star: f64,
    pub c1d: Arc<Corrector1D>,
}

/// Builds `𝔖`, `Σ`, `γ`, `β` and `λ` for the target weights `pi`.
pub fn build_factorization(
    market: &MarketParams,
    inv: &InvestorImpactParams,
    pi: &DVector<f64>,
    c1d: Arc<Corrector1D>,
) -> Result<CorrectorMD> {
    inv.validate()?;
    let d = market.dim();
    if pi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: pi.len() });
    }
    if !crate::merton::validate_simplex(pi.as_slice()) {
        return Err(Error::InvalidParameter("target weights must lie strictly inside the simplex".into()));
    }
    if (c1d.m - inv.m).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "corrector solved for m = {} but the investor has m = {}",
            c1d.m, inv.m
        )));
    }
    let (r_a, kappa, m) = (inv.risk_aversion, inv.kappa, inv.m);
    let ms = inv.m_star();
    let s_half = matrix_sqrt_spd(market.covariance())?;
    let s_half_inv = s_half
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotSpd("square root is not invertible".into()))?;
    let mut sigma_mat = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut v = pi.clone();
        v[i] -= 1.0;
        sigma_mat.set_column(i, &((&s_half * v) * (pi[i] * r_a)));
    }
    let ss = &sigma_mat * &s_half;
    let gram = ss.transpose() * &ss;
    let diag_ss = gram.diagonal();
    for (index, &value) in diag_ss.iter().enumerate() {
        if !(value > 0.0) {
            return Err(Error::NonPositiveDiagonal { index, value });
        }
    }
    let lead = 2.0 * (m / (kappa * (m - 1.0))).powf(m - 1.0) * r_a.powf(3.0 * m - 1.0);
    let gamma = diag_ss.map(|dj| (lead / dj.powf(m)).powf(ms));
    let beta = diag_ss.map(|dj| {
        2f64.powf(-4.0 * ms)
            * dj.powf(4.0 * m * ms - 1.0)
            * r_a.powf(-1.0 - 4.0 * ms)
            * (kappa * (m - 1.0) / m).powf(4.0 * (m - 1.0) * ms)
    });
    let lambda_m = c1d.lambda_m;
    let lambda = lambda_m * gamma.iter().map(|g| r_a / (2.0 * g * g)).sum::<f64>();
    Ok(CorrectorMD {
        s_half,
        s_half_inv,
        sigma_mat,
        diag_ss,
        gamma,
        beta,
        lambda,
        lambda_m,
        risk_aversion: r_a,
        kappa,
        m,
        m_star: ms,
        c1d,
    })
}

impl CorrectorMD {
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn constants(&self) -> FactorConstants {
        FactorConstants {
            lambda_m: self.lambda_m,
            lambda: self.lambda,
            gamma: self.gamma.iter().copied().collect(),
            beta: self.beta.iter().copied().collect(),
            diag_ss: self.diag_ss.iter().copied().collect(),
        }
    }

    /// Half-width of the box of `x` mapped inside the tabulated 1-D grid.
    pub fn grid_box(&self) -> f64 {
        self.c1d.x_max() / self.gamma.max()
    }

    /// Half-width of the box mapped inside the region where the 1-D table
    /// has reached its asymptotic regime.
    pub fn core_box(&self) -> f64 {
        self.c1d.x_core / self.gamma.max()
    }

    /// `ϖ̃(x) = Σ β_j w(γ_j x_j)`.
    pub fn varpi_tilde(&self, x: &DVector<f64>) -> f64 {
        (0..self.dim()).map(|j| self.beta[j] * self.c1d.eval_w(self.gamma[j] * x[j])).sum()
    }

    pub fn varpi_tilde_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| self.beta[j] * self.gamma[j] * self.c1d.eval_dw(self.gamma[j] * x[j]))
    }

    /// Diagonal of the (diagonal) Hessian of `ϖ̃`.
    pub fn varpi_tilde_hess_diag(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| {
            self.beta[j] * self.gamma[j] * self.gamma[j] * self.c1d.eval_d2w(self.gamma[j] * x[j])
        })
    }

    /// Rescaled displacement `𝔖(ξ×s)/w^{1+m*}` of a share displacement `ξ`.
    pub fn xi_to_x(&self, w: f64, s: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        (&self.s_half * xi.component_mul(s)) / w.powf(1.0 + self.m_star)
    }

    fn exponents(&self) -> (f64, f64) {
        let r = self.risk_aversion;
        (-1.0 - self.m_star, 1.0 - r + 4.0 * self.m_star)
    }

    /// `ϖ(t,w,s,ξ) = g(t) w^{1−R+4m*} ϖ̃(𝔖(ξ×s)/w^{1+m*})`.
    pub fn varpi_full(&self, g_fn: &GFunction, t: f64, w: f64, s: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        self.check_state(w, s, xi)?;
        let (_, b2) = self.exponents();
        Ok(g_fn.try_value(t)? * w.powf(b2) * self.varpi_tilde(&self.xi_to_x(w, s, xi)))
    }

    /// `∂ϖ/∂ξ = g w^{b2+b1} diag(s) 𝔖 ∇ϖ̃(x)` with `b1 = −1−m*`, `b2 = 1−R+4m*`.
    pub fn varpi_xi_grad(
        &self,
        g_fn: &GFunction,
        t: f64,
        w: f64,
        s: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_state(w, s, xi)?;
        let (b1, b2) = self.exponents();
        let x = self.xi_to_x(w, s, xi);
        let scale = g_fn.try_value(t)? * w.powf(b2 + b1);
        Ok((&self.s_half * self.varpi_tilde_grad(&x)).component_mul(s) * scale)
    }

    /// `∂²ϖ/∂ξ² = g w^{b2+2b1} diag(s) 𝔖 H 𝔖 diag(s)`.
    pub fn varpi_xi_hess(
        &self,
        g_fn: &GFunction,
        t: f64,
        w: f64,
        s: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_state(w, s, xi)?;
        let (b1, b2) = self.exponents();
        let x = self.xi_to_x(w, s, xi);
        let scale = g_fn.try_value(t)? * w.powf(b2 + 2.0 * b1);
        let ds = DMatrix::from_diagonal(s);
        let h = DMatrix::from_diagonal(&self.varpi_tilde_hess_diag(&x));
        Ok(&ds * &self.s_half * h * &self.s_half * &ds * scale)
    }

    fn check_state(&self, w: f64, s: &DVector<f64>, xi: &DVector<f64>) -> Result<()> {
        if !(w > 0.0) {
            return Err(Error::NonPositiveWealth(w));
        }
        if s.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: s.len() });
        }
        if xi.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: xi.len() });
        }
        check_prices(s)
    }

    /// Left-hand side of the separated ergodic equation at `x`.
    pub fn first_corrector_lhs(&self, x: &DVector<f64>) -> f64 {
        let (r, m) = (self.risk_aversion, self.m);
        let grad = self.varpi_tilde_grad(x);
        let hess = self.varpi_tilde_hess_diag(x);
        let friction: f64 = grad.iter().map(|&p| crate::corrector1d::abs_pow(p, m)).sum();
        let trace: f64 = hess.iter().zip(self.diag_ss.iter()).map(|(h, dj)| h * dj).sum();
        0.5 * r * x.norm_squared() - self.kappa.powf(1.0 - m) / m * friction + trace / (2.0 * r * r)
    }
}

/// `c^{h⁰}_{ij} = w²π_iπ_j/(R²s_is_j) (μ−r𝟙−Rσσᵀe_i)ᵀ(σσᵀ)^{-1}(μ−r𝟙−Rσσᵀe_j)`.
pub fn ch0_matrix(
    pi: &DVector<f64>,
    market: &MarketParams,
    inv: &InvestorImpactParams,
    _t: f64,
    w: f64,
    s: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = market.dim();
    if pi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: pi.len() });
    }
    if s.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: s.len() });
    }
    check_prices(s)?;
    let r_a = inv.risk_aversion;
    let excess = market.excess_return();
    let cov = market.covariance();
    let mut v = DMatrix::zeros(d, d);
    for i in 0..d {
        v.set_column(i, &(&excess - cov.column(i) * r_a));
    }
    let mut solved = DMatrix::zeros(d, d);
    for i in 0..d {
        solved.set_column(i, &market.solve_covariance(&v.column(i).into_owned()));
    }
    let inner = v.transpose() * solved;
    let mut c = DMatrix::from_fn(d, d, |i, j| w * w * pi[i] * pi[j] / (r_a * r_a * s[i] * s[j]) * inner[(i, j)]);
    c = (&c + c.transpose()) * 0.5;
    Ok(c)
}

/// Largest `|LHS(x) − λ|` of the separated ergodic equation over the samples.
pub fn first_corrector_residual(cmd: &CorrectorMD, x_samples: &[DVector<f64>]) -> f64 {
    x_samples
        .iter()
        .map(|x| (cmd.first_corrector_lhs(x) - cmd.lambda).abs())
        .fold(0.0, f64::max)
}

/// Source `a(t,w) = λ g(t) w^{3mm*−R}` of the full first corrector equation.
pub fn corrector_source(cmd: &CorrectorMD, g_fn: &GFunction, t: f64, w: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    let beta_exp = 3.0 * cmd.m * cmd.m_star - cmd.risk_aversion;
    Ok(cmd.lambda * g_fn.try_value(t)? * w.powf(beta_exp))
}

/// Left-hand side of the unfactorized first corrector equation in the
/// original variables, together with its source term.
pub fn full_corrector_terms(
    cmd: &CorrectorMD,
    merton: &MertonSolution,
    t: f64,
    w: f64,
    s: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<(f64, f64)> {
    let m = cmd.m;
    let g_fn = &merton.g;
    let v_w = merton.value_w(t, w);
    let v_ww = merton.value_ww(t, w);
    let xs = xi.component_mul(s);
    let diffusion = (merton.market.sigma().transpose() * &xs).norm_squared();
    let grad = cmd.varpi_xi_grad(g_fn, t, w, s, xi)?;
    let z = &cmd.s_half_inv * grad.component_div(s);
    let friction: f64 = z.iter().map(|&v| crate::corrector1d::abs_pow(v, m)).sum();
    let hess = cmd.varpi_xi_hess(g_fn, t, w, s, xi)?;
    let ch0 = ch0_matrix(&merton.pi, &merton.market, &merton.inv, t, w, s)?;
    let trace = (ch0 * hess).trace();
    let lhs = -0.5 * v_ww * diffusion - v_w.powf(1.0 - m) / m * cmd.kappa.powf(1.0 - m) * friction + 0.5 * trace;
    Ok((lhs, corrector_source(cmd, g_fn, t, w)?))
}

/// Largest relative residual `|LHS − a|/|a|` of the unfactorized equation
/// over the share displacements `xi_samples` at one `(t, w, s)`.
pub fn full_corrector_residual(
    cmd: &CorrectorMD,
    merton: &MertonSolution,
    t: f64,
    w: f64,
    s: &DVector<f64>,
    xi_samples: &[DVector<f64>],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for xi in xi_samples {
        let (lhs, a) = full_corrector_terms(cmd, merton, t, w, s, xi)?;
        worst = worst.max((lhs - a).abs() / a.abs());
    }
    Ok(worst)
}
