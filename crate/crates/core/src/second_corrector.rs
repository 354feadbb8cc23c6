//! Second corrector: the leading-order utility loss `u(t,w) = λ w^β ḡ(t)`
//! with `β = 3mm* − R`, where `ḡ` solves the linear backward equation
//!
//! ```text
//! ḡ' + ḡ (−β g^{−1/R} + k) = −g,    ḡ(T) = 0,
//! k = βr + (β/R + β(β−1)/(2R²)) (μ−r𝟙)ᵀ(σσᵀ)^{-1}(μ−r𝟙).
//! ```
//!
//! `k − β g^{−1/R}` is the growth rate of `E[(W⁰)^β]` along frictionless
//! wealth, so `u` is also the expected integral of the source
//! `a(t,w) = λ g(t) w^β` along those paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_sim::{frictionless_source_integrals, ExecMode};
use crate::merton::{GFunction, MertonSolution};
use crate::ode::{dopri5_at, OdeOptions};

/// Absolute tolerance of the outer adaptive Simpson rule.
pub const QUAD_TOL: f64 = 1e-13;
const QUAD_MAX_DEPTH: u32 = 40;
const QUAD_MAX_EVALS: usize = 2_000_000;

/// The linear equation for `ḡ` with a given exponent `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarG {
    pub g: GFunction,
    pub beta: f64,
    /// Constant part `k` of the discount rate.
    pub k: f64,
}

impl BarG {
    pub fn new(merton: &MertonSolution, beta: f64) -> Self {
        let r_a = merton.inv.risk_aversion;
        let k = beta * merton.market.rate() + (beta / r_a + beta * (beta - 1.0) / (2.0 * r_a * r_a)) * merton.sharpe_sq;
        Self { g: merton.g, beta, k }
    }

    fn horizon(&self) -> f64 {
        self.g.horizon
    }

    /// Rate `c(t) = −β g(t)^{−1/R} + k`.
    pub fn rate(&self, t: f64) -> f64 {
        -self.beta * self.g.inv_power(t) + self.k
    }

    /// `∫_t^s c(u) du`, exact.
    pub fn rate_integral(&self, t: f64, s: f64) -> f64 {
        self.k * (s - t) - self.beta * self.g.integral_inv_power(t, s)
    }

    /// `ḡ(t) = ∫_t^T g(s) exp(∫_t^s c) ds` by adaptive Simpson on the outer
    /// integral; the inner integral is exact.
    pub fn closed_form(&self, t: f64) -> Result<f64> {
        let horizon = self.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::InvalidParameter(format!("t = {t} outside [0, {horizon}]")));
        }
        if t == horizon {
            return Ok(0.0);
        }
        let f = |s: f64| self.g.value(s) * self.rate_integral(t, s).exp();
        adaptive_simpson(&f, t, horizon, QUAD_TOL)
    }

    /// Backward integration from `ḡ(T) = 0` to every point of `grid`
    /// (increasing, within `[0, T]`).
    pub fn ode(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let horizon = self.horizon();
        if grid.windows(2).any(|p| !(p[1] > p[0])) || grid[0] < 0.0 || *grid.last().unwrap() > horizon {
            return Err(Error::InvalidParameter("grid must increase within [0, T]".into()));
        }
        let points: Vec<f64> = grid.iter().rev().copied().collect();
        let opts = OdeOptions { rtol: 1e-10, atol: 1e-13, h_init: 1e-4, ..Default::default() };
        let mut vals = dopri5_at(|t, y| self.rhs(t, y), horizon, 0.0, &points, opts)?;
        vals.reverse();
        Ok(vals)
    }

    /// `ḡ' = −g − c ḡ`.
    pub fn rhs(&self, t: f64, y: f64) -> f64 {
        -self.g.value(t) - self.rate(t) * y
    }
}

/// Adaptive Simpson quadrature with an absolute tolerance; fails once the
/// recursion depth or the evaluation budget is exhausted.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
        evals: &mut usize,
    ) -> Option<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        *evals += 2;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Some(left + right + delta / 15.0);
        }
        if depth == 0 || *evals > QUAD_MAX_EVALS {
            return None;
        }
        Some(
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, evals)?
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, evals)?,
        )
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut evals = 3;
    rec(f, a, b, fa, fm, fb, whole, tol, QUAD_MAX_DEPTH, &mut evals).ok_or(Error::QuadratureFailure { a, b })
}

/// `u`, `a` and `ḡ` for a solved corrector constant `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondCorrector {
    pub beta_exp: f64,
    pub lambda: f64,
    pub bar_g: BarG,
}

impl SecondCorrector {
    pub fn new(merton: &MertonSolution, lambda: f64) -> Self {
        let m = merton.inv.m;
        let ms = merton.inv.m_star();
        let beta_exp = 3.0 * m * ms - merton.inv.risk_aversion;
        debug_assert!((beta_exp - (1.0 + 2.0 * ms - merton.inv.risk_aversion)).abs() < 1e-12);
        Self { beta_exp, lambda, bar_g: BarG::new(merton, beta_exp) }
    }

    pub fn bar_g_closed_form(&self, t: f64) -> Result<f64> {
        self.bar_g.closed_form(t)
    }

    pub fn bar_g_ode(&self, grid: &[f64]) -> Result<Vec<f64>> {
        self.bar_g.ode(grid)
    }

    /// `u(t,w) = λ w^{β} ḡ(t)`.
    pub fn u_value(&self, t: f64, w: f64) -> Result<f64> {
        if !(w > 0.0) {
            return Err(Error::NonPositiveWealth(w));
        }
        Ok(self.lambda * w.powf(self.beta_exp) * self.bar_g_closed_form(t)?)
    }

    /// `a(t,w) = λ g(t) w^{β}`.
    pub fn a_source(&self, t: f64, w: f64) -> Result<f64> {
        a_source(t, w, &self.bar_g.g, self.lambda, self.beta_exp)
    }

    /// Writes `t, bar_g` on a uniform grid of `n + 1` points.
    pub fn write_bar_g_csv<W: std::io::Write>(&self, n: usize, out: W) -> Result<()> {
        let horizon = self.bar_g.g.horizon;
        let grid: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n.max(1) as f64).collect();
        let vals = self.bar_g_ode(&grid)?;
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "bar_g"])?;
        for (t, v) in grid.iter().zip(vals) {
            wtr.write_record(&[t.to_string(), v.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn a_source(t: f64, w: f64, g_fn: &GFunction, lambda: f64, beta_exp: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    Ok(lambda * g_fn.try_value(t)? * w.powf(beta_exp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKac {
    pub mc_estimate: f64,
    pub std_err: f64,
    pub analytic: f64,
    /// `|mc − analytic| / std_err`; zero when both sides vanish.
    pub z_score: f64,
}

/// Monte-Carlo estimate of `E[∫_t^T a(r, W⁰_r) dr]` from `(t, w)` against
/// `u(t, w)`.
#[allow(clippy::too_many_arguments)]
pub fn feynman_kac_check(
    sc: &SecondCorrector,
    merton: &MertonSolution,
    t: f64,
    w: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<FeynmanKac> {
    if n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be positive".into()));
    }
    let analytic = sc.u_value(t, w)?;
    let samples = frictionless_source_integrals(merton, sc.lambda, sc.beta_exp, t, w, n_steps, n_paths, seed, mode);
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std_err = (var / n).sqrt();
    let diff = (mean - analytic).abs();
    let z_score = if diff == 0.0 { 0.0 } else { diff / std_err };
    Ok(FeynmanKac { mc_estimate: mean, std_err, analytic, z_score })
}
