//! Monte-Carlo simulation of frictional wealth under the candidate strategy.
//!
//! Prices follow a multi-asset geometric Brownian motion sampled exactly on
//! the time grid. The investor trades at the feedback rate given by the
//! corrector, consumes at the frictionless rate, and liquidates linearly over
//! a window of length `ε^{2m*}` once the portfolio leaves an admissibility
//! band or the horizon approaches. Each path carries a coupled frictionless
//! wealth process driven by the same noise, which gives a low-variance paired
//! estimate of the utility loss.
//!
//! Paths are independent; path `i` draws from the ChaCha8 stream `i` of the
//! configured seed, and results are reduced in path order, so the output does
//! not depend on the execution mode or the thread count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corrector1d::Corrector1D;
use crate::corrector_md::{build_factorization, CorrectorMD};
use crate::error::{Error, Result};
use crate::impact::{signed_pow, ImpactModel};
use crate::merton::{check_prices, utility, InvestorImpactParams, MarketParams, MertonSolution};

/// Everything a path needs: the frictionless solution, the corrector and the
/// impact model, sharing `𝔖`.
#[derive(Debug, Clone)]
pub struct Model {
    pub merton: MertonSolution,
    pub cmd: CorrectorMD,
    pub impact: ImpactModel,
}

impl Model {
    pub fn new(market: &MarketParams, inv: &InvestorImpactParams, c1d: Arc<Corrector1D>) -> Result<Self> {
        let merton = MertonSolution::new(market, inv)?;
        let cmd = build_factorization(market, inv, &merton.pi, c1d)?;
        let impact = ImpactModel::from_corrector(&cmd);
        Ok(Self { merton, cmd, impact })
    }

    pub fn dim(&self) -> usize {
        self.merton.dim()
    }

    pub fn m_star(&self) -> f64 {
        self.merton.inv.m_star()
    }

    pub fn horizon(&self) -> f64 {
        self.merton.inv.horizon
    }
}

/// Initial holdings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// Frictionless target `h⁰(t₀, w₀, s₀)`.
    #[default]
    Target,
    /// Explicit share vector.
    Shares(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Sequential,
    /// Rayon data parallelism; identical to `Sequential` without the
    /// `parallel` feature.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Impact scale; zero selects exact frictionless simulation.
    pub epsilon: f64,
    pub n_steps_base: usize,
    pub dt_factor: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub t0: f64,
    pub w0: f64,
    pub s0: Vec<f64>,
    pub start: StartMode,
    /// Extra halvings of the time step.
    pub refine: u32,
    /// Dyadic level of the driving noise; `None` uses the step level.
    /// Runs sharing a level see the same Brownian path.
    pub noise_level: Option<u32>,
    pub guard_mult: f64,
    pub cash_floor_mult: f64,
    /// Paths stop once wealth falls to this fraction of `w0`.
    pub wealth_floor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.025,
            n_steps_base: 1000,
            dt_factor: 0.1,
            n_paths: 1000,
            seed: 42,
            t0: 0.0,
            w0: 1.0,
            s0: vec![1.0, 1.0],
            start: StartMode::Target,
            refine: 0,
            noise_level: None,
            guard_mult: 1.0,
            cash_floor_mult: 0.75,
            wealth_floor: 1e-8,
        }
    }
}

/// Uniform grid on `[t0, T]` with `n_base 2^level` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub level: u32,
    pub n_steps: usize,
    pub dt: f64,
    /// Fine noise increments summed per step.
    pub noise_sub: usize,
}

impl SimConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let d = model.dim();
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.n_steps_base == 0 || self.n_paths == 0 {
            return bad("n_steps_base and n_paths must be positive".into());
        }
        if !(self.dt_factor > 0.0) {
            return bad(format!("dt_factor must be positive, got {}", self.dt_factor));
        }
        if !(self.t0 >= 0.0 && self.t0 < model.horizon()) {
            return bad(format!("t0 must lie in [0, T), got {}", self.t0));
        }
        if !(self.w0 > 0.0) {
            return Err(Error::NonPositiveWealth(self.w0));
        }
        if self.s0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.s0.len() });
        }
        check_prices(&DVector::from_column_slice(&self.s0))?;
        if let StartMode::Shares(h) = &self.start {
            if h.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: h.len() });
            }
        }
        Ok(())
    }

    /// Smallest dyadic level whose step resolves `dt_factor ε^{2m*}`, plus
    /// `refine`.
    pub fn step_level(&self, m_star: f64, horizon: f64) -> u32 {
        let span = horizon - self.t0;
        let mut level = 0;
        if self.epsilon > 0.0 {
            let target = self.dt_factor * self.epsilon.powf(2.0 * m_star);
            while span / (self.n_steps_base as f64 * 2f64.powi(level as i32)) > target && level < 30 {
                level += 1;
            }
        }
        level + self.refine
    }

    pub fn time_grid(&self, m_star: f64, horizon: f64) -> TimeGrid {
        let level = self.step_level(m_star, horizon);
        let noise = self.noise_level.unwrap_or(level).max(level);
        let n_steps = self.n_steps_base << level;
        TimeGrid { level, n_steps, dt: (horizon - self.t0) / n_steps as f64, noise_sub: 1 << (noise - level) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    None,
    WeightBreach,
    WealthFloor,
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorAction {
    Continue,
    StartLiquidation,
}

/// Linear liquidation schedule started at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Liquidation {
    pub start: f64,
    pub end: f64,
    pub rate: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub s: DVector<f64>,
    pub cash: f64,
    pub h: DVector<f64>,
    /// Marked-to-market wealth `cash + H·S`.
    pub w_eps: f64,
    pub utility_acc: f64,
    pub liquidation: Option<Liquidation>,
    pub stopped_reason: StopReason,
}

impl PathState {
    pub fn new(t: f64, w: f64, s: DVector<f64>, h: DVector<f64>) -> Self {
        let cash = w - h.dot(&s);
        Self { t, s, cash, h, w_eps: w, utility_acc: 0.0, liquidation: None, stopped_reason: StopReason::None }
    }

    pub fn liquidating(&self) -> bool {
        self.liquidation.is_some()
    }

    pub fn weights(&self) -> DVector<f64> {
        self.h.component_mul(&self.s) / self.w_eps
    }
}

/// Exact log-normal price step `S_j exp((μ_j − |σ^j|²/2)dt + σ^j·dB)`.
pub fn step_prices(s: &DVector<f64>, market: &MarketParams, dt: f64, db: &DVector<f64>) -> DVector<f64> {
    let sigma = market.sigma();
    let mu = market.mu();
    DVector::from_fn(s.len(), |j, _| {
        let row = sigma.row(j);
        let drift = mu[j] - 0.5 * row.norm_squared();
        s[j] * (drift * dt + row.dot(&db.transpose())).exp()
    })
}

/// `X = 𝔖(H×S/W − π)/(εW)^{m*}`.
pub fn rescaled_displacement(
    w: f64,
    s: &DVector<f64>,
    h: &DVector<f64>,
    epsilon: f64,
    pi: &DVector<f64>,
    s_half: &DMatrix<f64>,
    m_star: f64,
) -> Result<DVector<f64>> {
    if !(w > 0.0) {
        return Err(Error::NonPositiveWealth(w));
    }
    let dev = h.component_mul(s) / w - pi;
    Ok((s_half * dev) / (epsilon * w).powf(m_star))
}

/// Feedback trading rate
/// `θ_k = −(wε)^{−m*} (w/(κ^{m−1}s_k)) Σ_i |ϖ̃_{x_i}|^{m−2}ϖ̃_{x_i} (𝔖^{-1})_{ik}`
/// evaluated at the rescaled displacement.
pub fn candidate_rate(
    w: f64,
    s: &DVector<f64>,
    h: &DVector<f64>,
    epsilon: f64,
    pi: &DVector<f64>,
    cmd: &CorrectorMD,
) -> Result<DVector<f64>> {
    let x = rescaled_displacement(w, s, h, epsilon, pi, &cmd.s_half, cmd.m_star)?;
    let grad = cmd.varpi_tilde_grad(&x).map(|p| signed_pow(p, cmd.m - 1.0));
    let mixed = cmd.s_half_inv.transpose() * grad;
    let lead = -(w * epsilon).powf(-cmd.m_star) * w * cmd.kappa.powf(1.0 - cmd.m);
    Ok(mixed.component_div(s) * lead)
}

/// The same rate written through the dual friction,
/// `ε^{−1} Φ_x(S, −ε^{3m*} ϖ_ξ / V⁰_w)` at the share displacement
/// `ξ = (H − h⁰) ε^{−m*}`.
pub fn candidate_rate_dual(t: f64, w: f64, s: &DVector<f64>, h: &DVector<f64>, epsilon: f64, model: &Model) -> Result<DVector<f64>> {
    let ms = model.m_star();
    let h0 = crate::merton::h0_shares(t, w, s, &model.merton.pi)?;
    let xi = (h - h0) * epsilon.powf(-ms);
    let grad = model.cmd.varpi_xi_grad(&model.merton.g, t, w, s, &xi)?;
    let arg = grad * (-epsilon.powf(3.0 * ms) / model.merton.value_w(t, w));
    Ok(model.impact.phi_grad(s, &arg)? / epsilon)
}

/// Weight-band and cash-floor check with `π* = min_i π_i ∧ (1 − Σπ_i)`.
pub fn admissibility_monitor(
    state: &PathState,
    pi: &DVector<f64>,
    guard_mult: f64,
    cash_floor_mult: f64,
) -> MonitorAction {
    let d = pi.len() as f64;
    let pi_star = pi.min().min(1.0 - pi.sum());
    let band = pi_star / (4.0 * d) * guard_mult;
    if !(state.w_eps > 0.0) {
        return MonitorAction::StartLiquidation;
    }
    let weights = state.weights();
    let breach = weights.iter().zip(pi.iter()).any(|(w, p)| !((w - p).abs() <= band));
    if breach || state.cash / state.w_eps < pi_star * cash_floor_mult {
        MonitorAction::StartLiquidation
    } else {
        MonitorAction::Continue
    }
}

/// Starts selling `H_τ` at constant rate over `[t, t + window]`, truncated at
/// `horizon` (the rate grows accordingly).
pub fn start_liquidation(state: &mut PathState, window: f64, horizon: f64, reason: StopReason) {
    let end = (state.t + window).min(horizon);
    let len = (end - state.t).max(f64::MIN_POSITIVE);
    state.liquidation = Some(Liquidation { start: state.t, end, rate: &state.h * (-1.0 / len) });
    state.stopped_reason = reason;
}

/// Trading rate during the liquidation window; the step that reaches the
/// end of the window sells whatever is left, so `H = 0` afterwards.
pub fn liquidation_rate(state: &PathState, dt: f64) -> DVector<f64> {
    match &state.liquidation {
        None => DVector::zeros(state.h.len()),
        Some(liq) => {
            if state.h.iter().all(|&v| v == 0.0) {
                DVector::zeros(state.h.len())
            } else if liq.end - state.t <= dt * (1.0 + 1e-9) {
                &state.h * (-1.0 / dt)
            } else {
                liq.rate.clone()
            }
        }
    }
}

/// One Euler step of the self-financing dynamics with exact price update:
/// interest on cash, consumption `c`, purchases at the impacted price
/// `S + f(S, εθ)`, then `H' = H + θ dt`.
#[allow(clippy::too_many_arguments)]
pub fn step_wealth(
    state: &PathState,
    theta: &DVector<f64>,
    c: f64,
    dt: f64,
    db: &DVector<f64>,
    epsilon: f64,
    market: &MarketParams,
    impact: &ImpactModel,
) -> Result<PathState> {
    let exec = execution_spend(state, theta, epsilon, impact)?;
    let cash = state.cash * (1.0 + market.rate() * dt) - c * dt - exec * dt;
    let mut h = &state.h + theta * dt;
    if state.liquidating() && h.iter().zip(state.h.iter()).any(|(a, b)| a * b < 0.0 || *a == 0.0) {
        // the closing step lands exactly on zero
        h = h.map(|v| if v.abs() < 1e-12 * (1.0 + state.h.amax()) { 0.0 } else { v });
    }
    let s = step_prices(&state.s, market, dt, db);
    let w_eps = cash + h.dot(&s);
    Ok(PathState {
        t: state.t + dt,
        s,
        cash,
        h,
        w_eps,
        utility_acc: state.utility_acc,
        liquidation: state.liquidation.clone(),
        stopped_reason: state.stopped_reason,
    })
}

/// Cash spent per unit time on trades, `Σ θ_j (S_j + f_j(S, εθ))`.
fn execution_spend(state: &PathState, theta: &DVector<f64>, epsilon: f64, impact: &ImpactModel) -> Result<f64> {
    if epsilon == 0.0 {
        return Ok(theta.dot(&state.s));
    }
    let shift = impact.impact_price_shift(&state.s, &(theta * epsilon))?;
    Ok(theta.dot(&state.s) + theta.dot(&shift))
}

/// Consumption during liquidation: `c⁰` clipped so that cash stays positive.
pub fn clipped_consumption(state: &PathState, c0: f64, theta: &DVector<f64>, dt: f64, epsilon: f64, model: &Model) -> Result<f64> {
    let exec = execution_spend(state, theta, epsilon, &model.impact)?;
    let avail = state.cash * (1.0 + model.merton.market.rate() * dt) - exec * dt;
    Ok(c0.min((avail / dt) * (1.0 - 1e-9)).max(0.0))
}

/// Exact frictionless wealth step under `(π, c⁰)` from `t` to `t + dt`.
#[derive(Debug, Clone)]
pub struct FrictionlessStepper {
    drift: f64,
    vol: DVector<f64>,
}

impl FrictionlessStepper {
    pub fn new(merton: &MertonSolution) -> Self {
        let market = &merton.market;
        let vol = market.sigma().transpose() * &merton.pi;
        let drift = market.rate() + merton.pi.dot(&market.excess_return()) - 0.5 * vol.norm_squared();
        Self { drift, vol }
    }

    #[inline]
    pub fn step(&self, merton: &MertonSolution, t: f64, w: f64, dt: f64, db: &DVector<f64>) -> f64 {
        let consumed = merton.g.integral_inv_power(t, t + dt);
        w * (self.drift * dt - consumed + self.vol.dot(db)).exp()
    }
}

/// Per-path outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub index: usize,
    /// `∫U(c)dt + U(c_T)` under the candidate strategy.
    pub utility: f64,
    /// Same functional along the coupled frictionless path.
    pub frictionless_utility: f64,
    pub terminal_wealth: f64,
    pub stopped_reason: StopReason,
    pub liquidation_time: Option<f64>,
    /// Largest `|X|` before liquidation.
    pub max_abs_x: f64,
    /// Time average of `|X|` over the second half of the horizon.
    pub mean_abs_x_late: Option<f64>,
    pub max_weight_dev: f64,
    /// `max_t |W^ε/W⁰ − 1|`.
    pub max_wealth_dev: f64,
}

impl PathRecord {
    pub fn stopped_early(&self) -> bool {
        matches!(self.stopped_reason, StopReason::WeightBreach | StopReason::WealthFloor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub epsilon: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub mean_utility: f64,
    pub std_err: f64,
    pub frac_stopped_early: f64,
    /// Mean of frictionless minus candidate utility along coupled paths.
    pub paired_loss: f64,
    pub paired_std_err: f64,
    pub mean_frictionless_utility: f64,
    pub median_max_abs_x: f64,
    pub median_max_wealth_dev: f64,
    pub records: Vec<PathRecord>,
}

/// One row of the optional per-path trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub s: Vec<f64>,
    pub w_eps: f64,
    pub h: Vec<f64>,
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub c: f64,
}

pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let d = rows.first().map_or(0, |r| r.s.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("s{i}")));
    header.push("w_eps".into());
    header.extend((0..d).map(|i| format!("h{i}")));
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend((0..d).map(|i| format!("theta{i}")));
    header.push("c".into());
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.s.iter().map(f64::to_string));
        rec.push(r.w_eps.to_string());
        rec.extend(r.h.iter().map(f64::to_string));
        rec.extend(r.x.iter().map(f64::to_string));
        rec.extend(r.theta.iter().map(f64::to_string));
        rec.push(r.c.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Brownian increments on a grid, refined dyadically so that coarser grids
/// see sums of the same fine increments.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    dim: usize,
    sub: usize,
    sqrt_fine: f64,
}

impl NoiseSource {
    pub fn new(seed: u64, path: usize, dim: usize, dt: f64, sub: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path as u64);
        Self { rng, dim, sub, sqrt_fine: (dt / sub as f64).sqrt() }
    }

    pub fn increment(&mut self) -> DVector<f64> {
        let mut db = DVector::zeros(self.dim);
        for _ in 0..self.sub {
            for j in 0..self.dim {
                let z: f64 = self.rng.sample(StandardNormal);
                db[j] += z;
            }
        }
        db * self.sqrt_fine
    }
}

fn initial_shares(cfg: &SimConfig, model: &Model, s0: &DVector<f64>) -> Result<DVector<f64>> {
    match &cfg.start {
        StartMode::Target => crate::merton::h0_shares(cfg.t0, cfg.w0, s0, &model.merton.pi),
        StartMode::Shares(h) => Ok(DVector::from_column_slice(h)),
    }
}

/// Simulates path `index`; fills `trace` when given.
pub fn simulate_path(
    model: &Model,
    cfg: &SimConfig,
    grid: &TimeGrid,
    index: usize,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<PathRecord> {
    let merton = &model.merton;
    let market = &merton.market;
    let r_a = merton.inv.risk_aversion;
    let horizon = model.horizon();
    let eps = cfg.epsilon;
    let ms = model.m_star();
    let dt = grid.dt;
    let d = model.dim();
    let mut noise = NoiseSource::new(cfg.seed, index, d, dt, grid.noise_sub);
    let fl = FrictionlessStepper::new(merton);
    let s0 = DVector::from_column_slice(&cfg.s0);
    let h0 = initial_shares(cfg, model, &s0)?;
    let mut state = PathState::new(cfg.t0, cfg.w0, s0, h0);
    let window = if eps > 0.0 { eps.powf(2.0 * ms) } else { 0.0 };
    let floor = cfg.wealth_floor * cfg.w0;
    let half = 0.5 * (cfg.t0 + horizon);

    let mut w0 = cfg.w0;
    let mut u0_prev = utility(merton.consumption(cfg.t0, w0), r_a);
    let mut u0_acc = 0.0;
    let mut u_prev: Option<f64> = None;
    let mut rec = PathRecord {
        index,
        utility: 0.0,
        frictionless_utility: 0.0,
        terminal_wealth: cfg.w0,
        stopped_reason: StopReason::None,
        liquidation_time: None,
        max_abs_x: 0.0,
        mean_abs_x_late: None,
        max_weight_dev: 0.0,
        max_wealth_dev: 0.0,
    };
    let mut late_x = 0.0;
    let mut late_n = 0usize;
    let mut alive = true;

    for k in 0..grid.n_steps {
        let t = cfg.t0 + k as f64 * dt;
        state.t = t;
        let db = noise.increment();
        if alive {
            let (theta, c, x) = if eps == 0.0 {
                // frictionless rebalancing: the candidate path is the coupled one
                let z = if trace.is_some() { DVector::zeros(d) } else { DVector::zeros(0) };
                (z.clone(), merton.consumption(t, w0), z)
            } else {
                if !state.liquidating() {
                    if t >= horizon - window - 1e-12 * horizon {
                        start_liquidation(&mut state, window, horizon, StopReason::Horizon);
                        rec.liquidation_time = Some(t);
                    } else if admissibility_monitor(&state, &merton.pi, cfg.guard_mult, cfg.cash_floor_mult)
                        == MonitorAction::StartLiquidation
                    {
                        start_liquidation(&mut state, window, horizon, StopReason::WeightBreach);
                        rec.liquidation_time = Some(t);
                    }
                }
                let c0 = merton.consumption(t, state.w_eps);
                if state.liquidating() {
                    let theta = liquidation_rate(&state, dt);
                    let c = clipped_consumption(&state, c0, &theta, dt, eps, model)?;
                    (theta, c, DVector::zeros(d))
                } else {
                    let x = rescaled_displacement(state.w_eps, &state.s, &state.h, eps, &merton.pi, &model.cmd.s_half, ms)?;
                    let dev = (state.weights() - &merton.pi).amax();
                    rec.max_weight_dev = rec.max_weight_dev.max(dev);
                    let ax = x.norm();
                    rec.max_abs_x = rec.max_abs_x.max(ax);
                    if t >= half {
                        late_x += ax;
                        late_n += 1;
                    }
                    let theta = candidate_rate(state.w_eps, &state.s, &state.h, eps, &merton.pi, &model.cmd)?;
                    (theta, c0, x)
                }
            };
            let u_now = utility(c, r_a);
            if let Some(up) = u_prev {
                state.utility_acc += 0.5 * (up + u_now) * dt;
            }
            u_prev = Some(u_now);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TraceRow {
                    t,
                    s: state.s.iter().copied().collect(),
                    w_eps: if eps == 0.0 { w0 } else { state.w_eps },
                    h: state.h.iter().copied().collect(),
                    x: x.iter().copied().collect(),
                    theta: theta.iter().copied().collect(),
                    c,
                });
            }
            if eps > 0.0 {
                state = step_wealth(&state, &theta, c, dt, &db, eps, market, &model.impact)?;
                if !(state.w_eps > floor) {
                    alive = false;
                    state.stopped_reason = StopReason::WealthFloor;
                    rec.liquidation_time.get_or_insert(t + dt);
                    // consumption is zero from here on
                    state.utility_acc += 0.5 * u_prev.unwrap_or(0.0) * dt;
                }
            } else if trace.is_some() {
                state.s = step_prices(&state.s, market, dt, &db);
            }
        }
        let w0_next = fl.step(merton, t, w0, dt, &db);
        let u0_next = utility(merton.consumption(t + dt, w0_next), r_a);
        u0_acc += 0.5 * (u0_prev + u0_next) * dt;
        u0_prev = u0_next;
        w0 = w0_next;
        if alive && eps > 0.0 {
            rec.max_wealth_dev = rec.max_wealth_dev.max((state.w_eps / w0 - 1.0).abs());
        }
    }

    let w_t = if eps == 0.0 { w0 } else { state.w_eps.max(0.0) };
    if alive {
        state.t = horizon;
        let c_t = if eps == 0.0 { merton.consumption(horizon, w0) } else { merton.consumption(horizon, w_t) };
        if let Some(up) = u_prev {
            state.utility_acc += 0.5 * (up + utility(c_t, r_a)) * dt;
        }
    }
    rec.utility = state.utility_acc + utility(w_t, r_a);
    rec.frictionless_utility = u0_acc + utility(w0, r_a);
    rec.terminal_wealth = w_t;
    rec.stopped_reason = state.stopped_reason;
    if rec.stopped_reason == StopReason::None && eps > 0.0 {
        rec.stopped_reason = StopReason::Horizon;
    }
    rec.mean_abs_x_late = (late_n > 0).then(|| late_x / late_n as f64);
    Ok(rec)
}

fn map_paths<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

fn mean_and_se(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `cfg.n_paths` independent paths and aggregates them in path order.
pub fn run_paths(model: &Model, cfg: &SimConfig, mode: ExecMode) -> Result<SimResult> {
    cfg.validate(model)?;
    let grid = cfg.time_grid(model.m_star(), model.horizon());
    let records = map_paths(cfg.n_paths, mode, |i| simulate_path(model, cfg, &grid, i, None));
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let n = records.len();
    let (mean_utility, std_err) = mean_and_se(records.iter().map(|r| r.utility), n);
    let (paired_loss, paired_std_err) =
        mean_and_se(records.iter().map(|r| r.frictionless_utility - r.utility), n);
    let mean_frictionless_utility = records.iter().map(|r| r.frictionless_utility).sum::<f64>() / n as f64;
    let frac_stopped_early = records.iter().filter(|r| r.stopped_early()).count() as f64 / n as f64;
    Ok(SimResult {
        epsilon: cfg.epsilon,
        dt: grid.dt,
        n_steps: grid.n_steps,
        n_paths: n,
        mean_utility,
        std_err,
        frac_stopped_early,
        paired_loss,
        paired_std_err,
        mean_frictionless_utility,
        median_max_abs_x: median(records.iter().map(|r| r.max_abs_x).collect()),
        median_max_wealth_dev: median(records.iter().map(|r| r.max_wealth_dev).collect()),
        records,
    })
}

/// Runs a single path and returns its record with the full trace.
pub fn trace_path(model: &Model, cfg: &SimConfig, index: usize) -> Result<(PathRecord, Vec<TraceRow>)> {
    cfg.validate(model)?;
    let grid = cfg.time_grid(model.m_star(), model.horizon());
    let mut rows = Vec::with_capacity(grid.n_steps);
    let rec = simulate_path(model, cfg, &grid, index, Some(&mut rows))?;
    Ok((rec, rows))
}

/// Monte-Carlo samples of `∫_t^T a(r, W⁰_r) dr` along exact frictionless
/// wealth paths, `a(r, w) = λ g(r) w^{β}`, by the trapezoid rule on `n_steps`
/// steps.
#[allow(clippy::too_many_arguments)]
pub fn frictionless_source_integrals(
    merton: &MertonSolution,
    lambda: f64,
    beta_exp: f64,
    t: f64,
    w: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    mode: ExecMode,
) -> Vec<f64> {
    let horizon = merton.inv.horizon;
    let d = merton.dim();
    let fl = FrictionlessStepper::new(merton);
    let dt = (horizon - t) / n_steps as f64;
    let source = |r: f64, wr: f64| lambda * merton.g.value(r) * wr.powf(beta_exp);
    map_paths(n_paths, mode, |i| {
        if n_steps == 0 || dt <= 0.0 {
            return 0.0;
        }
        let mut noise = NoiseSource::new(seed, i, d, dt, 1);
        let mut wr = w;
        let mut a_prev = source(t, wr);
        let mut acc = 0.0;
        for k in 0..n_steps {
            let r = t + k as f64 * dt;
            wr = fl.step(merton, r, wr, dt, &noise.increment());
            let a_next = source(r + dt, wr);
            acc += 0.5 * (a_prev + a_next) * dt;
            a_prev = a_next;
        }
        acc
    })
}
