//! One-dimensional ergodic corrector.
//!
//! Finds the constant `lambda_m > 0` and the even convex function `w` with
//! `w(0) = 0` solving
//!
//! ```text
//! w''(x) = -x^2 + lambda_m + c_m |w'(x)|^m,   c_m = m^-m (m-1)^(m-1),
//! ```
//!
//! whose slope grows like `m (m-1)^(1/m - 1) |x|^(2/m)`. Everything is done
//! on `q = w'`, which is odd and solves a first-order equation.
//!
//! `lambda_m` is located by shooting forward from `q(0) = 0`: for a too large
//! constant the trajectory overshoots the power-growth branch and blows up,
//! for a too small one it falls through zero. Bisection on that
//! classification brackets `lambda_m`. The stored solution is then computed
//! by integrating backwards from far out on the growth branch, which is the
//! contracting direction of the equation, with an L-stable implicit scheme.

use std::fs::File;
use std::io::{BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{radau_iia_step, Control, Dopri5, OdeOptions};

/// Solver settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ShootOptions {
    /// Final width of the bracket around `lambda_m`.
    pub bisect_tol: f64,
    /// First candidate for the grid end; doubled until the asymptotics hold.
    pub x_max_start: f64,
    /// Relative tolerance on `q(X)/X^(2/m)` against its limit.
    pub asym_tol: f64,
    /// Relative tolerance on `w(X)/X^(1+2/m)` against its limit.
    pub value_tol: f64,
    /// Tolerance on the normalised ODE residual at interior nodes.
    pub residual_tol: f64,
    /// Upper end of the bracket search for `lambda_m`.
    pub lambda_search_max: f64,
    /// Optional starting bracket `(lo, hi)` for the bisection.
    pub lambda_bracket: Option<(f64, f64)>,
    /// Relative tolerance of the shooting integrator.
    pub rtol: f64,
    pub atol: f64,
    /// Node spacing on `[0, dense_limit]`.
    pub dense_step: f64,
    pub dense_limit: f64,
    /// Ratio between consecutive nodes beyond `dense_limit`.
    pub geometric_ratio: f64,
    /// Implicit steps per grid interval.
    pub substeps: usize,
    /// Keep doubling `X` until the second-derivative tail has decayed.
    pub require_tail_decay: bool,
    /// Use exactly this grid end instead of the doubling search.
    pub fixed_x_max: Option<f64>,
    pub x_max_limit: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self {
            bisect_tol: 1e-10,
            x_max_start: 10.0,
            asym_tol: 5e-3,
            value_tol: 0.02,
            residual_tol: 1e-8,
            lambda_search_max: 100.0,
            lambda_bracket: None,
            rtol: 1e-10,
            atol: 1e-13,
            dense_step: 1e-3,
            dense_limit: 20.0,
            geometric_ratio: 1.0005,
            substeps: 4,
            require_tail_decay: true,
            fixed_x_max: None,
            x_max_limit: 1e6,
        }
    }
}

/// Blow-up class of a forward shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShotClass {
    /// Overshoots the growth branch: `q(x) > 2 A x^(2/m)`.
    High,
    /// Falls through zero and crashes to the negative branch.
    Low,
    /// Neither happened before the classification horizon.
    Undetermined,
}

/// `c_m = m^-m (m-1)^(m-1)`.
pub fn impact_coefficient(m: f64) -> f64 {
    (-m * m.ln() + (m - 1.0) * (m - 1.0).ln()).exp()
}

/// `m (m-1)^(1/m - 1)`, the limit of `q(x)/x^(2/m)`.
pub fn asymptotic_slope_coefficient(m: f64) -> f64 {
    m * (m - 1.0).powf(1.0 / m - 1.0)
}

/// `m^2 / ((m+2) (m-1)^(1 - 1/m))`, the limit of `w(x)/x^(1+2/m)`.
pub fn asymptotic_value_coefficient(m: f64) -> f64 {
    m * m / ((m + 2.0) * (m - 1.0).powf(1.0 - 1.0 / m))
}

/// `|q|^m`, evaluated as `exp(m ln|q|)` and zero at the origin.
#[inline]
pub(crate) fn abs_pow(q: f64, m: f64) -> f64 {
    let a = q.abs();
    if a == 0.0 {
        0.0
    } else {
        (m * a.ln()).exp()
    }
}

/// Right-hand side `q' = -x^2 + lambda + c_m |q|^m`.
#[derive(Debug, Clone, Copy)]
struct Rhs {
    m: f64,
    cm: f64,
    lambda: f64,
}

impl Rhs {
    fn new(m: f64, lambda: f64) -> Self {
        Self { m, cm: impact_coefficient(m), lambda }
    }

    #[inline]
    fn eval(&self, x: f64, q: f64) -> f64 {
        -x * x + self.lambda + self.cm * abs_pow(q, self.m)
    }

    #[inline]
    fn dq(&self, q: f64) -> f64 {
        let a = q.abs();
        if a == 0.0 {
            0.0
        } else {
            self.cm * self.m * ((self.m - 1.0) * a.ln()).exp() * q.signum()
        }
    }

    /// `q'' = -2x + (d/dq rhs) q'`.
    #[inline]
    fn second(&self, x: f64, q: f64, dq: f64) -> f64 {
        -2.0 * x + self.dq(q) * dq
    }
}

/// Integrates forward from `q(0) = 0` and classifies the trajectory.
pub fn classify_shot(m: f64, lambda: f64, opts: &ShootOptions) -> ShotClass {
    const HORIZON: f64 = 60.0;
    let rhs = Rhs::new(m, lambda);
    let a = asymptotic_slope_coefficient(m);
    let ode = OdeOptions { rtol: opts.rtol, atol: opts.atol, h_init: 1e-4, h_max: 0.05, max_steps: 5_000_000 };
    let mut class = ShotClass::Undetermined;
    let mut stepper = Dopri5::new(|x, q| rhs.eval(x, q), 0.0, 0.0, ode);
    let res = stepper.advance_to(HORIZON, |x, q, _| {
        if x > 0.0 && q > 2.0 * a * x.powf(2.0 / m) {
            class = ShotClass::High;
            Control::Stop
        } else if x > 0.0 && q < 0.0 {
            class = ShotClass::Low;
            Control::Stop
        } else {
            Control::Continue
        }
    });
    match res {
        Ok(_) => class,
        // step-size collapse only happens in finite-time blow-up
        Err(_) if stepper.y() > 0.0 => ShotClass::High,
        Err(_) => ShotClass::Low,
    }
}

/// Result of the bisection on the blow-up classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBracket {
    pub lo: f64,
    pub hi: f64,
    pub class_lo: ShotClass,
    pub class_hi: ShotClass,
    pub iterations: usize,
}

impl LambdaBracket {
    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Finds a bracket with opposite classes and bisects it to `bisect_tol`.
/// Which class sits on which side is read off the initial bracket.
pub fn bracket_lambda(m: f64, opts: &ShootOptions) -> Result<LambdaBracket> {
    let classify = |l: f64| classify_shot(m, l, opts);
    let (mut lo, mut hi) = opts.lambda_bracket.unwrap_or((0.0, 1.0));
    let class_lo = classify(lo);
    if class_lo == ShotClass::Undetermined {
        return Err(Error::BracketFailure { search_max: opts.lambda_search_max });
    }
    let mut class_hi = classify(hi);
    while class_hi == class_lo || class_hi == ShotClass::Undetermined {
        if hi >= opts.lambda_search_max {
            return Err(Error::BracketFailure { search_max: opts.lambda_search_max });
        }
        lo = hi;
        hi = (2.0 * hi).min(opts.lambda_search_max);
        class_hi = classify(hi);
    }
    let mut iterations = 0;
    while hi - lo > opts.bisect_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match classify(mid) {
            c if c == class_lo => lo = mid,
            c if c == class_hi => hi = mid,
            // exact hit of the separatrix within the horizon
            _ => {
                lo = mid;
                hi = mid;
            }
        }
        iterations += 1;
    }
    Ok(LambdaBracket { lo, hi, class_lo, class_hi, iterations })
}

/// Report of the second-derivative check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondDerivativeReport {
    pub max_abs: f64,
    pub argmax: f64,
    /// Largest `|w''|` over `[0.9 X, X]`.
    pub tail_max: f64,
    pub tail_start: f64,
    /// `tail_max / max_abs`.
    pub tail_ratio: f64,
    /// `w''` is nonincreasing along the tail nodes.
    pub tail_decreasing: bool,
    pub passed: bool,
}

/// Header written next to the CSV table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorrectorHeader {
    pub m: f64,
    pub lambda_m: f64,
    pub x_max: f64,
    pub grid_lambda: f64,
    pub x_core: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
    pub dense_step: f64,
    pub dense_nodes: usize,
}

/// Solved one-dimensional corrector on `[0, X]` with even/odd extension and
/// power-law continuation beyond `X`.
#[derive(Debug, Clone)]
pub struct Corrector1D {
    pub m: f64,
    pub lambda_m: f64,
    /// Constant used to tabulate the grid; the root of `q(0) = 0` for the
    /// backward integration. Agrees with `lambda_m` to the bracket width.
    pub grid_lambda: f64,
    pub bracket: (f64, f64),
    /// Smallest doubled `X` at which the slope ratio met `asym_tol`.
    pub x_core: f64,
    pub x_grid: Vec<f64>,
    pub w_vals: Vec<f64>,
    pub dw_vals: Vec<f64>,
    pub d2w_vals: Vec<f64>,
    d3w_vals: Vec<f64>,
    pub asym_coeff_dw: f64,
    pub asym_coeff_w: f64,
    pub c_match: f64,
    dense_step: f64,
    dense_nodes: usize,
}

fn build_nodes(x_max: f64, opts: &ShootOptions) -> (Vec<f64>, f64, usize) {
    let dense_end = x_max.min(opts.dense_limit);
    let n = (dense_end / opts.dense_step).ceil().max(1.0) as usize;
    let h = dense_end / n as f64;
    let mut xs: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    *xs.last_mut().unwrap() = dense_end;
    let dense_nodes = xs.len();
    if x_max > dense_end {
        let mut x = dense_end;
        loop {
            x *= opts.geometric_ratio;
            if x >= x_max * (1.0 - 0.25 * (opts.geometric_ratio - 1.0)) {
                break;
            }
            xs.push(x);
        }
        xs.push(x_max);
    }
    (xs, h, dense_nodes)
}

/// Backward sweep from `2 X` down to zero; returns `q` at every node.
fn backward_sweep(rhs: &Rhs, xs: &[f64], opts: &ShootOptions) -> Result<Vec<f64>> {
    let x_max = *xs.last().unwrap();
    let f = |x: f64, q: f64| rhs.eval(x, q);
    let j = |_: f64, q: f64| rhs.dq(q);
    let sub = opts.substeps.max(1);
    // start on the nullcline of the growth branch; the error contracts
    let mut x = 2.0 * x_max;
    let mut q = ((x * x - rhs.lambda).max(0.0) / rhs.cm).powf(1.0 / rhs.m);
    let ratio = opts.geometric_ratio;
    while x > x_max {
        let step = (x - x / ratio).min(x - x_max);
        for _ in 0..sub {
            let h = -step / sub as f64;
            q = radau_iia_step(&f, &j, x, q, h)?;
            x += h;
        }
        if (x - x_max).abs() < 1e-12 * x_max {
            x = x_max;
        }
    }
    let mut out = vec![0.0; xs.len()];
    *out.last_mut().unwrap() = q;
    for i in (0..xs.len() - 1).rev() {
        let (a, b) = (xs[i + 1], xs[i]);
        let h = (b - a) / sub as f64;
        let mut xx = a;
        for k in 0..sub {
            let next = if k + 1 == sub { b } else { xx + h };
            q = radau_iia_step(&f, &j, xx, q, next - xx)?;
            xx = next;
        }
        out[i] = q;
    }
    Ok(out)
}

/// Secant iteration on the backward sweep so that the stored slope vanishes
/// at the origin.
fn sweep_through_origin(m: f64, lambda0: f64, xs: &[f64], opts: &ShootOptions) -> Result<(f64, Vec<f64>)> {
    let mut l0 = lambda0;
    let mut q0 = backward_sweep(&Rhs::new(m, l0), xs, opts)?;
    if q0[0].abs() < 1e-15 {
        return Ok((l0, q0));
    }
    let mut l1 = lambda0 + 1e-7;
    let mut q1 = backward_sweep(&Rhs::new(m, l1), xs, opts)?;
    for _ in 0..20 {
        let denom = q1[0] - q0[0];
        if denom == 0.0 {
            break;
        }
        let l2 = l1 - q1[0] * (l1 - l0) / denom;
        l0 = l1;
        q0 = q1;
        l1 = l2;
        q1 = backward_sweep(&Rhs::new(m, l1), xs, opts)?;
        if q1[0].abs() < 1e-15 || (l1 - l0).abs() < 1e-15 {
            break;
        }
    }
    Ok((l1, q1))
}

/// `int_0^t` of the cubic Hermite interpolant on a unit interval, scaled by `h`.
#[inline]
fn hermite_integral(y0: f64, m0: f64, y1: f64, m1: f64, h: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let h00 = t - t3 + 0.5 * t4;
    let h10 = 0.5 * t2 - 2.0 / 3.0 * t3 + 0.25 * t4;
    let h01 = t3 - 0.5 * t4;
    let h11 = -t3 / 3.0 + 0.25 * t4;
    h * (h00 * y0 + h * h10 * m0 + h01 * y1 + h * h11 * m1)
}

#[inline]
fn hermite(y0: f64, m0: f64, y1: f64, m1: f64, h: f64, t: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    h00 * y0 + h * h10 * m0 + h01 * y1 + h * h11 * m1
}

/// Derivative at `xs[c]` of the Lagrange polynomial through the given nodes.
fn lagrange_derivative(xs: &[f64], ys: &[f64], c: usize) -> f64 {
    let n = xs.len();
    let mut d = 0.0;
    for k in 0..n {
        let weight = if k == c {
            (0..n).filter(|&l| l != k).map(|l| 1.0 / (xs[k] - xs[l])).sum::<f64>()
        } else {
            let mut p = 1.0 / (xs[k] - xs[c]);
            for l in 0..n {
                if l != k && l != c {
                    p *= (xs[c] - xs[l]) / (xs[k] - xs[l]);
                }
            }
            p
        };
        d += weight * ys[k];
    }
    d
}

impl Corrector1D {
    fn assemble(
        m: f64,
        bracket: LambdaBracket,
        x_max: f64,
        x_core: f64,
        opts: &ShootOptions,
    ) -> Result<Self> {
        let (xs, dense_step, dense_nodes) = build_nodes(x_max, opts);
        let (grid_lambda, mut q) = sweep_through_origin(m, bracket.mid(), &xs, opts)?;
        q[0] = 0.0;
        let rhs = Rhs::new(m, grid_lambda);
        let d2: Vec<f64> = xs.iter().zip(&q).map(|(&x, &qq)| rhs.eval(x, qq)).collect();
        Ok(Self::from_tables(m, bracket.mid(), grid_lambda, (bracket.lo, bracket.hi), x_core, xs, q, d2, None, dense_step, dense_nodes))
    }

    #[allow(clippy::too_many_arguments)]
    fn from_tables(
        m: f64,
        lambda_m: f64,
        grid_lambda: f64,
        bracket: (f64, f64),
        x_core: f64,
        xs: Vec<f64>,
        q: Vec<f64>,
        d2: Vec<f64>,
        w: Option<Vec<f64>>,
        dense_step: f64,
        dense_nodes: usize,
    ) -> Self {
        let rhs = Rhs::new(m, grid_lambda);
        let d3: Vec<f64> = xs.iter().zip(q.iter().zip(&d2)).map(|(&x, (&qq, &dd))| rhs.second(x, qq, dd)).collect();
        let w = w.unwrap_or_else(|| {
            let mut w = vec![0.0; xs.len()];
            for i in 1..xs.len() {
                let h = xs[i] - xs[i - 1];
                w[i] = w[i - 1] + hermite_integral(q[i - 1], d2[i - 1], q[i], d2[i], h, 1.0);
            }
            w
        });
        let asym_coeff_dw = asymptotic_slope_coefficient(m);
        let asym_coeff_w = asymptotic_value_coefficient(m);
        let x_max = *xs.last().unwrap();
        let c_match = w.last().unwrap() - asym_coeff_w * x_max.powf(1.0 + 2.0 / m);
        Self {
            m,
            lambda_m,
            grid_lambda,
            bracket,
            x_core,
            x_grid: xs,
            w_vals: w,
            dw_vals: q,
            d2w_vals: d2,
            d3w_vals: d3,
            asym_coeff_dw,
            asym_coeff_w,
            c_match,
            dense_step,
            dense_nodes,
        }
    }

    pub fn x_max(&self) -> f64 {
        *self.x_grid.last().unwrap()
    }

    /// `q(X)/X^(2/m)` relative to its limit, minus one.
    pub fn slope_ratio_error(&self) -> f64 {
        let x = self.x_max();
        self.dw_vals.last().unwrap() / x.powf(2.0 / self.m) / self.asym_coeff_dw - 1.0
    }

    /// `w(X)/X^(1+2/m)` relative to its limit, minus one.
    pub fn value_ratio_error(&self) -> f64 {
        let x = self.x_max();
        self.w_vals.last().unwrap() / x.powf(1.0 + 2.0 / self.m) / self.asym_coeff_w - 1.0
    }

    #[inline]
    fn locate(&self, x: f64) -> usize {
        // x in [0, X)
        if x < self.x_grid[self.dense_nodes - 1] {
            ((x / self.dense_step) as usize).min(self.dense_nodes - 2)
        } else {
            let i = self.x_grid.partition_point(|&g| g <= x);
            (i - 1).min(self.x_grid.len() - 2)
        }
    }

    /// `w(x)`, even in `x`.
    pub fn eval_w(&self, x: f64) -> f64 {
        let a = x.abs();
        if a > self.x_max() {
            return self.asym_coeff_w * a.powf(1.0 + 2.0 / self.m) + self.c_match;
        }
        let i = self.locate(a);
        let h = self.x_grid[i + 1] - self.x_grid[i];
        let t = (a - self.x_grid[i]) / h;
        self.w_vals[i]
            + hermite_integral(self.dw_vals[i], self.d2w_vals[i], self.dw_vals[i + 1], self.d2w_vals[i + 1], h, t)
    }

    /// `w'(x)`, odd in `x`.
    pub fn eval_dw(&self, x: f64) -> f64 {
        let a = x.abs();
        let v = if a > self.x_max() {
            self.asym_coeff_dw * a.powf(2.0 / self.m)
        } else {
            let i = self.locate(a);
            let h = self.x_grid[i + 1] - self.x_grid[i];
            let t = (a - self.x_grid[i]) / h;
            hermite(self.dw_vals[i], self.d2w_vals[i], self.dw_vals[i + 1], self.d2w_vals[i + 1], h, t)
        };
        if x < 0.0 {
            -v
        } else {
            v
        }
    }

    /// `w''(x)`, even in `x`.
    pub fn eval_d2w(&self, x: f64) -> f64 {
        let a = x.abs();
        if a > self.x_max() {
            return 2.0 / self.m * self.asym_coeff_dw * a.powf(2.0 / self.m - 1.0);
        }
        let i = self.locate(a);
        let h = self.x_grid[i + 1] - self.x_grid[i];
        let t = (a - self.x_grid[i]) / h;
        hermite(self.d2w_vals[i], self.d3w_vals[i], self.d2w_vals[i + 1], self.d3w_vals[i + 1], h, t)
    }

    /// Residual of the ODE at interior nodes: the slope column is
    /// differentiated with five-point Lagrange stencils and compared with the
    /// right-hand side, normalised by `1 + x^2`.
    pub fn ode_residuals(&self) -> Vec<(f64, f64)> {
        let rhs = Rhs::new(self.m, self.lambda_m);
        let n = self.x_grid.len();
        (2..n.saturating_sub(2))
            .map(|i| {
                let xs = &self.x_grid[i - 2..=i + 2];
                let ys = &self.dw_vals[i - 2..=i + 2];
                let fd = lagrange_derivative(xs, ys, 2);
                let x = self.x_grid[i];
                (x, (fd - rhs.eval(x, self.dw_vals[i])).abs() / (1.0 + x * x))
            })
            .collect()
    }

    pub fn max_ode_residual(&self) -> f64 {
        self.ode_residuals().into_iter().map(|(_, r)| r).fold(0.0, f64::max)
    }

    pub fn verify_second_derivative_bound(&self) -> SecondDerivativeReport {
        verify_second_derivative_bound(self)
    }

    pub fn header(&self) -> CorrectorHeader {
        CorrectorHeader {
            m: self.m,
            lambda_m: self.lambda_m,
            x_max: self.x_max(),
            grid_lambda: self.grid_lambda,
            x_core: self.x_core,
            bracket_lo: self.bracket.0,
            bracket_hi: self.bracket.1,
            dense_step: self.dense_step,
            dense_nodes: self.dense_nodes,
        }
    }

    /// Writes the `x, w, dw, d2w` table.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["x", "w", "dw", "d2w"])?;
        for i in 0..self.x_grid.len() {
            wtr.write_record(&[
                self.x_grid[i].to_string(),
                self.w_vals[i].to_string(),
                self.dw_vals[i].to_string(),
                self.d2w_vals[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Rebuilds a corrector from its header and table.
    pub fn read_csv<R: std::io::Read>(header: &CorrectorHeader, input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let cols = rdr.headers()?.clone();
        if cols.iter().collect::<Vec<_>>() != ["x", "w", "dw", "d2w"] {
            return Err(Error::Parse(format!("unexpected corrector columns {cols:?}")));
        }
        let (mut xs, mut w, mut q, mut d2) = (vec![], vec![], vec![], vec![]);
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Parse("short corrector row".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(e.to_string()))
            };
            xs.push(parse(0)?);
            w.push(parse(1)?);
            q.push(parse(2)?);
            d2.push(parse(3)?);
        }
        if xs.len() < 5 || header.dense_nodes < 2 || header.dense_nodes > xs.len() {
            return Err(Error::Parse("corrector table too short".into()));
        }
        if xs.windows(2).any(|p| !(p[1] > p[0])) || xs[0] != 0.0 {
            return Err(Error::Parse("corrector grid is not increasing from zero".into()));
        }
        if (xs.last().unwrap() - header.x_max).abs() > 1e-9 * header.x_max {
            return Err(Error::Parse("corrector grid end does not match header".into()));
        }
        if w.iter().chain(&q).chain(&d2).any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite corrector value".into()));
        }
        Ok(Self::from_tables(
            header.m,
            header.lambda_m,
            header.grid_lambda,
            (header.bracket_lo, header.bracket_hi),
            header.x_core,
            xs,
            q,
            d2,
            Some(w),
            header.dense_step,
            header.dense_nodes,
        ))
    }

    /// Saves `<stem>.csv` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let csv_path = stem.with_extension("csv");
        self.write_csv(File::create(&csv_path)?)?;
        let mut f = File::create(stem.with_extension("json"))?;
        f.write_all(serde_json::to_string_pretty(&self.header())?.as_bytes())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: CorrectorHeader =
            serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        Self::read_csv(&header, BufReader::new(File::open(stem.with_extension("csv"))?))
    }
}

/// Max of `|w''|` on the grid and its decay over the last tenth of the grid.
/// Passes iff the tail maximum is below 10% of the global maximum.
pub fn verify_second_derivative_bound(c: &Corrector1D) -> SecondDerivativeReport {
    let (mut max_abs, mut argmax) = (0.0f64, 0.0);
    for (&x, &v) in c.x_grid.iter().zip(&c.d2w_vals) {
        if v.abs() > max_abs {
            max_abs = v.abs();
            argmax = x;
        }
    }
    let tail_start = 0.9 * c.x_max();
    let tail: Vec<f64> = c
        .x_grid
        .iter()
        .zip(&c.d2w_vals)
        .filter(|(&x, _)| x >= tail_start)
        .map(|(_, &v)| v)
        .collect();
    let tail_max = tail.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tail_decreasing = tail.windows(2).all(|p| p[1] <= p[0] + 1e-12);
    let tail_ratio = if max_abs > 0.0 { tail_max / max_abs } else { f64::INFINITY };
    SecondDerivativeReport {
        max_abs,
        argmax,
        tail_max,
        tail_start,
        tail_ratio,
        tail_decreasing,
        passed: max_abs.is_finite() && tail_ratio < 0.1,
    }
}

/// Solves the corrector with default options, starting the grid search at
/// `x_max` and bisecting to `bisect_tol`.
pub fn shoot_lambda(m: f64, x_max: f64, bisect_tol: f64) -> Result<Corrector1D> {
    let opts = ShootOptions { x_max_start: x_max, bisect_tol, ..Default::default() };
    shoot_lambda_with(m, &opts)
}

pub fn shoot_lambda_with(m: f64, opts: &ShootOptions) -> Result<Corrector1D> {
    if !(m > 2.0 && m.is_finite()) {
        return Err(Error::InvalidParameter(format!("impact exponent m must exceed 2, got {m}")));
    }
    let bracket = bracket_lambda(m, opts)?;
    let target = asymptotic_slope_coefficient(m);
    if let Some(x_max) = opts.fixed_x_max {
        let c = Corrector1D::assemble(m, bracket, x_max, x_max, opts)?;
        let err = c.slope_ratio_error();
        if err.abs() > opts.asym_tol {
            return Err(Error::AsymptoteNotReached { x_max, ratio: (1.0 + err) * target, target });
        }
        return Ok(c);
    }
    let mut x_max = opts.x_max_start;
    let mut x_core = None;
    loop {
        let mut c = Corrector1D::assemble(m, bracket, x_max, x_core.unwrap_or(x_max), opts)?;
        let slope_ok = c.slope_ratio_error().abs() <= opts.asym_tol;
        if slope_ok && x_core.is_none() {
            x_core = Some(x_max);
            c.x_core = x_max;
        }
        let value_ok = c.value_ratio_error().abs() <= opts.value_tol;
        let tail_ok = !opts.require_tail_decay || c.verify_second_derivative_bound().passed;
        if slope_ok && value_ok && tail_ok {
            return Ok(c);
        }
        if 2.0 * x_max > opts.x_max_limit {
            let err = c.slope_ratio_error();
            return Err(Error::AsymptoteNotReached { x_max, ratio: (1.0 + err) * target, target });
        }
        x_max *= 2.0;
    }
}
