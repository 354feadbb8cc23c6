//! Scalar ODE integrators used by the corrector solvers.
//!
//! [`Dopri5`] is the adaptive Dormand–Prince 5(4) pair with absolute/relative
//! error control. [`radau_iia_step`] is one step of the two-stage Radau IIA
//! collocation method (order 3, L-stable), used where the equation is stiff
//! in the direction of integration.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, h_init: 1e-3, h_max: f64::INFINITY, max_steps: 2_000_000 }
    }
}

/// Returned by step observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy)]
pub struct Endpoint {
    pub x: f64,
    pub y: f64,
    pub steps: usize,
    /// True when an observer requested the stop before the target was reached.
    pub stopped: bool,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Adaptive Dormand–Prince integrator for `y' = f(x, y)`, scalar `y`.
///
/// The stepper keeps its state between calls to [`Dopri5::advance_to`], so a
/// sequence of output points can be visited without restarting the step-size
/// controller. Integration may run in either direction.
pub struct Dopri5<F> {
    f: F,
    opts: OdeOptions,
    x: f64,
    y: f64,
    dy: f64,
    h: f64,
    steps: usize,
}

impl<F: FnMut(f64, f64) -> f64> Dopri5<F> {
    pub fn new(mut f: F, x0: f64, y0: f64, opts: OdeOptions) -> Self {
        let dy = f(x0, y0);
        Self { f, opts, x: x0, y: y0, dy, h: opts.h_init.abs(), steps: 0 }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Integrates to `x_target`, calling `observer(x, y, y')` after every
    /// accepted step. Stops early if the observer returns [`Control::Stop`].
    pub fn advance_to<O>(&mut self, x_target: f64, mut observer: O) -> Result<Endpoint>
    where
        O: FnMut(f64, f64, f64) -> Control,
    {
        let dir = if x_target >= self.x { 1.0 } else { -1.0 };
        let span = (x_target - self.x).abs();
        let h_floor = 1e-14 * (1.0 + self.x.abs().max(x_target.abs()));
        while (x_target - self.x) * dir > 0.0 {
            if self.steps >= self.opts.max_steps {
                return Err(Error::Integration(format!("step budget exhausted at x = {}", self.x)));
            }
            let remaining = (x_target - self.x).abs();
            let mut h = self.h.min(self.opts.h_max).min(span.max(h_floor));
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let hs = dir * h;
            let (y_new, dy_new, err) = self.trial(hs);
            let scale = self.opts.atol + self.opts.rtol * self.y.abs().max(y_new.abs());
            let ratio = if y_new.is_finite() && err.is_finite() { err / scale } else { f64::INFINITY };
            if ratio <= 1.0 {
                self.x = if last { x_target } else { self.x + hs };
                self.y = y_new;
                self.dy = dy_new;
                self.steps += 1;
                let grow = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    self.h = h * grow;
                } else {
                    self.h = self.h.max(h * grow.min(1.0));
                }
                if observer(self.x, self.y, self.dy) == Control::Stop {
                    return Ok(Endpoint { x: self.x, y: self.y, steps: self.steps, stopped: true });
                }
            } else {
                let shrink = if ratio.is_finite() { (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
                self.h = h * shrink;
                if self.h < h_floor {
                    return Err(Error::Integration(format!(
                        "step size underflow at x = {} (y = {})",
                        self.x, self.y
                    )));
                }
            }
        }
        Ok(Endpoint { x: self.x, y: self.y, steps: self.steps, stopped: false })
    }

    fn trial(&mut self, h: f64) -> (f64, f64, f64) {
        let (x, y) = (self.x, self.y);
        let f = &mut self.f;
        let k1 = self.dy;
        let k2 = f(x + C2 * h, y + h * A21 * k1);
        let k3 = f(x + C3 * h, y + h * (A31 * k1 + A32 * k2));
        let k4 = f(x + C4 * h, y + h * (A41 * k1 + A42 * k2 + A43 * k3));
        let k5 = f(x + C5 * h, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
        let k6 = f(x + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
        let y_new = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
        let k7 = f(x + h, y_new);
        let err = (h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)).abs();
        (y_new, k7, err)
    }
}

/// Integrates from `x0` through every point of `points` (monotone in the
/// direction of integration) and returns the solution there.
pub fn dopri5_at<F>(f: F, x0: f64, y0: f64, points: &[f64], opts: OdeOptions) -> Result<Vec<f64>>
where
    F: FnMut(f64, f64) -> f64,
{
    let mut stepper = Dopri5::new(f, x0, y0, opts);
    let mut out = Vec::with_capacity(points.len());
    for &p in points {
        let end = stepper.advance_to(p, |_, _, _| Control::Continue)?;
        out.push(end.y);
    }
    Ok(out)
}

/// One step of the two-stage Radau IIA method from `(x, y)` with step `h`
/// (which may be negative). `dfdy` is the partial derivative of `f` in `y`.
pub fn radau_iia_step<F, J>(f: &F, dfdy: &J, x: f64, y: f64, h: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
    J: Fn(f64, f64) -> f64,
{
    const A11: f64 = 5.0 / 12.0;
    const A12: f64 = -1.0 / 12.0;
    const A21: f64 = 3.0 / 4.0;
    const A22: f64 = 1.0 / 4.0;
    let (x1, x2) = (x + h / 3.0, x + h);
    let (mut y1, mut y2) = (y, y);
    let mut prev = f64::INFINITY;
    for _ in 0..50 {
        let (f1, f2) = (f(x1, y1), f(x2, y2));
        let r1 = y1 - y - h * (A11 * f1 + A12 * f2);
        let r2 = y2 - y - h * (A21 * f1 + A22 * f2);
        let (j1, j2) = (dfdy(x1, y1), dfdy(x2, y2));
        let m11 = 1.0 - h * A11 * j1;
        let m12 = -h * A12 * j2;
        let m21 = -h * A21 * j1;
        let m22 = 1.0 - h * A22 * j2;
        let det = m11 * m22 - m12 * m21;
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Integration(format!("singular Radau Newton matrix at x = {x}")));
        }
        let d1 = (r1 * m22 - r2 * m12) / det;
        let d2 = (m11 * r2 - m21 * r1) / det;
        y1 -= d1;
        y2 -= d2;
        if !(y1.is_finite() && y2.is_finite()) {
            return Err(Error::Integration(format!("Radau Newton iteration diverged at x = {x}")));
        }
        let d = d1.abs().max(d2.abs());
        let scale = 1.0 + y1.abs().max(y2.abs());
        // stalled corrections at rounding level also count as converged
        if d <= 1e-15 * scale || (d >= prev && d <= 1e-11 * scale) {
            return Ok(y2);
        }
        prev = d;
    }
    Err(Error::Integration(format!("Radau Newton iteration did not converge at x = {x}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_growth() {
        let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..Default::default() };
        let ys = dopri5_at(|_, y| y, 0.0, 1.0, &[0.5, 1.0, 2.0], opts).unwrap();
        assert_relative_eq!(ys[0], 0.5f64.exp(), max_relative = 1e-11);
        assert_relative_eq!(ys[2], 2f64.exp(), max_relative = 1e-11);
    }

    #[test]
    fn backward_integration() {
        let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..Default::default() };
        let ys = dopri5_at(|x, _| x.cos(), 3.0, 3f64.sin(), &[1.0, 0.0], opts).unwrap();
        assert_relative_eq!(ys[0], 1f64.sin(), epsilon = 1e-11);
        assert!(ys[1].abs() < 1e-11);
    }

    #[test]
    fn observer_stops() {
        let mut s = Dopri5::new(|_, y| y * y, 0.0, 1.0, OdeOptions::default());
        let end = s.advance_to(2.0, |_, y, _| if y > 10.0 { Control::Stop } else { Control::Continue }).unwrap();
        assert!(end.stopped);
        assert!(end.x < 1.0 && end.y > 10.0);
    }

    #[test]
    fn radau_order_three() {
        // y' = -y + x, exact y = x - 1 + 2 e^-x
        let f = |x: f64, y: f64| -y + x;
        let j = |_: f64, _: f64| -1.0;
        let exact = |x: f64| x - 1.0 + 2.0 * (-x).exp();
        let err = |n: usize| {
            let h = 1.0 / n as f64;
            let mut y = 1.0;
            for k in 0..n {
                y = radau_iia_step(&f, &j, k as f64 * h, y, h).unwrap();
            }
            (y - exact(1.0)).abs()
        };
        let order = (err(20) / err(40)).log2();
        assert!(order > 2.8 && order < 3.3, "observed order {order}");
    }

    #[test]
    fn radau_stiff_stable() {
        let f = |_: f64, y: f64| -1e6 * y;
        let j = |_: f64, _: f64| -1e6;
        let mut y = 1.0;
        for k in 0..10 {
            y = radau_iia_step(&f, &j, k as f64 * 0.1, y, 0.1).unwrap();
        }
        assert!(y.abs() < 1e-20);
    }
}
