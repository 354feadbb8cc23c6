//! Nonlinear temporary price impact and its convex dual.
//!
//! Trading at rate `θ` shifts execution prices by
//! `f_j(s,θ) = κ(m−1)/m · s_j (𝔖 (𝔖(θ×s))^{(1/(m−1))})_j`, where `x^{(α)}`
//! is the signed power. In the coordinates `y = 𝔖(θ×s)` the cost `θ·f`
//! separates into `κ(m−1)/m Σ |y_j|^{m/(m−1)}`, and its conjugate is
//! `Φ(s,x) = (1/(mκ^{m−1})) Σ |(𝔖^{-1}(x/s))_j|^m`.

use nalgebra::{DMatrix, DVector};

use crate::corrector_md::{matrix_sqrt_spd, CorrectorMD};
use crate::error::{Error, Result};
use crate::merton::check_prices;

/// `sign(x)|x|^α`, zero at the origin.
#[inline]
pub fn signed_pow(x: f64, alpha: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (alpha * x.abs().ln()).exp()
    }
}

#[derive(Debug, Clone)]
pub struct ImpactModel {
    pub kappa: f64,
    pub m: f64,
    pub s_half: DMatrix<f64>,
    pub s_half_inv: DMatrix<f64>,
}

impl ImpactModel {
    /// Builds the model from the covariance `σσᵀ`.
    pub fn new(kappa: f64, m: f64, covariance: &DMatrix<f64>) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
        }
        if !(m > 2.0 && m.is_finite()) {
            return Err(Error::InvalidParameter(format!("impact exponent m must exceed 2, got {m}")));
        }
        let s_half = matrix_sqrt_spd(covariance)?;
        let s_half_inv = s_half
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotSpd("square root is not invertible".into()))?;
        Ok(Self { kappa, m, s_half, s_half_inv })
    }

    /// Shares `𝔖` with a solved corrector.
    pub fn from_corrector(cmd: &CorrectorMD) -> Self {
        Self { kappa: cmd.kappa, m: cmd.m, s_half: cmd.s_half.clone(), s_half_inv: cmd.s_half_inv.clone() }
    }

    pub fn dim(&self) -> usize {
        self.s_half.nrows()
    }

    fn check(&self, s: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
        check_prices(s)
    }

    fn cost_coeff(&self) -> f64 {
        self.kappa * (self.m - 1.0) / self.m
    }

    /// `f(s, θ)`.
    pub fn impact_price_shift(&self, s: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(s, theta)?;
        let alpha = 1.0 / (self.m - 1.0);
        let y = &self.s_half * theta.component_mul(s);
        let inner = &self.s_half * y.map(|v| signed_pow(v, alpha));
        Ok(inner.component_mul(s) * self.cost_coeff())
    }

    /// `θ·f(s,θ) = κ(m−1)/m Σ |(𝔖(θ×s))_j|^{m/(m−1)}`.
    pub fn execution_cost(&self, s: &DVector<f64>, theta: &DVector<f64>) -> Result<f64> {
        self.check(s, theta)?;
        let p = self.m / (self.m - 1.0);
        let y = &self.s_half * theta.component_mul(s);
        Ok(self.cost_coeff() * y.iter().map(|v| crate::corrector1d::abs_pow(*v, p)).sum::<f64>())
    }

    /// `z = 𝔖^{-1}(x/s)`, the coordinates in which `Φ` separates.
    fn dual_coords(&self, s: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.s_half_inv * x.component_div(s)
    }

    /// `Φ(s,x) = (1/(mκ^{m−1})) Σ |(𝔖^{-1}(x/s))_j|^m`.
    pub fn phi(&self, s: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check(s, x)?;
        let z = self.dual_coords(s, x);
        let sum: f64 = z.iter().map(|v| crate::corrector1d::abs_pow(*v, self.m)).sum();
        Ok(sum / (self.m * self.kappa.powf(self.m - 1.0)))
    }

    /// `Φ_x(s,x)_k = κ^{1−m} Σ_j |z_j|^{m−2} z_j (𝔖^{-1})_{jk} / s_k`.
    pub fn phi_grad(&self, s: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(s, x)?;
        let z = self.dual_coords(s, x).map(|v| signed_pow(v, self.m - 1.0));
        let g = self.s_half_inv.transpose() * z;
        Ok(g.component_div(s) * self.kappa.powf(1.0 - self.m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> ImpactModel {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.30, 0.0, 0.09, 0.28]);
        ImpactModel::new(1.3, 3.0, &(&sigma * sigma.transpose())).unwrap()
    }

    fn v(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn zero_rate() {
        let im = model();
        let s = v(1.2, 0.7);
        assert_eq!(im.impact_price_shift(&s, &v(0.0, 0.0)).unwrap(), v(0.0, 0.0));
        assert_eq!(im.execution_cost(&s, &v(0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(im.phi(&s, &v(0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(im.phi_grad(&s, &v(0.0, 0.0)).unwrap(), v(0.0, 0.0));
    }

    #[test]
    fn scalar_reduction() {
        let im = ImpactModel::new(2.0, 3.0, &DMatrix::identity(1, 1)).unwrap();
        let s = DVector::from_vec(vec![1.0]);
        for &th in &[-2.0, -0.3, 0.5, 4.0] {
            let f = im.impact_price_shift(&s, &DVector::from_vec(vec![th])).unwrap()[0];
            assert_relative_eq!(f, 2.0 * 2.0 / 3.0 * signed_pow(th, 0.5), max_relative = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let im = model();
        assert!(matches!(
            im.execution_cost(&v(1.0, 0.0), &v(1.0, 1.0)),
            Err(Error::NonPositivePrice { index: 1, .. })
        ));
        assert!(ImpactModel::new(0.0, 3.0, &DMatrix::identity(2, 2)).is_err());
        assert!(ImpactModel::new(1.0, 2.0, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn cost_matches_price_shift() {
        let im = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = v(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
            let th = v(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let f = im.impact_price_shift(&s, &th).unwrap();
            let c = im.execution_cost(&s, &th).unwrap();
            assert_relative_eq!(th.dot(&f), c, max_relative = 1e-12, epsilon = 1e-14);
            assert!(c > 0.0);
        }
    }

    #[test]
    fn fenchel_young() {
        let im = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let s = v(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
            let x = v(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let th = v(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let phi = im.phi(&s, &x).unwrap();
            assert!(x.dot(&th) <= phi + im.execution_cost(&s, &th).unwrap() + 1e-12);
            let opt = im.phi_grad(&s, &x).unwrap();
            let gap = phi + im.execution_cost(&s, &opt).unwrap() - x.dot(&opt);
            assert!(gap.abs() <= 1e-8 * (1.0 + phi), "gap {gap}");
        }
    }

    /// Maximizes a concave scalar function on `[lo, hi]` by golden sections.
    fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - r * (hi - lo);
            let b = lo + r * (hi - lo);
            if f(a) < f(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        f(0.5 * (lo + hi))
    }

    #[test]
    fn brute_force_conjugate() {
        let im = model();
        let p = im.m / (im.m - 1.0);
        let c = im.kappa * (im.m - 1.0) / im.m;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = v(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let x = v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let phi = im.phi(&s, &x).unwrap();
            // separated scalar problems in y = 𝔖(θ×s)
            let z = &im.s_half_inv * x.component_div(&s);
            let sep: f64 = z
                .iter()
                .map(|&zj| golden_max(|y| zj * y - c * y.abs().powf(p), -50.0, 50.0))
                .sum();
            assert_relative_eq!(sep, phi, max_relative = 1e-8);
            // crude grid search directly over θ, refined around the best cell
            let obj = |th: &DVector<f64>| x.dot(th) - im.execution_cost(&s, th).unwrap();
            let (mut center, mut half) = (v(0.0, 0.0), 1000.0);
            let mut best = f64::NEG_INFINITY;
            for _ in 0..60 {
                let mut arg = center.clone();
                for i in -10..=10 {
                    for j in -10..=10 {
                        let th = &center + v(i as f64, j as f64) * (half / 10.0);
                        let val = obj(&th);
                        if val > best {
                            best = val;
                            arg = th;
                        }
                    }
                }
                center = arg;
                half *= 0.5;
            }
            assert_relative_eq!(best, phi, max_relative = 1e-4);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let im = model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut n = 0;
        while n < 200 {
            let s = v(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let x = v(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let z = &im.s_half_inv * x.component_div(&s);
            if z.iter().any(|c| c.abs() < 1e-2) {
                continue;
            }
            n += 1;
            let g = im.phi_grad(&s, &x).unwrap();
            for k in 0..2 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (im.phi(&s, &xp).unwrap() - im.phi(&s, &xm).unwrap()) / (2.0 * h);
                assert_relative_eq!(fd, g[k], max_relative = 1e-6, epsilon = 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn homogeneity(a in -3.0f64..3.0, b in -3.0f64..3.0, c in 0.01f64..10.0, s0 in 0.1f64..5.0, s1 in 0.1f64..5.0) {
            let im = model();
            let s = v(s0, s1);
            let x = v(a, b);
            let phi = im.phi(&s, &x).unwrap();
            prop_assert!((im.phi(&s, &(&x * c)).unwrap() - c.powf(im.m) * phi).abs() <= 1e-10 * (1.0 + c.powf(im.m) * phi));
            let g = im.phi_grad(&s, &x).unwrap();
            let gc = im.phi_grad(&s, &(&x * c)).unwrap();
            prop_assert!((gc - &g * c.powf(im.m - 1.0)).amax() <= 1e-10 * (1.0 + c.powf(im.m - 1.0) * g.amax()));
            prop_assert!((im.phi_grad(&s, &-&x).unwrap() + &g).amax() == 0.0);
            let cost = im.execution_cost(&s, &x).unwrap();
            let p = im.m / (im.m - 1.0);
            prop_assert!((im.execution_cost(&s, &(&x * c)).unwrap() - c.powf(p) * cost).abs() <= 1e-10 * (1.0 + c.powf(p) * cost));
            prop_assert!(im.impact_price_shift(&s, &-&x).unwrap() == -im.impact_price_shift(&s, &x).unwrap());
        }

        #[test]
        fn cost_midpoint_convexity(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0) {
            let im = model();
            let s = v(1.1, 0.9);
            let (p, q) = (v(a, b), v(c, d));
            let mid = (&p + &q) * 0.5;
            let lhs = im.execution_cost(&s, &mid).unwrap();
            let rhs = 0.5 * (im.execution_cost(&s, &p).unwrap() + im.execution_cost(&s, &q).unwrap());
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
