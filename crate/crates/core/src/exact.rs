//! Closed-form reference formulas on the exact hyperbolic ball.
//!
//! These are the independent cross-checks the numerical pipelines are tested
//! against: the Möbius distance formula, the radial spreading law, and the
//! d'Alembert reduction of the radial wave equation on the 3-dimensional
//! model. None of them share code with the shooting, transport or
//! finite-difference paths they validate.

#[allow(unused_imports)]
use num_traits::Float;

use crate::chart::V3;
use alloc::vec::Vec;

/// Geodesic distance on the ball model via the Möbius-invariant expression
/// `2 artanh √(|z−z'|² / (|z−z'|² + (1−|z|²)(1−|z'|²)))`.
pub fn ball_distance(n: usize, z: &V3, zp: &V3) -> f64 {
    let d2 = diff_norm2(n, z, zp);
    let a = 1.0 - norm2(n, z);
    let b = 1.0 - norm2(n, zp);
    let t2 = d2 / (d2 + a * b);
    2.0 * t2.sqrt().atanh()
}

/// `cosh` of the ball distance, `1 + 2|z−z'|²/((1−|z|²)(1−|z'|²))`.
pub fn ball_cosh_distance(n: usize, z: &V3, zp: &V3) -> f64 {
    let d2 = diff_norm2(n, z, zp);
    let a = 1.0 - norm2(n, z);
    let b = 1.0 - norm2(n, zp);
    1.0 + 2.0 * d2 / (a * b)
}

fn norm2(n: usize, z: &V3) -> f64 {
    if n == 1 {
        z[0] * z[0] + z[1] * z[1]
    } else {
        z.norm_squared()
    }
}

fn diff_norm2(n: usize, z: &V3, zp: &V3) -> f64 {
    let d = z - zp;
    norm2(n, &d)
}

/// Transverse spreading determinant along a radial geodesic: `sinh^n t`.
pub fn radial_spreading(n: usize, t: f64) -> f64 {
    t.sinh().powi(n as i32)
}

/// d'Alembert oracle for the radial wave equation on the 3-dimensional
/// hyperbolic ball (`n = 2`): with `v = u sinh r`, the shifted wave equation
/// reduces exactly to `v_tt = v_rr` with `v(t, 0) = 0`, so
/// `u(t, r) = [F(r − t) − F(−r − t)]/sinh r` where
/// `F'(ξ) = ½(V₀'(ξ) − V₁(ξ))`, `V₀ = f₁ sinh` and `V₁ = f₂ sinh`
/// odd-extended. The bare forward radiation profile (no unitary
/// normalization) is `x^{-1} u_t` along `t = s − log x`, i.e. `−F'(log 2 − s)`.
pub struct RadialWaveOracle {
    r_max: f64,
    dr: f64,
    /// F' on the symmetric grid ξ ∈ [-r_max, r_max].
    fprime: Vec<f64>,
    /// F on the same grid (F(-r_max) = 0).
    f: Vec<f64>,
}

impl RadialWaveOracle {
    /// Build from initial displacement `f1` (with derivative `df1`) and
    /// initial velocity `f2 = ∂_t u(0, ·)`, both radial and supported inside
    /// `r_max`.
    pub fn new(
        f1: &dyn Fn(f64) -> f64,
        df1: &dyn Fn(f64) -> f64,
        f2: &dyn Fn(f64) -> f64,
        r_max: f64,
        nr: usize,
    ) -> Self {
        let dr = r_max / nr as f64;
        let m = 2 * nr + 1;
        let mut fprime = Vec::with_capacity(m);
        for i in 0..m {
            let xi = -r_max + i as f64 * dr;
            let r = xi.abs();
            // V₀' is even, V₁ odd.
            let v0p = df1(r) * r.sinh() + f1(r) * r.cosh();
            let v1 = xi.signum() * f2(r) * r.sinh();
            fprime.push(0.5 * (v0p - v1));
        }
        // cumulative trapezoid for F
        let mut f = Vec::with_capacity(m);
        let mut acc = 0.0;
        f.push(0.0);
        for i in 1..m {
            acc += 0.5 * dr * (fprime[i - 1] + fprime[i]);
            f.push(acc);
        }
        RadialWaveOracle { r_max, dr, fprime, f }
    }

    fn eval(&self, table: &[f64], xi: f64) -> f64 {
        if xi <= -self.r_max {
            return table[0];
        }
        if xi >= self.r_max {
            return table[table.len() - 1];
        }
        crate::numerics::interp_uniform(table, -self.r_max, self.dr, xi)
    }

    pub fn f_at(&self, xi: f64) -> f64 {
        self.eval(&self.f, xi)
    }

    pub fn fprime_at(&self, xi: f64) -> f64 {
        if xi.abs() >= self.r_max {
            return 0.0;
        }
        self.eval(&self.fprime, xi)
    }

    /// Solution `u(t, r)`.
    pub fn u(&self, t: f64, r: f64) -> f64 {
        if r < 1e-12 {
            // limit r → 0: u = 2F'(-t) by l'Hôpital (v odd in r)
            return 2.0 * self.fprime_at(-t);
        }
        (self.f_at(r - t) - self.f_at(-r - t)) / r.sinh()
    }

    /// Time derivative `∂_t u(t, r)`.
    pub fn ut(&self, t: f64, r: f64) -> f64 {
        if r < 1e-12 {
            let h = 1e-6;
            return (self.u(t + h, 0.0) - self.u(t - h, 0.0)) / (2.0 * h);
        }
        (-self.fprime_at(r - t) + self.fprime_at(-r - t)) / r.sinh()
    }

    /// Bare forward radiation profile `lim x^{-1} ∂_t u(s − log x)` (before
    /// the unitary normalization): `−F'(log 2 − s)`.
    pub fn radiation_bare(&self, s: f64) -> f64 {
        -self.fprime_at(core::f64::consts::LN_2 - s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn distance_examples() {
        // 2 artanh(0.5) = log 3
        let z = V3::zeros();
        let zp = V3::new(0.5, 0.0, 0.0);
        assert_relative_eq!(ball_distance(2, &z, &zp), 3f64.ln(), epsilon = 1e-12);
        // consistency of the two formulas
        let a = V3::new(0.3, -0.2, 0.4);
        let b = V3::new(-0.1, 0.5, 0.2);
        assert_relative_eq!(
            ball_distance(2, &a, &b).cosh(),
            ball_cosh_distance(2, &a, &b),
            max_relative = 1e-13
        );
    }

    #[test]
    fn oracle_satisfies_wave_equation() {
        // residual of u_tt - (1/sinh r)(sinh r · u)_rr ... via the v-form:
        // v = u sinh r must satisfy v_tt = v_rr.
        let f1 = |r: f64| (-(r - 2.0) * (r - 2.0) / 0.08).exp();
        let df1 = |r: f64| -2.0 * (r - 2.0) / 0.08 * f1(r);
        let f2 = |r: f64| 0.7 * (-(r - 2.0) * (r - 2.0) / 0.1).exp();
        let o = RadialWaveOracle::new(&f1, &df1, &f2, 12.0, 24000);
        let h = 1e-3;
        for &(t, r) in &[(0.7, 1.3), (1.9, 3.4), (3.0, 0.9)] {
            let v = |t: f64, r: f64| o.u(t, r) * r.sinh();
            let vtt = (v(t + h, r) - 2.0 * v(t, r) + v(t - h, r)) / (h * h);
            let vrr = (v(t, r + h) - 2.0 * v(t, r) + v(t, r - h)) / (h * h);
            assert_relative_eq!(vtt, vrr, epsilon = 1e-3, max_relative = 1e-3);
        }
        // initial data reproduced
        assert_relative_eq!(o.u(0.0, 2.3), f1(2.3), epsilon = 1e-6);
        assert_relative_eq!(o.ut(0.0, 2.3), f2(2.3), epsilon = 1e-5);
    }
}
