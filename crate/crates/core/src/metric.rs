//! Metric models: the exact hyperbolic ball and product-form collar
//! perturbations supported near infinity.
//!
//! In the collar chart the metric is `(dx² + H(x, y, dy))/x²` with
//! `H(x, y) = (1 − x²/4)²·h_round(y) + δH(x, y)`; the unperturbed family is
//! the ball metric `4 dz²/(1 − |z|²)²` written in collar coordinates.
//! Perturbations are finite sums of separable terms `scale·a(x)·T(y)` drawn
//! from a small registry of built-ins; the amplitude profiles return exact
//! zero outside their support, so all geometric quantities coincide
//! bit-for-bit with the exact model for `x ≥ x_supp`.

#[allow(unused_imports)]
use num_traits::Float;

use crate::chart::{self, Atlas, ChartId, M3, V3};
use crate::error::{CoreError, Result};
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Ball,
    PerturbedCollar,
}

/// Smooth compactly supported amplitude profile in the collar variable.
#[derive(Debug, Clone, Copy)]
pub enum AmplitudeProfile {
    /// `exp(1 − w²/((x−lo)(hi−x)))` on `(lo, hi)`, exact zero outside;
    /// peak value 1 at the midpoint.
    Bump { lo: f64, hi: f64 },
}

impl AmplitudeProfile {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            AmplitudeProfile::Bump { lo, hi } => {
                if x <= lo || x >= hi {
                    return 0.0;
                }
                let w = 0.5 * (hi - lo);
                (1.0 - w * w / ((x - lo) * (hi - x))).exp()
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            AmplitudeProfile::Bump { lo, hi } => {
                if x <= lo || x >= hi {
                    return 0.0;
                }
                let w = 0.5 * (hi - lo);
                let p = (x - lo) * (hi - x);
                let dp = hi + lo - 2.0 * x;
                self.value(x) * w * w * dp / (p * p)
            }
        }
    }

    pub fn support_hi(&self) -> f64 {
        match *self {
            AmplitudeProfile::Bump { hi, .. } => hi,
        }
    }
}

/// Boundary tensor modes. Components are produced in whatever collar frame is
/// active; the modes are defined through the ambient direction vector, so they
/// are covariant under the frame rotations used for pole avoidance.
#[derive(Debug, Clone, Copy)]
pub enum TensorMode {
    /// `P_ℓ(u·e₃) · h_round`, a conformal mode (n = 2; for n = 1 the direction
    /// product degenerates to `cos` of a multiple of the angle, so use `CosK`).
    ConformalP2,
    /// Restriction to the boundary sphere of an ambient quadratic form
    /// `u ↦ B(du, du)` with `B = diag(1, −1, 0)`; anisotropic (n = 2).
    Shear,
    /// `cos(kθ) dθ²` (n = 1).
    CosK { k: u32 },
}

/// One separable perturbation term `scale · a(x) · T(y)`.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationTerm {
    pub amplitude: AmplitudeProfile,
    pub tensor: TensorMode,
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CollarPerturbation {
    pub terms: Vec<PerturbationTerm>,
}

/// Asymptotically hyperbolic metric model.
#[derive(Debug, Clone)]
pub struct AHMetric {
    n: usize,
    model: Model,
    perturbation: CollarPerturbation,
    x_supp: f64,
    atlas: Atlas,
}

/// Pointwise metric data: `g`, its inverse and the volume density.
/// Inactive slots are padded with 1 on the diagonal.
#[derive(Debug, Clone, Copy)]
pub struct MetricEval {
    pub g: M3,
    pub g_star: M3,
    pub sqrt_det_g: f64,
}

/// Collar coefficient bundle: `γ = ∂_x log √det H`, the boundary block `H`
/// (top-left n×n, padded) and its x-derivative.
#[derive(Debug, Clone, Copy)]
pub struct CollarData {
    pub gamma: f64,
    pub h: M3,
    pub dh_dx: M3,
}

pub const DEFAULT_X_SUPP: f64 = 0.2;

impl AHMetric {
    pub fn ball(n: usize) -> Self {
        AHMetric {
            n,
            model: Model::Ball,
            perturbation: CollarPerturbation::default(),
            x_supp: DEFAULT_X_SUPP,
            atlas: Atlas::new(n),
        }
    }

    pub fn perturbed_collar(
        n: usize,
        x_supp: f64,
        perturbation: CollarPerturbation,
    ) -> Result<Self> {
        if !(x_supp > 0.0 && x_supp < 1.0) {
            return Err(CoreError::InvalidArgument { detail: "x_supp must lie in (0, 1)" });
        }
        for term in &perturbation.terms {
            if term.amplitude.support_hi() > x_supp + 1e-15 {
                return Err(CoreError::InvalidArgument {
                    detail: "perturbation amplitude support exceeds x_supp",
                });
            }
            match (n, term.tensor) {
                (1, TensorMode::CosK { .. }) => {}
                (2, TensorMode::ConformalP2) | (2, TensorMode::Shear) => {}
                _ => {
                    return Err(CoreError::InvalidArgument {
                        detail: "tensor mode not available in this dimension",
                    })
                }
            }
        }
        let m = AHMetric {
            n,
            model: Model::PerturbedCollar,
            perturbation,
            x_supp,
            atlas: Atlas::new(n),
        };
        m.check_positive_definite()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n + 1
    }

    pub fn model(&self) -> Model {
        self.model
    }

    pub fn x_supp(&self) -> f64 {
        self.x_supp
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    pub fn is_exact_ball(&self) -> bool {
        self.model == Model::Ball || self.perturbation.terms.is_empty()
    }

    /// Smallest eigenvalue of `H` over a sampling grid; construction rejects
    /// perturbations that fail positivity.
    fn check_positive_definite(&self) -> Result<()> {
        for i in 1..40 {
            let x = self.x_supp * i as f64 / 40.0;
            for j in 0..24 {
                let a = core::f64::consts::PI * (j as f64 + 0.5) / 24.0;
                for k in 0..24 {
                    let b = 2.0 * core::f64::consts::PI * k as f64 / 24.0;
                    let y = if self.n == 1 { (b, 0.0) } else { (a, b) };
                    let h = self.collar_h(x, y, chart::SphereFrame::PoleZ);
                    let min_eig = min_eig_block(&h, self.n);
                    if min_eig <= 0.0 {
                        return Err(CoreError::InvalidArgument {
                            detail: "perturbed H not positive definite",
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// The boundary block `H(x, y)` in the given collar frame, as a padded
    /// matrix with the active n×n block in the top-left corner.
    pub fn collar_h(&self, x: f64, y: (f64, f64), frame: chart::SphereFrame) -> M3 {
        let c = 1.0 - x * x / 4.0;
        let mut h = round_block(self.n, y);
        h *= c * c;
        for term in &self.perturbation.terms {
            let a = term.scale * term.amplitude.value(x);
            if a != 0.0 {
                h += a * tensor_block(self.n, term.tensor, y, frame);
            }
        }
        pad_block(&mut h, self.n);
        h
    }

    fn collar_h_dx(&self, x: f64, y: (f64, f64), frame: chart::SphereFrame) -> M3 {
        let c = 1.0 - x * x / 4.0;
        let mut dh = round_block(self.n, y);
        dh *= 2.0 * c * (-x / 2.0);
        for term in &self.perturbation.terms {
            let da = term.scale * term.amplitude.derivative(x);
            if da != 0.0 {
                dh += da * tensor_block(self.n, term.tensor, y, frame);
            }
        }
        zero_pad_block(&mut dh, self.n);
        dh
    }

    fn collar_h_dy(&self, x: f64, y: (f64, f64), frame: chart::SphereFrame, a: usize) -> M3 {
        let c = 1.0 - x * x / 4.0;
        let mut dh = round_block_dy(self.n, y, a);
        dh *= c * c;
        for term in &self.perturbation.terms {
            let amp = term.scale * term.amplitude.value(x);
            if amp != 0.0 {
                dh += amp * tensor_block_dy(self.n, term.tensor, y, frame, a);
            }
        }
        zero_pad_block(&mut dh, self.n);
        dh
    }

    fn collar_y(&self, z: &V3) -> (f64, f64) {
        if self.n == 1 {
            (z[1], 0.0)
        } else {
            (z[1], z[2])
        }
    }

    /// Pointwise metric, inverse and volume density in the given chart.
    pub fn metric_eval(&self, chart_id: ChartId, z: &V3) -> Result<MetricEval> {
        match chart_id {
            ChartId::Ball => {
                let rho2 = ball_rho2(self.n, z);
                if !(rho2 < 1.0) {
                    return Err(CoreError::ChartDomain { chart: "ball", detail: "|z| >= 1" });
                }
                if self.model == Model::PerturbedCollar {
                    let x = chart::x_of_ball_radius(rho2.sqrt());
                    if x <= self.x_supp {
                        return Err(CoreError::ChartDomain {
                            chart: "ball",
                            detail: "perturbed region must be evaluated in the collar chart",
                        });
                    }
                }
                let c = 2.0 / (1.0 - rho2);
                let w = 1.0 / (c * c);
                let mut g = M3::identity() * (c * c);
                let mut gs = M3::identity() * w;
                pad_diag(&mut g, self.dim());
                pad_diag(&mut gs, self.dim());
                Ok(MetricEval { g, g_star: gs, sqrt_det_g: c.powi(self.dim() as i32) })
            }
            ChartId::Collar(frame) => {
                let x = z[0];
                if !(x > 0.0 && x <= 2.0) {
                    return Err(CoreError::ChartDomain { chart: "collar", detail: "x not in (0, 2]" });
                }
                let y = self.collar_y(z);
                let h = self.collar_h(x, y, frame);
                let x2 = x * x;
                let mut g = M3::zeros();
                g[(0, 0)] = 1.0 / x2;
                let mut gs = M3::zeros();
                gs[(0, 0)] = x2;
                let (hinv, det_h) = invert_block(&h, self.n);
                for a in 0..self.n {
                    for b in 0..self.n {
                        g[(1 + a, 1 + b)] = h[(a, b)] / x2;
                        gs[(1 + a, 1 + b)] = x2 * hinv[(a, b)];
                    }
                }
                pad_diag(&mut g, self.dim());
                pad_diag(&mut gs, self.dim());
                let sqrt_det = det_h.max(0.0).sqrt() / x.powi(self.dim() as i32);
                Ok(MetricEval { g, g_star: gs, sqrt_det_g: sqrt_det })
            }
        }
    }

    /// Dual metric `g*` together with its analytic first derivatives
    /// `∂g*/∂z_k` in the given chart (inactive derivative slots are zero).
    pub fn dual_with_derivs(&self, chart_id: ChartId, z: &V3) -> Result<(M3, [M3; 3])> {
        match chart_id {
            ChartId::Ball => {
                let rho2 = ball_rho2(self.n, z);
                if !(rho2 < 1.0) {
                    return Err(CoreError::ChartDomain { chart: "ball", detail: "|z| >= 1" });
                }
                if self.model == Model::PerturbedCollar {
                    let x = chart::x_of_ball_radius(rho2.sqrt());
                    if x <= self.x_supp {
                        return Err(CoreError::ChartDomain {
                            chart: "ball",
                            detail: "perturbed region must be evaluated in the collar chart",
                        });
                    }
                }
                let one_m = 1.0 - rho2;
                let mut gs = M3::identity() * (one_m * one_m / 4.0);
                pad_diag(&mut gs, self.dim());
                let mut d = [M3::zeros(); 3];
                for k in 0..self.dim() {
                    let mut dk = M3::identity() * (-z[k] * one_m);
                    zero_pad_diag(&mut dk, self.dim());
                    d[k] = dk;
                }
                Ok((gs, d))
            }
            ChartId::Collar(frame) => {
                let x = z[0];
                if !(x > 0.0 && x <= 2.0) {
                    return Err(CoreError::ChartDomain { chart: "collar", detail: "x not in (0, 2]" });
                }
                let y = self.collar_y(z);
                let h = self.collar_h(x, y, frame);
                let (hinv, _) = invert_block(&h, self.n);
                let x2 = x * x;

                let mut gs = M3::zeros();
                gs[(0, 0)] = x2;
                let mut dgs = [M3::zeros(); 3];
                dgs[0][(0, 0)] = 2.0 * x;

                let dhx = self.collar_h_dx(x, y, frame);
                let dhinv_dx = -block_mul(&block_mul(&hinv, &dhx, self.n), &hinv, self.n);
                for a in 0..self.n {
                    for b in 0..self.n {
                        gs[(1 + a, 1 + b)] = x2 * hinv[(a, b)];
                        dgs[0][(1 + a, 1 + b)] =
                            2.0 * x * hinv[(a, b)] + x2 * dhinv_dx[(a, b)];
                    }
                }
                for c in 0..self.n {
                    let dhy = self.collar_h_dy(x, y, frame, c);
                    let dhinv = -block_mul(&block_mul(&hinv, &dhy, self.n), &hinv, self.n);
                    for a in 0..self.n {
                        for b in 0..self.n {
                            dgs[1 + c][(1 + a, 1 + b)] = x2 * dhinv[(a, b)];
                        }
                    }
                }
                pad_diag(&mut gs, self.dim());
                Ok((gs, dgs))
            }
        }
    }

    /// Collar coefficients: `γ = ∂_x log √det H`, `H` and `∂H/∂x`.
    pub fn collar_coefficients(&self, x: f64, y: (f64, f64)) -> Result<CollarData> {
        if !(x > 0.0 && x <= 2.0) {
            return Err(CoreError::ChartDomain { chart: "collar", detail: "x not in (0, 2]" });
        }
        let frame = chart::SphereFrame::PoleZ;
        let h = self.collar_h(x, y, frame);
        let dh_dx = self.collar_h_dx(x, y, frame);
        let (hinv, _) = invert_block(&h, self.n);
        // γ = ½ tr(H⁻¹ ∂H/∂x)
        let mut gamma = 0.0;
        for a in 0..self.n {
            for b in 0..self.n {
                gamma += hinv[(a, b)] * dh_dx[(b, a)];
            }
        }
        Ok(CollarData { gamma: 0.5 * gamma, h, dh_dx })
    }

    /// Chart transition for a base point (see [`chart::to_chart`]).
    pub fn chart_transition(&self, from: ChartId, z: &V3, target: ChartId) -> Result<V3> {
        chart::to_chart(&self.atlas, from, z, target)
    }

    /// Boundary metric block `H(0, y)` (equals the round metric for built-in
    /// perturbations whose cutoff vanishes at the boundary face).
    pub fn boundary_h(&self, y: (f64, f64)) -> M3 {
        // The bump amplitudes return exact zero at x = 0; evaluate in the limit.
        let c = 1.0;
        let mut h = round_block(self.n, y);
        h *= c;
        for term in &self.perturbation.terms {
            let a = term.scale * limit_amp_at_zero(term.amplitude);
            if a != 0.0 {
                h += a * tensor_block(self.n, term.tensor, y, chart::SphereFrame::PoleZ);
            }
        }
        pad_block(&mut h, self.n);
        h
    }
}

fn limit_amp_at_zero(a: AmplitudeProfile) -> f64 {
    match a {
        AmplitudeProfile::Bump { lo, .. } => {
            if lo <= 0.0 {
                0.0 // vanishes to all orders at the left end
            } else {
                0.0
            }
        }
    }
}

/// Capped boundary defining function: `ρ = x` for `x ≤ 0.8`, quintic blend to
/// 1 on `[0.8, 1.2]`, constant 1 beyond.
pub fn rho_of_x(x: f64) -> f64 {
    if x <= 0.8 {
        x
    } else if x >= 1.2 {
        1.0
    } else {
        let t = (x - 0.8) / 0.4;
        let h01 = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let h10 = t * (1.0 + t * t * (-6.0 + 8.0 * t - 3.0 * t * t));
        0.8 + 0.2 * h01 + 0.4 * h10
    }
}

/// Derivative of [`rho_of_x`].
pub fn drho_dx(x: f64) -> f64 {
    if x <= 0.8 {
        1.0
    } else if x >= 1.2 {
        0.0
    } else {
        let t = (x - 0.8) / 0.4;
        let dh01 = 30.0 * t * t * (1.0 - 2.0 * t + t * t);
        let dh10 = 1.0 + t * t * (-18.0 + 32.0 * t - 15.0 * t * t);
        (0.2 * dh01 + 0.4 * dh10) / 0.4
    }
}

fn ball_rho2(n: usize, z: &V3) -> f64 {
    if n == 1 {
        z[0] * z[0] + z[1] * z[1]
    } else {
        z.norm_squared()
    }
}

fn round_block(n: usize, y: (f64, f64)) -> M3 {
    let mut h = M3::zeros();
    if n == 1 {
        h[(0, 0)] = 1.0;
    } else {
        h[(0, 0)] = 1.0;
        h[(1, 1)] = y.0.sin() * y.0.sin();
    }
    h
}

fn round_block_dy(n: usize, y: (f64, f64), a: usize) -> M3 {
    let mut dh = M3::zeros();
    if n == 2 && a == 0 {
        dh[(1, 1)] = 2.0 * y.0.sin() * y.0.cos();
    }
    dh
}

/// Direction vector and its y-derivatives for the active frame (n = 2).
fn frame_direction(y: (f64, f64), frame: chart::SphereFrame) -> (V3, [V3; 2], [[V3; 2]; 2]) {
    let (phi, psi) = y;
    let rt = frame.rotation().transpose();
    let u = rt * V3::new(phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos());
    let du = [
        rt * V3::new(phi.cos() * psi.cos(), phi.cos() * psi.sin(), -phi.sin()),
        rt * V3::new(-phi.sin() * psi.sin(), phi.sin() * psi.cos(), 0.0),
    ];
    let ddu = [
        [
            rt * V3::new(-phi.sin() * psi.cos(), -phi.sin() * psi.sin(), -phi.cos()),
            rt * V3::new(-phi.cos() * psi.sin(), phi.cos() * psi.cos(), 0.0),
        ],
        [
            rt * V3::new(-phi.cos() * psi.sin(), phi.cos() * psi.cos(), 0.0),
            rt * V3::new(-phi.sin() * psi.cos(), -phi.sin() * psi.sin(), 0.0),
        ],
    ];
    (u, du, ddu)
}

const SHEAR_FORM: [f64; 3] = [1.0, -1.0, 0.0];

fn tensor_block(n: usize, mode: TensorMode, y: (f64, f64), frame: chart::SphereFrame) -> M3 {
    let mut t = M3::zeros();
    match mode {
        TensorMode::CosK { k } => {
            debug_assert_eq!(n, 1);
            t[(0, 0)] = (k as f64 * y.0).cos();
        }
        TensorMode::ConformalP2 => {
            let (u, _, _) = frame_direction(y, frame);
            let p2 = 0.5 * (3.0 * u[2] * u[2] - 1.0);
            t = p2 * round_block(2, y);
        }
        TensorMode::Shear => {
            let (_, du, _) = frame_direction(y, frame);
            for a in 0..2 {
                for b in 0..2 {
                    t[(a, b)] = (0..3).map(|i| SHEAR_FORM[i] * du[a][i] * du[b][i]).sum();
                }
            }
        }
    }
    t
}

fn tensor_block_dy(
    n: usize,
    mode: TensorMode,
    y: (f64, f64),
    frame: chart::SphereFrame,
    c: usize,
) -> M3 {
    let mut t = M3::zeros();
    match mode {
        TensorMode::CosK { k } => {
            debug_assert_eq!(n, 1);
            if c == 0 {
                let kf = k as f64;
                t[(0, 0)] = -kf * (kf * y.0).sin();
            }
        }
        TensorMode::ConformalP2 => {
            let (u, du, _) = frame_direction(y, frame);
            let p2 = 0.5 * (3.0 * u[2] * u[2] - 1.0);
            let dp2 = 3.0 * u[2] * du[c][2];
            t = dp2 * round_block(2, y) + p2 * round_block_dy(2, y, c);
        }
        TensorMode::Shear => {
            let (_, du, ddu) = frame_direction(y, frame);
            for a in 0..2 {
                for b in 0..2 {
                    t[(a, b)] = (0..3)
                        .map(|i| {
                            SHEAR_FORM[i] * (ddu[c][a][i] * du[b][i] + du[a][i] * ddu[c][b][i])
                        })
                        .sum();
                }
            }
        }
    }
    t
}

fn pad_block(h: &mut M3, n: usize) {
    for k in n..3 {
        h[(k, k)] = 1.0;
    }
}

fn zero_pad_block(_h: &mut M3, _n: usize) {}

fn pad_diag(m: &mut M3, dim: usize) {
    for k in dim..3 {
        m[(k, k)] = 1.0;
    }
}

fn zero_pad_diag(m: &mut M3, dim: usize) {
    for k in dim..3 {
        m[(k, k)] = 0.0;
    }
}

/// Inverse and determinant of the active top-left n×n block (padding ignored).
fn invert_block(h: &M3, n: usize) -> (M3, f64) {
    let mut inv = M3::zeros();
    let det;
    if n == 1 {
        det = h[(0, 0)];
        inv[(0, 0)] = 1.0 / det;
    } else {
        det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        inv[(0, 0)] = h[(1, 1)] / det;
        inv[(1, 1)] = h[(0, 0)] / det;
        inv[(0, 1)] = -h[(0, 1)] / det;
        inv[(1, 0)] = -h[(1, 0)] / det;
    }
    (inv, det)
}

fn block_mul(a: &M3, b: &M3, n: usize) -> M3 {
    let mut c = M3::zeros();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                c[(i, j)] += a[(i, k)] * b[(k, j)];
            }
        }
    }
    c
}

fn min_eig_block(h: &M3, n: usize) -> f64 {
    if n == 1 {
        h[(0, 0)]
    } else {
        let tr = h[(0, 0)] + h[(1, 1)];
        let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        tr / 2.0 - disc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chart::SphereFrame;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn sample_perturbation(n: usize) -> CollarPerturbation {
        let terms = if n == 1 {
            alloc::vec![PerturbationTerm {
                amplitude: AmplitudeProfile::Bump { lo: 0.0, hi: 0.2 },
                tensor: TensorMode::CosK { k: 2 },
                scale: 0.3,
            }]
        } else {
            alloc::vec![
                PerturbationTerm {
                    amplitude: AmplitudeProfile::Bump { lo: 0.0, hi: 0.2 },
                    tensor: TensorMode::ConformalP2,
                    scale: 0.3,
                },
                PerturbationTerm {
                    amplitude: AmplitudeProfile::Bump { lo: 0.02, hi: 0.18 },
                    tensor: TensorMode::Shear,
                    scale: 0.15,
                },
            ]
        };
        CollarPerturbation { terms }
    }

    #[test]
    fn ball_metric_at_origin_is_four_identity() {
        let m = AHMetric::ball(2);
        let e = m.metric_eval(ChartId::Ball, &V3::zeros()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(e.g[(i, i)], 4.0, epsilon = 1e-15);
            assert_relative_eq!(e.g_star[(i, i)], 0.25, epsilon = 1e-15);
        }
        assert_relative_eq!(e.sqrt_det_g, 8.0, epsilon = 1e-14);
    }

    #[test]
    fn collar_edge_x2_keeps_radial_block() {
        // H(2, y) = 0 at the chart edge; the dx²/x² block must survive.
        let m = AHMetric::ball(2);
        let e = m.metric_eval(ChartId::Collar(SphereFrame::PoleZ), &V3::new(2.0, 1.0, 0.3)).unwrap();
        assert_relative_eq!(e.g[(0, 0)], 0.25, epsilon = 1e-15);
        assert!(e.g[(1, 1)].abs() < 1e-28);
    }

    #[test]
    fn inverse_identity_at_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2] {
            let m = AHMetric::ball(n);
            for _ in 0..100 {
                let z = if n == 1 {
                    V3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0)
                } else {
                    V3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                };
                let e = m.metric_eval(ChartId::Ball, &z).unwrap();
                let prod = e.g * e.g_star;
                for i in 0..3 {
                    for j in 0..3 {
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert_relative_eq!(prod[(i, j)], expect, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn collar_h_matches_ball_pullback_at_random_points() {
        // Establishes H(x) = (1 − x²/4)² h_round by pulling the ball metric
        // through the chart transition at 100 random points.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = AHMetric::ball(2);
        let atlas = m.atlas();
        for _ in 0..100 {
            let z = V3::new(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.6..0.6),
            );
            if ball_rho2(2, &z) < 0.01 {
                continue;
            }
            let target = ChartId::Collar(SphereFrame::PoleZ);
            let c = match chart::to_chart(atlas, ChartId::Ball, &z, target) {
                Ok(c) => c,
                Err(_) => continue,
            };
            let j = chart::jacobian(atlas, target, &c, ChartId::Ball).unwrap();
            let g_ball = m.metric_eval(ChartId::Ball, &z).unwrap().g;
            let g_pulled = j.transpose() * g_ball * j;
            let g_collar = m.metric_eval(target, &c).unwrap().g;
            for i in 0..3 {
                for k in 0..3 {
                    assert_relative_eq!(
                        g_pulled[(i, k)],
                        g_collar[(i, k)],
                        epsilon = 1e-10,
                        max_relative = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn gamma_closed_form_and_finite_difference() {
        let m = AHMetric::ball(2);
        for &x in &[0.1, 0.5, 1.0, 1.5] {
            let d = m.collar_coefficients(x, (1.1, 0.4)).unwrap();
            assert_relative_eq!(d.gamma, -x / (1.0 - x * x / 4.0), max_relative = 1e-12);
            // central-difference cross check of γ = ∂_x log √det H
            let h = 1e-5;
            let dp = m.collar_coefficients(x + h, (1.1, 0.4)).unwrap();
            let dm = m.collar_coefficients(x - h, (1.1, 0.4)).unwrap();
            let det = |cd: &CollarData| (cd.h[(0, 0)] * cd.h[(1, 1)]).sqrt();
            let fd = (det(&dp).ln() - det(&dm).ln()) / (2.0 * h);
            assert_relative_eq!(d.gamma, fd, max_relative = 1e-8);
        }
        // x → 0 limit
        let d0 = m.collar_coefficients(1e-8, (1.1, 0.4)).unwrap();
        assert!(d0.gamma.abs() < 1e-7);
    }

    #[test]
    fn perturbation_is_local_bit_for_bit() {
        for n in [1usize, 2] {
            let p = AHMetric::perturbed_collar(n, 0.2, sample_perturbation(n)).unwrap();
            let b = AHMetric::ball(n);
            for &x in &[0.2, 0.35, 1.0, 1.9] {
                let y = (0.9, 1.7);
                let hp = p.collar_h(x, y, SphereFrame::PoleZ);
                let hb = b.collar_h(x, y, SphereFrame::PoleZ);
                assert_eq!(hp, hb);
                let gp = p.collar_coefficients(x, y).unwrap();
                let gb = b.collar_coefficients(x, y).unwrap();
                assert_eq!(gp.gamma, gb.gamma);
            }
            // and differs somewhere inside the support
            let inside = p.collar_h(0.1, (0.9, 1.7), SphereFrame::PoleZ);
            let ball_inside = b.collar_h(0.1, (0.9, 1.7), SphereFrame::PoleZ);
            assert!(inside != ball_inside);
        }
    }

    #[test]
    fn perturbed_h_positive_definite_on_grid() {
        for n in [1usize, 2] {
            let p = AHMetric::perturbed_collar(n, 0.2, sample_perturbation(n)).unwrap();
            for i in 1..30 {
                let x = 0.2 * i as f64 / 30.0;
                for j in 0..16 {
                    let phi = core::f64::consts::PI * (j as f64 + 0.5) / 16.0;
                    for k in 0..16 {
                        let psi = 2.0 * core::f64::consts::PI * k as f64 / 16.0;
                        let y = if n == 1 { (psi, 0.0) } else { (phi, psi) };
                        let h = p.collar_h(x, y, SphereFrame::PoleZ);
                        assert!(min_eig_block(&h, n) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn dual_derivatives_match_finite_differences() {
        let p = AHMetric::perturbed_collar(2, 0.2, sample_perturbation(2)).unwrap();
        let chart_id = ChartId::Collar(SphereFrame::PoleZ);
        let z = V3::new(0.11, 1.2, 0.7);
        let (_, d) = p.dual_with_derivs(chart_id, &z).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[k] += h;
            zm[k] -= h;
            let gp = p.dual_with_derivs(chart_id, &zp).unwrap().0;
            let gm = p.dual_with_derivs(chart_id, &zm).unwrap().0;
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (gp[(i, j)] - gm[(i, j)]) / (2.0 * h);
                    assert_relative_eq!(d[k][(i, j)], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
        // ball chart too
        let m = AHMetric::ball(2);
        let zb = V3::new(0.2, -0.3, 0.1);
        let (_, db) = m.dual_with_derivs(ChartId::Ball, &zb).unwrap();
        for k in 0..3 {
            let h = 1e-6;
            let mut zp = zb;
            let mut zm = zb;
            zp[k] += h;
            zm[k] -= h;
            let gp = m.dual_with_derivs(ChartId::Ball, &zp).unwrap().0;
            let gm = m.dual_with_derivs(ChartId::Ball, &zm).unwrap().0;
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (gp[(i, j)] - gm[(i, j)]) / (2.0 * h);
                    assert_relative_eq!(db[k][(i, j)], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn rho_cap_is_smooth_and_monotone() {
        assert_relative_eq!(rho_of_x(0.5), 0.5);
        assert_relative_eq!(rho_of_x(1.5), 1.0);
        let mut prev = 0.0;
        for i in 0..200 {
            let x = 2.0 * i as f64 / 200.0 + 1e-3;
            let r = rho_of_x(x);
            assert!(r >= prev - 1e-14);
            prev = r;
            let fd = (rho_of_x(x + 1e-6) - rho_of_x(x - 1e-6)) / 2e-6;
            assert_relative_eq!(drho_dx(x), fd, epsilon = 1e-6);
        }
    }
}
