//! Charts on the ball model and the boundary collar, with transitions.
//!
//! Points are stored as padded 3-vectors; for boundary dimension `n = 1` only
//! the first two slots are active and the third is kept at zero (the ball
//! model of the hyperbolic plane is the equatorial slice of the 3-ball).
//!
//! Ball chart: `z` with `|z| < 1`. Collar chart: `(x, y)` with `x ∈ (0, 2]`
//! the collar variable and `y` parametrizing the boundary sphere — an angle
//! for `n = 1`, colatitude/longitude for `n = 2`. For `n = 2` the collar chart
//! comes in two rotated frames so trajectories near a parametrization pole can
//! be handed to a chart whose pole lies elsewhere.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{CoreError, Result};
use nalgebra::{Matrix3, Matrix6, Vector3};

pub type V3 = Vector3<f64>;
pub type M3 = Matrix3<f64>;
pub type M6 = Matrix6<f64>;

/// Orientation of the collar sphere parametrization (`n = 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SphereFrame {
    /// Pole along the ambient z-axis (identity frame).
    PoleZ,
    /// Pole along the ambient x-axis.
    PoleX,
}

impl SphereFrame {
    /// Rotation taking ambient coordinates to frame coordinates.
    pub fn rotation(self) -> M3 {
        match self {
            SphereFrame::PoleZ => M3::identity(),
            // Rotation about e2 taking the ambient x-axis to the frame pole.
            SphereFrame::PoleX => M3::new(0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0),
        }
    }
}

/// Chart identifier carried by every phase-space point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartId {
    Ball,
    Collar(SphereFrame),
}

impl ChartId {
    pub fn name(self) -> &'static str {
        match self {
            ChartId::Ball => "ball",
            ChartId::Collar(SphereFrame::PoleZ) => "collar",
            ChartId::Collar(SphereFrame::PoleX) => "collar-x",
        }
    }
}

/// Chart bookkeeping: boundary dimension and the pole-exclusion band.
#[derive(Debug, Clone, Copy)]
pub struct Atlas {
    pub n: usize,
    /// Pole-exclusion band for the colatitude (radians), `n = 2` only.
    pub pole_band: f64,
}

pub const DEFAULT_POLE_BAND: f64 = 1e-3;

impl Atlas {
    pub fn new(n: usize) -> Self {
        assert!(n == 1 || n == 2, "supported boundary dimensions are 1 and 2");
        Atlas { n, pole_band: DEFAULT_POLE_BAND }
    }

    pub fn dim(&self) -> usize {
        self.n + 1
    }
}

/// Collar variable of a ball point: `x = 2(1 − |z|)/(1 + |z|)`.
pub fn x_of_ball_radius(rho: f64) -> f64 {
    2.0 * (1.0 - rho) / (1.0 + rho)
}

/// Ball radius of a collar variable: `|z| = (2 − x)/(2 + x)`.
pub fn ball_radius_of_x(x: f64) -> f64 {
    (2.0 - x) / (2.0 + x)
}

/// Collar variable at a point given in any chart.
pub fn x_at(atlas: &Atlas, chart: ChartId, z: &V3) -> f64 {
    match chart {
        ChartId::Ball => x_of_ball_radius(ball_norm(atlas, z)),
        ChartId::Collar(_) => z[0],
    }
}

fn ball_norm(atlas: &Atlas, z: &V3) -> f64 {
    if atlas.n == 1 {
        (z[0] * z[0] + z[1] * z[1]).sqrt()
    } else {
        z.norm()
    }
}

fn check_ball_domain(atlas: &Atlas, z: &V3) -> Result<()> {
    let rho = ball_norm(atlas, z);
    if !(rho < 1.0) || !rho.is_finite() {
        return Err(CoreError::ChartDomain { chart: "ball", detail: "|z| must be < 1" });
    }
    Ok(())
}

fn check_collar_domain(atlas: &Atlas, z: &V3) -> Result<()> {
    let x = z[0];
    if !(x > 0.0 && x <= 2.0) {
        return Err(CoreError::ChartDomain { chart: "collar", detail: "x must lie in (0, 2]" });
    }
    if atlas.n == 2 {
        let phi = z[1];
        if !(phi > atlas.pole_band && phi < core::f64::consts::PI - atlas.pole_band) {
            return Err(CoreError::ChartDomain {
                chart: "collar",
                detail: "colatitude inside the pole-exclusion band",
            });
        }
    }
    Ok(())
}

/// Unit boundary direction (ambient coordinates) of a collar point.
fn collar_direction(atlas: &Atlas, frame: SphereFrame, z: &V3) -> V3 {
    if atlas.n == 1 {
        V3::new(z[1].cos(), z[1].sin(), 0.0)
    } else {
        let (phi, psi) = (z[1], z[2]);
        let u_frame = V3::new(phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos());
        frame.rotation().transpose() * u_frame
    }
}

fn collar_to_ball(atlas: &Atlas, frame: SphereFrame, z: &V3) -> V3 {
    ball_radius_of_x(z[0]) * collar_direction(atlas, frame, z)
}

fn ball_to_collar(atlas: &Atlas, frame: SphereFrame, z: &V3) -> Result<V3> {
    let rho = ball_norm(atlas, z);
    if rho <= 0.0 {
        return Err(CoreError::ChartCoverage { chart: "collar" });
    }
    let x = x_of_ball_radius(rho);
    if atlas.n == 1 {
        Ok(V3::new(x, z[1].atan2(z[0]), 0.0))
    } else {
        let w = frame.rotation() * z;
        let s = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let phi = s.atan2(w[2]);
        if phi <= atlas.pole_band || phi >= core::f64::consts::PI - atlas.pole_band {
            return Err(CoreError::ChartCoverage { chart: "collar" });
        }
        Ok(V3::new(x, phi, w[1].atan2(w[0])))
    }
}

/// Map base coordinates between charts. Identity transitions are exact.
pub fn to_chart(atlas: &Atlas, from: ChartId, z: &V3, target: ChartId) -> Result<V3> {
    match from {
        ChartId::Ball => check_ball_domain(atlas, z)?,
        ChartId::Collar(_) => check_collar_domain(atlas, z)?,
    }
    match (from, target) {
        (a, b) if a == b => Ok(*z),
        (ChartId::Ball, ChartId::Collar(f)) => ball_to_collar(atlas, f, z),
        (ChartId::Collar(f), ChartId::Ball) => Ok(collar_to_ball(atlas, f, z)),
        (ChartId::Collar(f), ChartId::Collar(g)) => {
            ball_to_collar(atlas, g, &collar_to_ball(atlas, f, z))
        }
        _ => unreachable!(),
    }
}

/// Analytic Jacobian `∂(target coords)/∂(source coords)`, padded to 3×3 with a
/// unit in the inactive slot so it stays invertible.
pub fn jacobian(atlas: &Atlas, from: ChartId, z: &V3, target: ChartId) -> Result<M3> {
    match (from, target) {
        (a, b) if a == b => Ok(M3::identity()),
        (ChartId::Ball, ChartId::Collar(f)) => jac_ball_to_collar(atlas, f, z),
        (ChartId::Collar(f), ChartId::Ball) => Ok(jac_collar_to_ball(atlas, f, z)),
        (ChartId::Collar(f), ChartId::Collar(g)) => {
            let mid = collar_to_ball(atlas, f, z);
            Ok(jac_ball_to_collar(atlas, g, &mid)? * jac_collar_to_ball(atlas, f, z))
        }
        _ => unreachable!(),
    }
}

fn jac_collar_to_ball(atlas: &Atlas, frame: SphereFrame, z: &V3) -> M3 {
    let x = z[0];
    let rho = ball_radius_of_x(x);
    let drho_dx = -4.0 / ((2.0 + x) * (2.0 + x));
    if atlas.n == 1 {
        let (c, s) = (z[1].cos(), z[1].sin());
        M3::new(drho_dx * c, -rho * s, 0.0, drho_dx * s, rho * c, 0.0, 0.0, 0.0, 1.0)
    } else {
        let (phi, psi) = (z[1], z[2]);
        let u = V3::new(phi.sin() * psi.cos(), phi.sin() * psi.sin(), phi.cos());
        let du_dphi = V3::new(phi.cos() * psi.cos(), phi.cos() * psi.sin(), -phi.sin());
        let du_dpsi = V3::new(-phi.sin() * psi.sin(), phi.sin() * psi.cos(), 0.0);
        let mut jw = M3::zeros();
        jw.set_column(0, &(drho_dx * u));
        jw.set_column(1, &(rho * du_dphi));
        jw.set_column(2, &(rho * du_dpsi));
        frame.rotation().transpose() * jw
    }
}

fn jac_ball_to_collar(atlas: &Atlas, frame: SphereFrame, z: &V3) -> Result<M3> {
    let rho = ball_norm(atlas, z);
    if rho <= 0.0 {
        return Err(CoreError::ChartCoverage { chart: "collar" });
    }
    let dx_drho = -4.0 / ((1.0 + rho) * (1.0 + rho));
    if atlas.n == 1 {
        let inv_r2 = 1.0 / (rho * rho);
        Ok(M3::new(
            dx_drho * z[0] / rho,
            dx_drho * z[1] / rho,
            0.0,
            -z[1] * inv_r2,
            z[0] * inv_r2,
            0.0,
            0.0,
            0.0,
            1.0,
        ))
    } else {
        let r = frame.rotation();
        let w = r * z;
        let s2 = w[0] * w[0] + w[1] * w[1];
        let s = s2.sqrt();
        if s <= 0.0 {
            return Err(CoreError::ChartCoverage { chart: "collar" });
        }
        let r2 = rho * rho;
        let mut jw = M3::zeros();
        // x row
        jw.set_row(0, &(dx_drho / rho * w.transpose()));
        // colatitude row: phi = atan2(s, w3)
        jw[(1, 0)] = w[0] * w[2] / (r2 * s);
        jw[(1, 1)] = w[1] * w[2] / (r2 * s);
        jw[(1, 2)] = -s / r2;
        // longitude row
        jw[(2, 0)] = -w[1] / s2;
        jw[(2, 1)] = w[0] / s2;
        Ok(jw * r)
    }
}

/// Map a phase-space point `(z, ζ)` to another chart: `ζ` transforms by the
/// inverse-transpose Jacobian.
pub fn phase_to_chart(
    atlas: &Atlas,
    from: ChartId,
    z: &V3,
    zeta: &V3,
    target: ChartId,
) -> Result<(V3, V3)> {
    let z_new = to_chart(atlas, from, z, target)?;
    let j = jacobian(atlas, from, z, target)?;
    let jt_inv = j
        .transpose()
        .try_inverse()
        .ok_or(CoreError::ChartCoverage { chart: target.name() })?;
    Ok((z_new, jt_inv * zeta))
}

/// Full 6×6 tangent map of the phase-space transition at `(z, ζ)`, for
/// transporting variational matrices across a chart switch. The base and
/// cotangent blocks are analytic; the mixed block (dependence of the
/// transformed covector on the base point) is obtained by central differences
/// of the analytic Jacobian, consistent with the crate-wide policy of
/// supplying first derivatives analytically and second derivatives by finite
/// differences.
pub fn tangent_transform(
    atlas: &Atlas,
    from: ChartId,
    z: &V3,
    zeta: &V3,
    target: ChartId,
) -> Result<M6> {
    let j = jacobian(atlas, from, z, target)?;
    let jt_inv = j
        .transpose()
        .try_inverse()
        .ok_or(CoreError::ChartCoverage { chart: target.name() })?;
    let mut t = M6::zeros();
    for i in 0..3 {
        for k in 0..3 {
            t[(i, k)] = j[(i, k)];
            t[(3 + i, 3 + k)] = jt_inv[(i, k)];
        }
    }
    let dim = atlas.dim();
    for k in 0..dim {
        let step = 1e-6 * (1.0 + z[k].abs());
        let mut zp = *z;
        let mut zm = *z;
        zp[k] += step;
        zm[k] -= step;
        let jp = jacobian(atlas, from, &zp, target)?;
        let jm = jacobian(atlas, from, &zm, target)?;
        let zp_new = jp.transpose().try_inverse().unwrap_or(jt_inv) * zeta;
        let zm_new = jm.transpose().try_inverse().unwrap_or(jt_inv) * zeta;
        let col = (zp_new - zm_new) / (2.0 * step);
        for i in 0..3 {
            t[(3 + i, k)] = col[i];
        }
    }
    Ok(t)
}
