//! Geometric-optics approximation of the inverse of `P(h,σ) = h²(Δ_g − n²/4) − σ²`:
//! eikonal phase from the shooting distance, amplitude transport along
//! bicharacteristics, boundary exponents, model kernels, normal operators and
//! indicial roots.
//!
//! Conventions: the kernel phase is `e^{−iσr/h}` and `Δ_g` is the positive
//! Laplacian. Expanding `P(h,σ)(e^{−iσr/h}B)` gives
//!
//! ```text
//! e^{−iσr/h} [ σ²(|dr|² − 1)B + ihσ(2⟨dr,dB⟩ − (Δ_g r)B) + h²(Δ_g − n²/4)B ]
//! ```
//!
//! so the first transport equation is `2a₀' = (Δ_g r)a₀` along unit-speed
//! rays, with `Δ_g r = −d/dr log A` and `A` the transverse spreading
//! determinant, and the order-h² term cancels when
//! `−2a₁' + (Δ_g r)a₁ = −(i/σ)(Δ_g − n²/4)a₀` (the sign consistent with this
//! phase convention). Amplitudes are normalized by matching the flat
//! near-diagonal kernel: `a₀(r) = C_n/√A(r)` with `C₂ = 1/4π` and
//! `C₁ = h^{1/2}/√(8π)`.

#[allow(unused_imports)]
use num_traits::Float;

use crate::chart::{ChartId, M3, V3};
use crate::error::{CoreError, Result};
use crate::flow::{self, FlowParams, PhasePoint, Trajectory};
use crate::geodesic::{self, ShootingParams};
use crate::metric::AHMetric;
use crate::numerics;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

/// Semiclassical spectral parameters: `h ∈ (0,1)` and `σ` in the box
/// `[1−ε, 1+ε] × i[−Ch, Ch]` around `1 + i0`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralParams {
    pub h: f64,
    pub sigma: Complex64,
}

pub const BOX_EPS: f64 = 0.2;
pub const BOX_C: f64 = 1.0;

impl SpectralParams {
    pub fn new(h: f64, sigma: Complex64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(CoreError::InvalidArgument { detail: "h must lie in (0,1)" });
        }
        if (sigma.re - 1.0).abs() > BOX_EPS + 1e-12 || sigma.im.abs() > BOX_C * h + 1e-12 {
            return Err(CoreError::InvalidArgument { detail: "sigma outside the box" });
        }
        Ok(SpectralParams { h, sigma })
    }

    /// From the spectral parameter λ: `h = 1/|Re λ|`, `σ = λh`. The map
    /// λ → (h, σ) → λ round-trips exactly.
    pub fn from_lambda(lambda: Complex64) -> Result<Self> {
        if lambda.re.abs() <= 0.0 {
            return Err(CoreError::InvalidArgument { detail: "Re λ must be nonzero" });
        }
        let h = 1.0 / lambda.re.abs();
        SpectralParams::new(h, lambda * h)
    }

    pub fn lambda(&self) -> Complex64 {
        self.sigma / self.h
    }
}

/// Closed-form semiclassical model kernel on the 3-dimensional hyperbolic
/// space: `h⁻² e^{−iσr₀/h} / (4π sinh r₀)`.
pub fn model_kernel_h3(params: &SpectralParams, r0: f64) -> Result<Complex64> {
    if !(r0 > 0.0) {
        return Err(CoreError::InvalidArgument { detail: "r0 must be positive" });
    }
    let phase = (-Complex64::i() * params.sigma * r0 / params.h).exp();
    Ok(phase / (4.0 * core::f64::consts::PI * r0.sinh() * params.h * params.h))
}

/// Closed-form resolvent kernel on the 3-dimensional hyperbolic space:
/// `(1/4π) e^{−iλr₀} / sinh r₀`.
pub fn model_resolvent_h3(lambda: Complex64, r0: f64) -> Result<Complex64> {
    if !(r0 > 0.0) {
        return Err(CoreError::InvalidArgument { detail: "r0 must be positive" });
    }
    let phase = (-Complex64::i() * lambda * r0).exp();
    Ok(phase / (4.0 * core::f64::consts::PI * r0.sinh()))
}

/// Flat-match normalization constant of the leading amplitude.
pub fn amplitude_norm(n: usize, h: f64) -> f64 {
    match n {
        2 => 1.0 / (4.0 * core::f64::consts::PI),
        1 => h.sqrt() / (8.0 * core::f64::consts::PI).sqrt(),
        _ => f64::NAN,
    }
}

/// Hamiltonian at ball coordinates, transparently moving to the collar chart
/// when the ball chart is restricted (perturbed models near the boundary).
pub fn hamiltonian_ball_coords(m: &AHMetric, z: &V3, zeta: &V3) -> Result<f64> {
    let p = PhasePoint::new(ChartId::Ball, *z, *zeta);
    match flow::hamiltonian(m, &p) {
        Ok(v) => Ok(v),
        Err(_) => {
            let pc = p.to_chart(m, ChartId::Collar(crate::chart::SphereFrame::PoleZ))?;
            flow::hamiltonian(m, &pc)
        }
    }
}

/// Report of the eikonal check `p(z, d_z r) = ½` over a pair list.
#[derive(Debug, Clone)]
pub struct EikonalReport {
    pub max_residual: f64,
    pub skipped: usize,
}

/// Max `|p(z, d_z r(z,z')) − ½|` with the gradient from central differences of
/// the shooting distance; pairs whose distance solve fails are skipped.
pub fn eikonal_residual(m: &AHMetric, pairs: &[(V3, V3)]) -> Result<EikonalReport> {
    let mut worst: f64 = 0.0;
    let mut skipped = 0usize;
    for (z, zp) in pairs {
        let r0 = crate::exact::ball_distance(m.n(), z, zp);
        let mut grad = V3::zeros();
        let mut ok = true;
        for k in 0..m.dim() {
            // step scaled down near the diagonal (quadratic degeneracy)
            let hstep = (1e-5 * (1.0 + z[k].abs())).min(0.05 * r0.max(1e-3));
            let mut zp1 = *z;
            let mut zm1 = *z;
            zp1[k] += hstep;
            zm1[k] -= hstep;
            let dp = geodesic::distance(m, &zp1, zp);
            let dm = geodesic::distance(m, &zm1, zp);
            match (dp, dm) {
                (Ok(a), Ok(b)) => grad[k] = (a - b) / (2.0 * hstep),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            skipped += 1;
            continue;
        }
        match hamiltonian_ball_coords(m, z, &grad) {
            Ok(p) => worst = worst.max((p - 0.5).abs()),
            Err(_) => skipped += 1,
        }
    }
    Ok(EikonalReport { max_residual: worst, skipped })
}

/// Amplitude transport record along one trajectory.
#[derive(Debug, Clone)]
pub struct AmplitudeTrace {
    /// Arclength from the source.
    pub r: Vec<f64>,
    /// Collar variable at each node.
    pub x: Vec<f64>,
    /// `a[j][k]`: order-j amplitude at node k.
    pub a: Vec<Vec<Complex64>>,
    /// Transverse spreading determinant at each node.
    pub spreading: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    pub j_max: usize,
    /// Matching radius for the near-diagonal normalization.
    pub r_init: f64,
    /// Output grid spacing (adjusted so the grid lands exactly on the end).
    pub dr: f64,
    /// Optional exact end radius (defaults to the trajectory end).
    pub r_end: Option<f64>,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions { j_max: 0, r_init: 0.1, dr: 0.01, r_end: None }
    }
}

/// Coefficient tables along one ray, Hermite-interpolable.
struct RayTable {
    t: Vec<f64>,
    log_a: Vec<f64>,
    rate: Vec<f64>, // d log A / dt
    x: Vec<f64>,
}

fn build_ray_table(m: &AHMetric, traj: &Trajectory, r_min: f64) -> Result<RayTable> {
    let basis = flow::transverse_basis(m, &traj.first().state)?;
    let mut t = Vec::new();
    let mut log_a = Vec::new();
    let mut rate = Vec::new();
    let mut x = Vec::new();
    for s in &traj.samples {
        if s.t < 0.5 * r_min {
            continue;
        }
        let (a, dlog) = flow::spreading_with_rate(m, &basis, s)?;
        if a <= 0.0 {
            return Err(CoreError::CausticHit { r: s.t });
        }
        t.push(s.t);
        log_a.push(a.ln());
        rate.push(dlog);
        x.push(s.state.x(m));
    }
    if t.len() < 4 {
        return Err(CoreError::InsufficientData { needed: 4, got: t.len() });
    }
    Ok(RayTable { t, log_a, rate, x })
}

impl RayTable {
    /// Hermite interpolation of log A (value and derivative available).
    fn log_a_at(&self, r: f64) -> f64 {
        let k = bracket(&self.t, r);
        let (t0, t1) = (self.t[k], self.t[k + 1]);
        let dt = t1 - t0;
        let tau = ((r - t0) / dt).clamp(0.0, 1.0);
        hermite(self.log_a[k], self.log_a[k + 1], self.rate[k] * dt, self.rate[k + 1] * dt, tau)
    }

    /// Derivative of the Hermite cubic of log A (consistent with
    /// [`Self::log_a_at`], much more accurate than linear interpolation of the
    /// rapidly varying rate near the source).
    fn rate_at(&self, r: f64) -> f64 {
        let k = bracket(&self.t, r);
        let (t0, t1) = (self.t[k], self.t[k + 1]);
        let dt = t1 - t0;
        let tau = ((r - t0) / dt).clamp(0.0, 1.0);
        let (f0, f1) = (self.log_a[k], self.log_a[k + 1]);
        let (d0, d1) = (self.rate[k] * dt, self.rate[k + 1] * dt);
        let dh00 = 6.0 * tau * tau - 6.0 * tau;
        let dh10 = 3.0 * tau * tau - 4.0 * tau + 1.0;
        let dh01 = -dh00;
        let dh11 = 3.0 * tau * tau - 2.0 * tau;
        (dh00 * f0 + dh10 * d0 + dh01 * f1 + dh11 * d1) / dt
    }

    fn x_at(&self, r: f64) -> f64 {
        let k = bracket(&self.t, r);
        let (t0, t1) = (self.t[k], self.t[k + 1]);
        let tau = ((r - t0) / (t1 - t0)).clamp(0.0, 1.0);
        self.x[k] * (1.0 - tau) + self.x[k + 1] * tau
    }

    fn end(&self) -> f64 {
        self.t[self.t.len() - 1]
    }
}

fn bracket(ts: &[f64], r: f64) -> usize {
    let mut lo = 0usize;
    let mut hi = ts.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ts[mid] <= r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn hermite(f0: f64, f1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
    let h10 = t * (1.0 - t) * (1.0 - t);
    let h01 = t * t * (3.0 - 2.0 * t);
    let h11 = t * t * (t - 1.0);
    h00 * f0 + h10 * d0 + h01 * f1 + h11 * d1
}

/// Solve the transport hierarchy along a unit-speed trajectory emanating from
/// a source point (the trajectory start). The leading amplitude solves the
/// homogeneous transport equation with the flat-match initialization at
/// `r_init`; higher orders take the `−(i/σ)(Δ_g − n²/4)a_{j−1}` source (plus
/// optional explicit sources `b_j`). Radial situations (the exact ball) use
/// the 1-D radial Laplacian for the source; perturbed metrics go through the
/// fan-based kernel pipeline instead.
pub fn transport_solve(
    m: &AHMetric,
    traj: &Trajectory,
    params: &SpectralParams,
    opts: &TransportOptions,
    sources: Option<&dyn Fn(usize, f64) -> Complex64>,
) -> Result<AmplitudeTrace> {
    let table = build_ray_table(m, traj, opts.r_init)?;
    let r_end = opts.r_end.map(|r| r.min(table.end())).unwrap_or_else(|| table.end());
    if r_end <= opts.r_init + 4.0 * opts.dr {
        return Err(CoreError::InsufficientData { needed: 8, got: 1 });
    }
    let n_steps = ((r_end - opts.r_init) / opts.dr).ceil() as usize;
    let dr_eff = (r_end - opts.r_init) / n_steps as f64;
    let grid: Vec<f64> = (0..=n_steps).map(|k| opts.r_init + k as f64 * dr_eff).collect();

    let c_n = amplitude_norm(m.n(), params.h);
    let a0_init = Complex64::new(c_n / (0.5 * table.log_a_at(opts.r_init)).exp(), 0.0);

    let mut amps: Vec<Vec<Complex64>> = Vec::new();
    let coeff = |r: f64| -table.rate_at(r); // Δ_g r
    let b0 = |r: f64| sources.map(|f| f(0, r)).unwrap_or(Complex64::new(0.0, 0.0));
    let a0 = integrate_transport(&grid, a0_init, &coeff, &|r| b0(r))?;
    amps.push(a0);

    for j in 1..=opts.j_max {
        if !m.is_exact_ball() {
            return Err(CoreError::Unsupported {
                detail: "higher transport orders on perturbed metrics go through the fan pipeline",
            });
        }
        let prev = amps[j - 1].clone();
        let lap = radial_laplacian_minus_shift(m.n(), &grid, &prev, &coeff);
        let i_over_sigma = Complex64::i() / params.sigma;
        let bj = |r: f64| sources.map(|f| f(j, r)).unwrap_or(Complex64::new(0.0, 0.0));
        let src: Vec<Complex64> =
            grid.iter().enumerate().map(|(k, &r)| -i_over_sigma * lap[k] + bj(r)).collect();
        let aj = integrate_transport_tabulated(&grid, Complex64::new(0.0, 0.0), &coeff, &src)?;
        amps.push(aj);
    }

    let x: Vec<f64> = grid.iter().map(|&r| table.x_at(r)).collect();
    let spreading: Vec<f64> = grid.iter().map(|&r| table.log_a_at(r).exp()).collect();
    Ok(AmplitudeTrace { r: grid, x, a: amps, spreading })
}

/// RK4 for the transport equation `−2a' + (Δ_g r)·a = rhs`, i.e.
/// `a' = ½((Δ_g r)·a − rhs)`.
fn integrate_transport(
    grid: &[f64],
    init: Complex64,
    coeff: &dyn Fn(f64) -> f64,
    rhs: &dyn Fn(f64) -> Complex64,
) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut a = init;
    out.push(a);
    for k in 1..grid.len() {
        let r0 = grid[k - 1];
        let dr = grid[k] - grid[k - 1];
        let f = |r: f64, a: Complex64| 0.5 * (coeff(r) * a - rhs(r));
        let k1 = f(r0, a);
        let k2 = f(r0 + 0.5 * dr, a + 0.5 * dr * k1);
        let k3 = f(r0 + 0.5 * dr, a + 0.5 * dr * k2);
        let k4 = f(r0 + dr, a + dr * k3);
        a += dr / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(a);
    }
    Ok(out)
}

/// Same with a tabulated source (cubic interpolation between nodes).
fn integrate_transport_tabulated(
    grid: &[f64],
    init: Complex64,
    coeff: &dyn Fn(f64) -> f64,
    src: &[Complex64],
) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = src.iter().map(|c| c.re).collect();
    let im: Vec<f64> = src.iter().map(|c| c.im).collect();
    let x0 = grid[0];
    let dx = grid[1] - grid[0];
    let s = |r: f64| {
        Complex64::new(
            numerics::interp_uniform(&re, x0, dx, r),
            numerics::interp_uniform(&im, x0, dx, r),
        )
    };
    integrate_transport(grid, init, coeff, &s)
}

/// `(Δ_g − n²/4)` applied to a radial profile on the uniform grid:
/// `−f'' − (d log A/dr) f' − (n²/4) f`, derivatives by 4th-order stencils
/// (2nd-order near the edges).
fn radial_laplacian_minus_shift(
    n: usize,
    grid: &[f64],
    f: &[Complex64],
    coeff: &dyn Fn(f64) -> f64,
) -> Vec<Complex64> {
    let m = grid.len();
    let dr = grid[1] - grid[0];
    let shift = (n * n) as f64 / 4.0;
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let (d1, d2) = if k >= 2 && k + 2 < m {
            let c1 = numerics::central_d1_order4(
                f[k - 2].re,
                f[k - 1].re,
                f[k + 1].re,
                f[k + 2].re,
                dr,
            );
            let c1i = numerics::central_d1_order4(
                f[k - 2].im,
                f[k - 1].im,
                f[k + 1].im,
                f[k + 2].im,
                dr,
            );
            let c2 = numerics::central_d2_order4(
                f[k - 2].re,
                f[k - 1].re,
                f[k].re,
                f[k + 1].re,
                f[k + 2].re,
                dr,
            );
            let c2i = numerics::central_d2_order4(
                f[k - 2].im,
                f[k - 1].im,
                f[k].im,
                f[k + 1].im,
                f[k + 2].im,
                dr,
            );
            (Complex64::new(c1, c1i), Complex64::new(c2, c2i))
        } else {
            let km = k.max(1).min(m - 2);
            (
                (f[km + 1] - f[km - 1]) / (2.0 * dr),
                (f[km + 1] - 2.0 * f[km] + f[km - 1]) / (dr * dr),
            )
        };
        // d log A/dr = −Δ_g r
        let rate = -coeff(grid[k]);
        out.push(-d2 - rate * d1 - shift * f[k]);
    }
    out
}

/// Least-squares slope of `log a₀` vs `log x` on the last decade of the
/// collar variable (expected `n/2`).
pub fn boundary_exponent_fit(trace: &AmplitudeTrace) -> Result<f64> {
    let x_min = trace.x.iter().cloned().fold(f64::INFINITY, f64::min);
    if x_min > 1e-3 {
        return Err(CoreError::InsufficientData { needed: 1, got: 0 });
    }
    let mut lx = Vec::new();
    let mut la = Vec::new();
    for k in 0..trace.x.len() {
        let x = trace.x[k];
        if x <= 10.0 * x_min && x >= x_min {
            let mag = trace.a[0][k].norm();
            if mag > 0.0 {
                lx.push(x.ln());
                la.push(mag.ln());
            }
        }
    }
    if lx.len() < 8 {
        return Err(CoreError::InsufficientData { needed: 8, got: lx.len() });
    }
    let (slope, _, _) = numerics::line_fit(&lx, &la);
    Ok(slope)
}

/// Assembled kernel values on a pair list.
#[derive(Debug, Clone)]
pub struct KernelGrid {
    pub params: SpectralParams,
    pub order: usize,
    pub pairs: Vec<(V3, V3)>,
    pub values: Vec<Complex64>,
    pub distances: Vec<f64>,
    pub skipped: usize,
}

/// Assemble `K_J(z, z') = h⁻² e^{−iσ r/h} Σ_{j≤J} a_j h^j` with amplitudes
/// transported along the connecting geodesic (shot from z'). Diagonal pairs
/// are rejected; caustic hits propagate as errors.
pub fn assemble_kernel(
    m: &AHMetric,
    params: &SpectralParams,
    pairs: &[(V3, V3)],
    order: usize,
) -> Result<KernelGrid> {
    let mut values = Vec::with_capacity(pairs.len());
    let mut distances = Vec::with_capacity(pairs.len());
    let skipped = 0usize;
    let sp = kernel_shooting_params();
    for (z, zp) in pairs {
        let conn = geodesic::connect(m, zp, z, &sp)?;
        let r0 = conn.length;
        let opts =
            TransportOptions { j_max: order, r_init: 0.1, dr: 0.01, r_end: Some(r0) };
        let trace = transport_solve(m, &conn.trajectory, params, &opts, None)?;
        let kend = trace.r.len() - 1;
        let mut amp = Complex64::new(0.0, 0.0);
        let mut hp = 1.0;
        for j in 0..=order {
            amp += hp * trace.a[j][kend];
            hp *= params.h;
        }
        let phase = (-Complex64::i() * params.sigma * r0 / params.h).exp();
        values.push(phase * amp / (params.h * params.h));
        distances.push(r0);
    }
    Ok(KernelGrid { params: *params, order, pairs: pairs.to_vec(), values, distances, skipped })
}

fn kernel_shooting_params() -> ShootingParams {
    let mut sp = ShootingParams::default();
    sp.flow.max_step = 0.01; // dense samples for the transport tables
    sp
}

/// Boundary phase diagnostic: for `z` fixed and `z'` running to the boundary
/// along a fixed direction, `r(z, z') + log x'` must converge (the phase
/// decomposition `r = −log ρ_L − log ρ_R + F` with `F` bounded).
pub fn phase_boundary_diagnostic(
    m: &AHMetric,
    z: &V3,
    direction: &V3,
    x_levels: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    let dirn = direction / direction.norm();
    for &x in x_levels {
        let rho = crate::chart::ball_radius_of_x(x);
        let zp = rho * dirn;
        let r = geodesic::distance(m, z, &zp)?;
        out.push((x, r + x.ln()));
    }
    Ok(out)
}

/// Indicial roots `n/2 ± iσ/h` of the boundary model operator.
pub fn indicial_roots(n: usize, params: &SpectralParams) -> (Complex64, Complex64) {
    let base = Complex64::new(n as f64 / 2.0, 0.0);
    let shift = Complex64::i() * params.sigma / params.h;
    (base + shift, base - shift)
}

/// The indicial polynomial `h²(−α² + nα − n²/4) − σ²`; vanishes exactly at
/// the indicial roots.
pub fn indicial_polynomial(n: usize, params: &SpectralParams, alpha: Complex64) -> Complex64 {
    let nf = n as f64;
    Complex64::new(params.h * params.h, 0.0) * (-alpha * alpha + nf * alpha - nf * nf / 4.0)
        - params.sigma * params.sigma
}

// ---------------------------------------------------------------------------
// WKB residual machinery
// ---------------------------------------------------------------------------

/// A field (r, B) evaluable near a test point, in a fixed chart, for the
/// finite-difference application of `P(h,σ)` to the factored kernel
/// `e^{−iσr/h}·B`. `B` excludes the `h⁻²` prefactor and the flat-match
/// constant; both cancel in the relative residual.
pub trait KernelField {
    fn chart(&self) -> ChartId;
    /// Distance from the source to the point `w` (chart coordinates).
    fn r(&mut self, w: &V3) -> Result<f64>;
    /// Amplitude sum `Σ_{j≤J} â_j(w) h^j` with h-free `â_j`.
    fn amplitude(&mut self, w: &V3, h: f64, order: usize) -> Result<Complex64>;
}

/// Closed-form field on the exact ball (n = 2): `r` from the Möbius formula,
/// `â₀ = 1/sinh r`, `â₁ = 0`.
pub struct BallField {
    source: V3,
}

impl BallField {
    pub fn new(source: V3) -> Self {
        BallField { source }
    }
}

impl KernelField for BallField {
    fn chart(&self) -> ChartId {
        ChartId::Ball
    }

    fn r(&mut self, w: &V3) -> Result<f64> {
        Ok(crate::exact::ball_distance(2, &self.source, w))
    }

    fn amplitude(&mut self, w: &V3, _h: f64, _order: usize) -> Result<Complex64> {
        let r = crate::exact::ball_distance(2, &self.source, w);
        Ok(Complex64::new(1.0 / r.sinh(), 0.0))
    }
}

/// Analytic coefficients of the positive Laplacian at a point:
/// `Δ_g f = −g*^{ij} ∂²_{ij} f − b^j ∂_j f`.
fn laplacian_coefficients(m: &AHMetric, chart: ChartId, z: &V3) -> Result<(M3, V3)> {
    let (gs, dgs) = m.dual_with_derivs(chart, z)?;
    let e = m.metric_eval(chart, z)?;
    let dim = m.dim();
    let mut b = V3::zeros();
    for j in 0..dim {
        for i in 0..dim {
            // ∂_i g*^{ij}
            b[j] += dgs[i][(i, j)];
        }
        // g*^{ij} ∂_i log √g with ∂_i log √g = −½ tr(g ∂_i g*)
        for i in 0..dim {
            let mut tr = 0.0;
            for a in 0..dim {
                for c in 0..dim {
                    tr += e.g[(a, c)] * dgs[i][(c, a)];
                }
            }
            b[j] += gs[(i, j)] * (-0.5 * tr);
        }
    }
    Ok((gs, b))
}

/// Apply the finite-difference discretization of `P(h,σ)` to the factored
/// kernel around the point `w0` and return the residual normalized by the
/// local amplitude `|B|` (multiply by `h²` for the figure relative to
/// `‖K‖ = h⁻²|B|`). Stencil: 4th-order in each coordinate, nested 4th-order
/// for mixed derivatives, acting only on the smooth factors `r` and `B`.
pub fn wkb_residual_at(
    m: &AHMetric,
    params: &SpectralParams,
    field: &mut dyn KernelField,
    w0: &V3,
    order: usize,
    delta: f64,
) -> Result<f64> {
    let chart = field.chart();
    let dim = m.dim();
    let h = params.h;
    let sigma = params.sigma;

    // tabulate r and B on the 5^dim tensor stencil
    let npts = 5usize.pow(dim as u32);
    let mut rv = vec![0.0f64; npts];
    let mut bv = vec![Complex64::new(0.0, 0.0); npts];
    let offsets = [-2.0, -1.0, 0.0, 1.0, 2.0];
    for idx in 0..npts {
        let mut rem = idx;
        let mut w = *w0;
        for item in offsets.iter().take(1) {
            let _ = item;
        }
        for d in 0..dim {
            let o = offsets[rem % 5];
            rem /= 5;
            w[d] += o * delta;
        }
        rv[idx] = field.r(&w)?;
        bv[idx] = field.amplitude(&w, h, order)?;
    }
    let at = |coords: [i32; 3]| -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for d in 0..dim {
            idx += ((coords[d] + 2) as usize) * stride;
            stride *= 5;
        }
        idx
    };

    let d1 = |v: &dyn Fn(usize) -> f64, d: usize| -> f64 {
        let g = |o: i32| {
            let mut cc = [0i32; 3];
            cc[d] = o;
            v(at(cc))
        };
        numerics::central_d1_order4(g(-2), g(-1), g(1), g(2), delta)
    };
    let d2p = |v: &dyn Fn(usize) -> f64, d: usize| -> f64 {
        let g = |o: i32| {
            let mut cc = [0i32; 3];
            cc[d] = o;
            v(at(cc))
        };
        numerics::central_d2_order4(g(-2), g(-1), g(0), g(1), g(2), delta)
    };
    let dmix = |v: &dyn Fn(usize) -> f64, da: usize, db: usize| -> f64 {
        let inner = |o1: i32| -> f64 {
            let g = |o2: i32| {
                let mut cc = [0i32; 3];
                cc[da] = o1;
                cc[db] = o2;
                v(at(cc))
            };
            numerics::central_d1_order4(g(-2), g(-1), g(1), g(2), delta)
        };
        numerics::central_d1_order4(inner(-2), inner(-1), inner(1), inner(2), delta)
    };

    let rvf = |i: usize| rv[i];
    let bre = |i: usize| bv[i].re;
    let bim = |i: usize| bv[i].im;

    let (gs, bcoef) = laplacian_coefficients(m, chart, w0)?;

    let mut dr = V3::zeros();
    let mut db = [Complex64::new(0.0, 0.0); 3];
    for d in 0..dim {
        dr[d] = d1(&rvf, d);
        db[d] = Complex64::new(d1(&bre, d), d1(&bim, d));
    }
    let mut hess_r = M3::zeros();
    let mut hess_b = [[Complex64::new(0.0, 0.0); 3]; 3];
    for a in 0..dim {
        hess_r[(a, a)] = d2p(&rvf, a);
        hess_b[a][a] = Complex64::new(d2p(&bre, a), d2p(&bim, a));
        for c in (a + 1)..dim {
            let mr = dmix(&rvf, a, c);
            hess_r[(a, c)] = mr;
            hess_r[(c, a)] = mr;
            let mb = Complex64::new(dmix(&bre, a, c), dmix(&bim, a, c));
            hess_b[a][c] = mb;
            hess_b[c][a] = mb;
        }
    }

    // |dr|², Δ_g r, ⟨dr, dB⟩, Δ_g B
    let mut dr2 = 0.0;
    let mut lap_r = 0.0;
    let mut drdb = Complex64::new(0.0, 0.0);
    let mut lap_b = Complex64::new(0.0, 0.0);
    for i in 0..dim {
        for j in 0..dim {
            dr2 += gs[(i, j)] * dr[i] * dr[j];
            lap_r -= gs[(i, j)] * hess_r[(i, j)];
            drdb += gs[(i, j)] * dr[i] * db[j];
            lap_b -= gs[(i, j)] * hess_b[i][j];
        }
        lap_r -= bcoef[i] * dr[i];
        lap_b -= bcoef[i] * db[i];
    }

    let b0 = bv[at([0, 0, 0])];
    let n2over4 = (m.n() * m.n()) as f64 / 4.0;
    let bracket = sigma * sigma * (dr2 - 1.0) * b0
        + Complex64::i() * h * sigma * (2.0 * drdb - lap_r * b0)
        + h * h * (lap_b - n2over4 * b0);
    Ok(bracket.norm() / b0.norm())
}

/// Result of the residual-order fit over an h-list at one truncation order.
#[derive(Debug, Clone)]
pub struct WkbOrderFit {
    /// Fitted slope of `log residual` vs `log h` (kernel-relative residual).
    pub slope: f64,
    /// Geometric-mean kernel-relative residual per h.
    pub residuals: Vec<f64>,
    /// Residuals bottomed out at the discretization floor.
    pub floor_hit: bool,
}

/// Fit the order of `P(h,σ)K_J` over an h-list at the given test points. Each
/// entry pairs a kernel field with the evaluation point (chart coordinates of
/// the field's chart). The box keeps Im σ proportional to h.
pub fn wkb_residual_order(
    m: &AHMetric,
    h_list: &[f64],
    sigma: Complex64,
    fields: &mut [(Box<dyn KernelField>, V3)],
    order: usize,
) -> Result<WkbOrderFit> {
    if h_list.len() < 4 {
        return Err(CoreError::InsufficientData { needed: 4, got: h_list.len() });
    }
    let mut residuals = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let params = SpectralParams::new(h, Complex64::new(sigma.re, sigma.im * h))?;
        let mut acc = 0.0;
        for (field, w0) in fields.iter_mut() {
            let res = wkb_residual_at(m, &params, field.as_mut(), w0, order, 1e-3)?;
            acc += (res * h * h).max(1e-300).ln();
        }
        residuals.push((acc / fields.len() as f64).exp());
    }
    let (slope, _) = numerics::loglog_slope(h_list, &residuals);
    let floor_hit = residuals.iter().any(|&r| r < 1e-11);
    Ok(WkbOrderFit { slope, residuals, floor_hit })
}

// ---------------------------------------------------------------------------
// Geodesic fan for perturbed n = 1 kernels
// ---------------------------------------------------------------------------

/// A fan of unit-speed geodesics from one source (n = 1, collar chart),
/// carrying spreading tables and transported amplitudes; implements
/// [`KernelField`] for perturbed-metric kernels with `J ≤ 1`.
pub struct GeodesicFan {
    m: AHMetric,
    sigma: Complex64,
    source: V3,
    omegas: Vec<f64>,
    tables: Vec<RayTable>,
    r_grid: Vec<f64>,
    /// Least-squares ω-polynomials of the a₁-source per r-node.
    src_poly: Vec<Vec<Complex64>>,
    warm: Option<(V3, f64)>,
    r_init: f64,
}

const FAN_POLY_DEG: usize = 6;

impl GeodesicFan {
    /// Build a fan around the covector angle `omega0` at the collar-chart
    /// source, covering `± half_width`, reaching at least `r_max`.
    pub fn new(
        m: &AHMetric,
        source_collar: &V3,
        omega0: f64,
        half_width: f64,
        n_rays: usize,
        r_max: f64,
        sigma: Complex64,
    ) -> Result<Self> {
        if m.n() != 1 {
            return Err(CoreError::Unsupported { detail: "fan requires n = 1" });
        }
        let chart = ChartId::Collar(crate::chart::SphereFrame::PoleZ);
        let r_init = 0.05;
        let dr = 5e-3;
        let mut omegas = Vec::with_capacity(n_rays);
        let mut tables = Vec::with_capacity(n_rays);
        let mut fp = FlowParams::default();
        fp.max_step = dr;
        fp.rtol = 1e-11;
        for k in 0..n_rays {
            let w = omega0 - half_width + 2.0 * half_width * k as f64 / (n_rays - 1) as f64;
            let dir = V3::new(w.cos(), w.sin(), 0.0);
            let start = PhasePoint::unit(m, chart, *source_collar, dir)?;
            let traj = flow::flow(m, &start, r_max * 1.1 + 0.2, 1e-6, &fp)?;
            let table = build_ray_table(m, &traj, r_init)?;
            omegas.push(w);
            tables.push(table);
        }
        let r_end = tables.iter().map(|t| t.end()).fold(f64::INFINITY, f64::min);
        let n_nodes = ((r_end - r_init) / dr).floor() as usize;
        if n_nodes < 8 {
            return Err(CoreError::InsufficientData { needed: 8, got: n_nodes });
        }
        let r_grid: Vec<f64> = (0..n_nodes).map(|k| r_init + k as f64 * dr).collect();

        // a₁ source: (Δ_g − ¼)â₀ on the fan via the geodesic polar Laplacian
        //   Δ f = −(1/A)[∂_r(A ∂_r f) + ∂_ω(A⁻¹ ∂_ω f)]
        // with â₀ = A^{−1/2} (analytic per ray).
        let domega = omegas[1] - omegas[0];
        let mut src_poly = Vec::with_capacity(r_grid.len());
        for &r in &r_grid {
            let mut vals = vec![Complex64::new(0.0, 0.0); n_rays];
            for kr in 0..n_rays {
                let a_here = tables[kr].log_a_at(r).exp();
                // radial flux A·â₀' = −(rate/2)·A^{1/2}, differentiated in r
                let flux_r = |rr: f64, kray: usize| -> f64 {
                    let tt = &tables[kray];
                    -0.5 * tt.rate_at(rr) * (0.5 * tt.log_a_at(rr)).exp()
                };
                let hr = 2.0 * dr;
                let rr0 = r.max(r_init + hr);
                let d_flux_r = (flux_r(rr0 + hr, kr) - flux_r(rr0 - hr, kr)) / (2.0 * hr);
                // angular flux A⁻¹ ∂_ω â₀, then ∂_ω
                let a0_of = |kray: usize, rr: f64| (-0.5 * tables[kray].log_a_at(rr)).exp();
                let ang_flux = |kray: usize| -> f64 {
                    let km = kray.max(1).min(n_rays - 2);
                    let da = (a0_of(km + 1, r) - a0_of(km - 1, r)) / (2.0 * domega);
                    da / tables[km].log_a_at(r).exp()
                };
                let krm = kr.max(2).min(n_rays - 3);
                let d_ang = (ang_flux(krm + 1) - ang_flux(krm - 1)) / (2.0 * domega);
                let lap = -(d_flux_r + d_ang) / a_here;
                vals[kr] = Complex64::new(lap - 0.25 * a0_of(kr, r), 0.0);
            }
            src_poly.push(fit_poly(&omegas, &vals, omega0, FAN_POLY_DEG));
        }

        Ok(GeodesicFan {
            m: m.clone(),
            sigma,
            source: *source_collar,
            omegas,
            tables,
            r_grid,
            src_poly,
            warm: None,
            r_init,
        })
    }

    fn omega_center(&self) -> f64 {
        0.5 * (self.omegas[0] + self.omegas[self.omegas.len() - 1])
    }

    /// Source polynomial evaluated at (ω, r), cubic in r.
    fn source_at(&self, omega: f64, r: f64) -> Complex64 {
        let dr = self.r_grid[1] - self.r_grid[0];
        let s = ((r - self.r_grid[0]) / dr).floor() as isize;
        let i1 = s.clamp(1, self.r_grid.len() as isize - 3) as usize;
        let frac = (r - self.r_grid[i1]) / dr;
        let t = omega - self.omega_center();
        let mut vals = [Complex64::new(0.0, 0.0); 4];
        for (kk, item) in vals.iter_mut().enumerate() {
            *item = eval_poly(&self.src_poly[i1 - 1 + kk], t);
        }
        let re = numerics::lagrange4(vals[0].re, vals[1].re, vals[2].re, vals[3].re, frac);
        let im = numerics::lagrange4(vals[0].im, vals[1].im, vals[2].im, vals[3].im, frac);
        Complex64::new(re, im)
    }

    /// â₁ along the ray `omega` at radius `r`: zero initial data at `r_init`,
    /// `a₁' = ½((Δ_g r)·a₁ + (i/σ)·source)`.
    fn a1_at(&self, omega: f64, r: f64) -> Complex64 {
        let coeff = |rr: f64| -> f64 {
            let (k0, w) = self.ray_bracket(omega);
            -(self.tables[k0].rate_at(rr) * (1.0 - w) + self.tables[k0 + 1].rate_at(rr) * w)
        };
        let i_over_sigma = Complex64::i() / self.sigma;
        let mut a = Complex64::new(0.0, 0.0);
        let dr = 5e-3;
        let mut rr = self.r_init;
        while rr < r - 1e-12 {
            let step = dr.min(r - rr);
            let f = |x: f64, a: Complex64| {
                0.5 * (coeff(x) * a + i_over_sigma * self.source_at(omega, x))
            };
            let k1 = f(rr, a);
            let k2 = f(rr + 0.5 * step, a + 0.5 * step * k1);
            let k3 = f(rr + 0.5 * step, a + 0.5 * step * k2);
            let k4 = f(rr + step, a + step * k3);
            a += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            rr += step;
        }
        a
    }

    fn ray_bracket(&self, omega: f64) -> (usize, f64) {
        let d = self.omegas[1] - self.omegas[0];
        let s = (omega - self.omegas[0]) / d;
        let k = (s.floor() as isize).clamp(0, self.omegas.len() as isize - 2) as usize;
        (k, (s - k as f64).clamp(0.0, 1.0))
    }

    /// Warm shooting from the source to `w` (collar coordinates): returns
    /// (r, ω, spreading at arrival).
    fn shoot(&mut self, w: &V3) -> Result<(f64, f64, f64)> {
        let chart = ChartId::Collar(crate::chart::SphereFrame::PoleZ);
        let w_ball = crate::chart::to_chart(self.m.atlas(), chart, w, ChartId::Ball)?;
        let src_ball = crate::chart::to_chart(self.m.atlas(), chart, &self.source, ChartId::Ball)?;
        let mut sp = ShootingParams::default();
        sp.flow.max_step = 0.05;
        sp.tol = 1e-12;
        let conn = match self.warm {
            Some((dir, t0)) => {
                geodesic::connect_with_init(&self.m, &src_ball, &w_ball, &dir, t0, &sp)?
            }
            None => geodesic::connect(&self.m, &src_ball, &w_ball, &sp)?,
        };
        let init_collar = conn.initial.to_chart(&self.m, chart)?;
        let omega = init_collar.zeta[1].atan2(init_collar.zeta[0]);
        self.warm = Some((conn.initial.zeta, conn.length));
        let basis = flow::transverse_basis(&self.m, &conn.initial)?;
        let a = flow::spreading(&self.m, &basis, conn.trajectory.last())?;
        if a <= 0.0 {
            return Err(CoreError::CausticHit { r: conn.length });
        }
        Ok((conn.length, omega, a))
    }
}

fn fit_poly(xs: &[f64], ys: &[Complex64], center: f64, deg: usize) -> Vec<Complex64> {
    let n = xs.len();
    let cols = deg + 1;
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, cols);
    for (i, &x) in xs.iter().enumerate() {
        let t = x - center;
        let mut p = 1.0;
        for j in 0..cols {
            a[(i, j)] = p;
            p *= t;
        }
    }
    let svd = a.svd(true, true);
    let mut bre = nalgebra::DVector::<f64>::zeros(n);
    let mut bim = nalgebra::DVector::<f64>::zeros(n);
    for i in 0..n {
        bre[i] = ys[i].re;
        bim[i] = ys[i].im;
    }
    let cre = svd.solve(&bre, 1e-12).unwrap();
    let cim = svd.solve(&bim, 1e-12).unwrap();
    (0..cols).map(|j| Complex64::new(cre[j], cim[j])).collect()
}

fn eval_poly(c: &[Complex64], t: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &ck in c.iter().rev() {
        acc = acc * t + ck;
    }
    acc
}

impl KernelField for GeodesicFan {
    fn chart(&self) -> ChartId {
        ChartId::Collar(crate::chart::SphereFrame::PoleZ)
    }

    fn r(&mut self, w: &V3) -> Result<f64> {
        Ok(self.shoot(w)?.0)
    }

    fn amplitude(&mut self, w: &V3, h: f64, order: usize) -> Result<Complex64> {
        let (r, omega, a) = self.shoot(w)?;
        let mut amp = Complex64::new(1.0 / a.sqrt(), 0.0);
        if order >= 1 {
            amp += h * self.a1_at(omega, r);
        }
        if order >= 2 {
            return Err(CoreError::Unsupported { detail: "fan kernels support J ≤ 1" });
        }
        Ok(amp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn spectral_params_round_trip_from_lambda() {
        let lambda = Complex64::new(10.0, -0.3);
        let p = SpectralParams::from_lambda(lambda).unwrap();
        assert_relative_eq!(p.h, 0.1);
        let back = p.lambda();
        assert_eq!(back.re, lambda.re);
        assert_eq!(back.im, lambda.im);
    }

    #[test]
    fn model_kernel_magnitude_and_phase() {
        let p = SpectralParams::new(0.1, Complex64::new(1.0, 0.0)).unwrap();
        let k = model_kernel_h3(&p, 1.0).unwrap();
        assert_relative_eq!(k.norm(), 6.7714, epsilon = 1e-4);
        let expected = Complex64::new(0.0, -10.0).exp();
        assert_relative_eq!((k / k.norm()).re, expected.re, epsilon = 1e-12);
        assert_relative_eq!((k / k.norm()).im, expected.im, epsilon = 1e-12);
        // σ real ⇒ magnitude independent of σ
        let p2 = SpectralParams::new(0.1, Complex64::new(1.1, 0.0)).unwrap();
        assert_relative_eq!(model_kernel_h3(&p2, 1.0).unwrap().norm(), k.norm(), epsilon = 1e-12);
    }

    #[test]
    fn model_kernel_decay_rate() {
        let p = SpectralParams::new(0.1, Complex64::new(1.0, 0.0)).unwrap();
        let rs = [6.0, 7.0, 8.0, 9.0];
        let mags: Vec<f64> = rs.iter().map(|&r| model_kernel_h3(&p, r).unwrap().norm()).collect();
        let ly: Vec<f64> = mags.iter().map(|m| m.ln()).collect();
        let (slope, _, _) = numerics::line_fit(&rs, &ly);
        assert_relative_eq!(slope, -1.0, epsilon = 1e-4);
    }

    #[test]
    fn model_resolvent_identities() {
        let lambda = Complex64::new(10.0, 0.0);
        let p = SpectralParams::from_lambda(lambda).unwrap();
        let a = model_kernel_h3(&p, 1.0).unwrap() * p.h * p.h;
        let b = model_resolvent_h3(lambda, 1.0).unwrap();
        assert_relative_eq!(a.re, b.re, max_relative = 1e-13);
        assert_relative_eq!(a.im, b.im, max_relative = 1e-13);
        let lm = Complex64::new(4.0, -0.5);
        let k1 = model_resolvent_h3(lm, 2.0).unwrap().norm();
        let k2 = model_resolvent_h3(lm, 3.0).unwrap().norm();
        assert!(k2 < k1);
    }

    #[test]
    fn model_resolvent_solves_radial_ode() {
        // (−∂r² − 2 coth r ∂r − 1 − λ²) annihilates the closed form
        let lambda = Complex64::new(2.0, -0.3);
        let f = |r: f64| model_resolvent_h3(lambda, r).unwrap();
        let h = 1e-4;
        for &r in &[0.5, 1.0, 2.0, 3.0] {
            let d1 = (f(r + h) - f(r - h)) / (2.0 * h);
            let d2 = (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h);
            let res = -d2 - 2.0 * (1.0 / r.tanh()) * d1 - f(r) - lambda * lambda * f(r);
            assert!(res.norm() / f(r).norm() <= 1e-6, "residual {}", res.norm() / f(r).norm());
        }
    }

    #[test]
    fn indicial_roots_and_polynomial() {
        let p = SpectralParams::new(0.1, Complex64::new(1.0, 0.0)).unwrap();
        let (r1, r2) = indicial_roots(2, &p);
        assert_relative_eq!(r1.re, 1.0);
        assert_relative_eq!(r1.im, 10.0);
        assert_relative_eq!(r2.im, -10.0);
        for alpha in [r1, r2] {
            assert!(indicial_polynomial(2, &p, alpha).norm() <= 1e-10);
        }
        assert!((r1 - r2).norm() > 1.0);
    }

    fn ball_radial_trace(n: usize, order: usize) -> AmplitudeTrace {
        let m = AHMetric::ball(n);
        let start =
            PhasePoint::unit(&m, ChartId::Ball, V3::zeros(), V3::new(1.0, 0.0, 0.0)).unwrap();
        let mut fp = FlowParams::default();
        fp.max_step = 0.01;
        let traj = flow::flow(&m, &start, 12.0, 0.9e-4, &fp).unwrap();
        let params = SpectralParams::new(0.1, Complex64::new(1.0, 0.0)).unwrap();
        let opts = TransportOptions { j_max: order, r_init: 0.1, dr: 0.01 };
        transport_solve(&m, &traj, &params, &opts, None).unwrap()
    }

    #[test]
    fn transport_reproduces_inverse_sinh_on_ball() {
        let trace = ball_radial_trace(2, 0);
        let c = 1.0 / (4.0 * core::f64::consts::PI);
        for (k, &r) in trace.r.iter().enumerate() {
            if r > 6.0 {
                break;
            }
            let expect = c / r.sinh();
            assert_relative_eq!(trace.a[0][k].re, expect, max_relative = 1e-4);
        }
    }

    #[test]
    fn first_correction_vanishes_on_ball() {
        let trace = ball_radial_trace(2, 1);
        for k in 0..trace.r.len() {
            if trace.r[k] > 6.0 {
                break;
            }
            assert!(
                trace.a[1][k].norm() <= 1e-3 * trace.a[0][k].norm(),
                "a1 too large at r = {}",
                trace.r[k]
            );
        }
    }

    #[test]
    fn zero_sources_zero_init_gives_zero_trace() {
        let grid: Vec<f64> = (0..200).map(|k| 0.1 + k as f64 * 0.01).collect();
        let zero = integrate_transport(
            &grid,
            Complex64::new(0.0, 0.0),
            &|_| 1.0,
            &|_| Complex64::new(0.0, 0.0),
        )
        .unwrap();
        assert!(zero.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn amplitude_times_sqrt_spreading_is_constant() {
        let trace = ball_radial_trace(2, 0);
        let c0 = trace.a[0][0].norm() * trace.spreading[0].sqrt();
        for k in 0..trace.r.len() {
            let c = trace.a[0][k].norm() * trace.spreading[k].sqrt();
            assert_relative_eq!(c, c0, max_relative = 1e-6);
        }
    }

    #[test]
    fn boundary_exponent_on_ball_both_dimensions() {
        let t2 = ball_radial_trace(2, 0);
        let s2 = boundary_exponent_fit(&t2).unwrap();
        assert!((s2 - 1.0).abs() <= 0.02, "n=2 slope {s2}");
        let t1 = ball_radial_trace(1, 0);
        let s1 = boundary_exponent_fit(&t1).unwrap();
        assert!((s1 - 0.5).abs() <= 0.02, "n=1 slope {s1}");
    }

    #[test]
    fn assembled_kernel_matches_model_on_ball() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut pairs = Vec::new();
        while pairs.len() < 5 {
            let z = V3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let zp = V3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            if crate::exact::ball_distance(2, &z, &zp) > 0.3 {
                pairs.push((z, zp));
            }
        }
        for &h in &[0.1, 0.05] {
            let params = SpectralParams::new(h, Complex64::new(1.0, 0.0)).unwrap();
            let grid = assemble_kernel(&m, &params, &pairs, 0).unwrap();
            for k in 0..pairs.len() {
                let model = model_kernel_h3(&params, grid.distances[k]).unwrap();
                let rel = (grid.values[k] - model).norm() / model.norm();
                assert!(rel <= 1e-4, "relative error {rel}");
            }
        }
    }

    #[test]
    fn kernel_symmetric_in_arguments_on_ball() {
        let m = AHMetric::ball(2);
        let params = SpectralParams::new(0.1, Complex64::new(1.0, 0.005)).unwrap();
        let z = V3::new(0.3, 0.1, -0.2);
        let zp = V3::new(-0.1, 0.4, 0.2);
        let g = assemble_kernel(&m, &params, &[(z, zp), (zp, z)], 0).unwrap();
        let rel = (g.values[0] - g.values[1]).norm() / g.values[0].norm();
        assert!(rel <= 1e-6, "asymmetry {rel}");
    }

    #[test]
    fn kernel_is_holomorphic_in_sigma() {
        // 4-point Cauchy–Riemann stencil at σ = 1 + 0.05i (h = 0.1 box allows it)
        let m = AHMetric::ball(2);
        let h = 0.1;
        let z = V3::new(0.25, 0.0, 0.1);
        let zp = V3::new(-0.2, 0.3, 0.0);
        let eval = |sig: Complex64| {
            let params = SpectralParams { h, sigma: sig };
            assemble_kernel(&m, &params, &[(z, zp)], 0).unwrap().values[0]
        };
        let s0 = Complex64::new(1.0, 0.05);
        let d = 1e-5;
        let dre = (eval(s0 + d) - eval(s0 - d)) / (2.0 * d);
        let dim_ = (eval(s0 + Complex64::i() * d) - eval(s0 - Complex64::i() * d)) / (2.0 * d);
        let cr = 0.5 * (dre + Complex64::i() * dim_);
        let rel = cr.norm() / dre.norm();
        assert!(rel <= 1e-4, "CR residual {rel}");
    }

    #[test]
    fn phase_diagnostic_converges_at_boundary() {
        let m = AHMetric::ball(2);
        let z = V3::new(0.2, 0.1, 0.0);
        let dir = V3::new(0.3, -0.5, 0.8);
        let levels = [1e-2, 5e-3, 2.5e-3, 1.25e-3, 1e-3];
        let vals = phase_boundary_diagnostic(&m, &z, &dir, &levels).unwrap();
        let spread = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max)
            - vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-3, "spread {spread}");
    }

    #[test]
    fn eikonal_residual_small_on_ball() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let mut pairs = Vec::new();
        while pairs.len() < 6 {
            let z = V3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let zp = V3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            if crate::exact::ball_distance(2, &z, &zp) > 0.4 {
                pairs.push((z, zp));
            }
        }
        let rep = eikonal_residual(&m, &pairs).unwrap();
        assert_eq!(rep.skipped, 0);
        assert!(rep.max_residual <= 1e-6, "residual {}", rep.max_residual);
    }

    #[test]
    fn ball_wkb_residual_sits_at_discretization_floor() {
        // J = 0 on the exact ball: the closed form is exact WKB; the
        // finite-difference residual must sit at the floor, ≤ 1e−8 relative
        // to ‖K‖ = h⁻²|B|.
        let m = AHMetric::ball(2);
        let z = V3::new(0.35, 0.1, -0.05);
        let zp = V3::new(-0.25, 0.2, 0.15);
        for &h in &[0.1, 0.05, 0.025, 0.0125] {
            let params = SpectralParams::new(h, Complex64::new(1.0, 0.0)).unwrap();
            let mut field = BallField::new(zp);
            let res = wkb_residual_at(&m, &params, &mut field, &z, 0, 1e-3).unwrap();
            let rel = res * h * h;
            assert!(rel <= 1e-8, "floor {rel} at h = {h}");
        }
    }
}
