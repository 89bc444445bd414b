//! Geodesic distance by shooting and the injectivity-radius probe.
//!
//! The shooting map sends an initial unit covector and a flight time to the
//! flow endpoint; a damped Newton iteration drives the endpoint onto the
//! target, with the Jacobian assembled from the variational matrix that the
//! integrator carries anyway. Initialization uses the straight ball-chart
//! chord, with deterministic golden-angle restarts on failure.

#[allow(unused_imports)]
use num_traits::Float;

use crate::chart::{self, ChartId, V3};
use crate::error::{CoreError, Result};
use crate::exact;
use crate::flow::{self, FlowParams, PhasePoint, Trajectory};
use crate::metric::AHMetric;
use alloc::vec::Vec;
use nalgebra::Matrix3;

/// A solved boundary-value geodesic: its length and the connecting
/// unit-speed trajectory (from `from` to `to`, both in ball coordinates).
#[derive(Debug, Clone)]
pub struct Connection {
    pub length: f64,
    pub trajectory: Trajectory,
    /// Unit covector at the start of the connecting geodesic.
    pub initial: PhasePoint,
    /// Phase point at arrival (covector points away from `from`).
    pub arrival: PhasePoint,
}

#[derive(Debug, Clone, Copy)]
pub struct ShootingParams {
    pub flow: FlowParams,
    pub tol: f64,
    pub max_newton: usize,
    pub restarts: usize,
}

impl Default for ShootingParams {
    fn default() -> Self {
        let mut flow = FlowParams::default();
        flow.max_step = 0.25;
        ShootingParams { flow, tol: 1e-11, max_newton: 60, restarts: 20 }
    }
}

/// Geodesic distance between two interior points (ball coordinates).
pub fn distance(m: &AHMetric, z: &V3, zp: &V3) -> Result<f64> {
    Ok(connect(m, z, zp, &ShootingParams::default())?.length)
}

/// Shooting solve for the connecting geodesic from `from` to `to`.
pub fn connect(m: &AHMetric, from: &V3, to: &V3, params: &ShootingParams) -> Result<Connection> {
    let sep = {
        let d = to - from;
        if m.n() == 1 {
            (d[0] * d[0] + d[1] * d[1]).sqrt()
        } else {
            d.norm()
        }
    };
    if sep < 1e-14 {
        return Err(CoreError::InvalidArgument { detail: "coincident endpoints" });
    }
    let e = m
        .metric_eval(ChartId::Ball, from)
        // Perturbed models restrict the ball chart; fall back to the exact
        // chord metric just for the initial direction.
        .or_else(|_| AHMetric::ball(m.n()).metric_eval(ChartId::Ball, from))?;
    let chord = to - from;
    let zeta0 = e.g * chord;
    let t0 = exact::ball_distance(m.n(), from, to).max(1e-3);

    let mut best_miss = f64::INFINITY;
    for attempt in 0..=params.restarts {
        let dir = if attempt == 0 { zeta0 } else { rotated_direction(m.n(), &zeta0, attempt) };
        match newton_solve(m, from, to, dir, t0, params) {
            Ok(conn) => return Ok(conn),
            Err(CoreError::ShootingFailure { best_missmatch, .. }) => {
                best_miss = best_miss.min(best_missmatch);
            }
            Err(_) => {}
        }
    }
    Err(CoreError::ShootingFailure { best_missmatch: best_miss, iterations: params.max_newton })
}

/// Shooting solve warm-started from a known initial covector and flight time
/// (used when solving many nearby boundary-value problems).
pub fn connect_with_init(
    m: &AHMetric,
    from: &V3,
    to: &V3,
    init_dir: &V3,
    init_t: f64,
    params: &ShootingParams,
) -> Result<Connection> {
    match newton_solve(m, from, to, *init_dir, init_t, params) {
        Ok(c) => Ok(c),
        // fall back to the cold path with chord initialization
        Err(_) => connect(m, from, to, params),
    }
}

/// Deterministic golden-angle restart directions.
fn rotated_direction(n: usize, base: &V3, attempt: usize) -> V3 {
    let golden = core::f64::consts::PI * (3.0 - 5f64.sqrt());
    let a = golden * attempt as f64;
    if n == 1 {
        let (c, s) = (a.cos(), a.sin());
        V3::new(c * base[0] - s * base[1], s * base[0] + c * base[1], 0.0)
    } else {
        let b = (attempt as f64 * 0.71).sin() * core::f64::consts::FRAC_PI_2;
        let (ca, sa) = (a.cos(), a.sin());
        let (cb, sb) = (b.cos(), b.sin());
        let r = base.norm();
        r * V3::new(cb * ca, cb * sa, sb)
    }
}

fn newton_solve(
    m: &AHMetric,
    from: &V3,
    to: &V3,
    dir: V3,
    t0: f64,
    params: &ShootingParams,
) -> Result<Connection> {
    let dim = m.dim();
    let mut start = PhasePoint::unit(m, ChartId::Ball, *from, dir)?;
    let mut t_flight = t0;
    let mut best = f64::INFINITY;

    for it in 0..params.max_newton {
        let traj = flow::flow(m, &start, t_flight, 1e-7, &params.flow)?;
        let endpoint = traj.last();
        let (end_ball, jac_ball) = endpoint_in_ball(m, endpoint)?;
        let miss = end_ball.z - to;
        let scale = 2.0 / (1.0 - ball_norm2(m.n(), to)).max(1e-6);
        let res = ball_norm2(m.n(), &miss).sqrt() * scale;
        best = best.min(res);
        if res <= params.tol {
            return Ok(Connection {
                length: t_flight,
                trajectory: traj,
                initial: start,
                arrival: end_ball,
            });
        }

        // Newton system: columns = sensitivity to the transverse covector
        // parameters, plus the flight time.
        let basis = flow::transverse_basis(m, &start)?;
        let mut cols: Vec<V3> = Vec::new();
        for b in &basis {
            let mut v6 = nalgebra::Vector6::<f64>::zeros();
            for i in 0..3 {
                v6[3 + i] = b[i];
            }
            let w6 = endpoint.var * v6;
            cols.push(jac_ball * V3::new(w6[0], w6[1], w6[2]));
        }
        let (zdot, _) = end_rhs(m, endpoint)?;
        cols.push(jac_ball * zdot);

        let k = cols.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(dim, k);
        let mut rhs = nalgebra::DVector::<f64>::zeros(dim);
        for i in 0..dim {
            for (j, c) in cols.iter().enumerate() {
                a[(i, j)] = c[i];
            }
            rhs[i] = -miss[i];
        }
        let svd = a.svd(true, true);
        let delta = svd
            .solve(&rhs, 1e-13)
            .map_err(|_| CoreError::ShootingFailure { best_missmatch: best, iterations: it })?;

        // Damped update with backtracking on the mismatch.
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..8 {
            let mut zeta_new = start.zeta;
            for (j, b) in basis.iter().enumerate() {
                zeta_new += lambda * delta[j] * *b;
            }
            let t_new = (t_flight + lambda * delta[k - 1]).max(1e-6);
            if let Ok(cand) = PhasePoint::unit(m, ChartId::Ball, *from, zeta_new) {
                if let Ok(tr) = flow::flow(m, &cand, t_new, 1e-7, &params.flow) {
                    if let Ok((eb, _)) = endpoint_in_ball(m, tr.last()) {
                        let r2 = ball_norm2(m.n(), &(eb.z - to)).sqrt() * scale;
                        if r2 < res {
                            start = cand;
                            t_flight = t_new;
                            improved = true;
                            break;
                        }
                    }
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            return Err(CoreError::ShootingFailure { best_missmatch: best, iterations: it });
        }
    }
    Err(CoreError::ShootingFailure { best_missmatch: best, iterations: params.max_newton })
}

fn ball_norm2(n: usize, z: &V3) -> f64 {
    if n == 1 {
        z[0] * z[0] + z[1] * z[1]
    } else {
        z.norm_squared()
    }
}

/// Endpoint state converted to ball coordinates together with the Jacobian of
/// the conversion (for chaining with the variational matrix).
fn endpoint_in_ball(m: &AHMetric, s: &flow::Sample) -> Result<(PhasePoint, Matrix3<f64>)> {
    let pb = s.state.to_chart(m, ChartId::Ball)?;
    let j = chart::jacobian(m.atlas(), s.state.chart, &s.state.z, ChartId::Ball)?;
    Ok((pb, j))
}

fn end_rhs(m: &AHMetric, s: &flow::Sample) -> Result<(V3, V3)> {
    let (gs, dgs) = m.dual_with_derivs(s.state.chart, &s.state.z)?;
    let zdot = gs * s.state.zeta;
    let mut zetadot = V3::zeros();
    for k in 0..m.dim() {
        zetadot[k] = -0.5 * (dgs[k] * s.state.zeta).dot(&s.state.zeta);
    }
    Ok((zdot, zetadot))
}

/// Conservative lower-bound probe of the injectivity radius at `z`.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// Largest tested radius at which all diagnostics pass.
    pub radius: f64,
    /// Smallest transverse spreading determinant seen inside `radius`.
    pub min_spreading: f64,
    /// Spreading determinants were strictly increasing along every ray.
    pub spreading_monotone: bool,
}

/// Sample `n_dirs` unit covectors at `z`, flow each to `r_cap`, and return the
/// largest checkpoint radius at which (a) all spreading determinants stay
/// positive (monitored for monotonicity along each ray), and (b) pairwise
/// endpoint separations remain consistent with a local diffeomorphism
/// (`d_ij ≥ ¼·θ_ij·ρ`, separations measured with the exact-ball distance as a
/// fixed comparison metric). Conservative by construction.
pub fn injectivity_probe(
    m: &AHMetric,
    z: &V3,
    r_cap: f64,
    n_dirs: usize,
    params: &FlowParams,
) -> Result<ProbeReport> {
    let n = m.n();
    let dirs = direction_set(n, n_dirs);
    let checkpoints = 20usize;

    let mut endpoints: Vec<Vec<V3>> = Vec::with_capacity(dirs.len());
    let mut min_spreading = f64::INFINITY;
    let mut monotone = true;
    let mut covectors: Vec<V3> = Vec::new();

    let mut p = *params;
    p.max_step = r_cap / checkpoints as f64;
    for d in &dirs {
        let start = PhasePoint::unit(m, ChartId::Ball, *z, *d)?;
        covectors.push(start.zeta);
        let traj = flow::flow(m, &start, r_cap, 1e-7, &p)?;
        let basis = flow::transverse_basis(m, &start)?;
        let mut pts = Vec::with_capacity(checkpoints);
        let mut prev_a = 0.0;
        for k in 1..=checkpoints {
            let t = r_cap * k as f64 / checkpoints as f64;
            let state = flow::state_at(m, &traj, t)?;
            pts.push(state.z);
            let idx = traj
                .samples
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1.t - t).abs().partial_cmp(&(b.1.t - t).abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let a = flow::spreading(m, &basis, &traj.samples[idx])?;
            min_spreading = min_spreading.min(a);
            if a <= prev_a {
                monotone = false;
            }
            prev_a = a;
        }
        endpoints.push(pts);
    }

    // angular separations of the initial covectors in g*(z)
    let gs = m
        .metric_eval(ChartId::Ball, z)
        .or_else(|_| AHMetric::ball(n).metric_eval(ChartId::Ball, z))?
        .g_star;
    let angle = |a: &V3, b: &V3| {
        let na = (gs * *a).dot(a).sqrt();
        let nb = (gs * *b).dot(b).sqrt();
        ((gs * *a).dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
    };

    let mut pass_radius = 0.0;
    'outer: for k in 0..checkpoints {
        let rho = r_cap * (k + 1) as f64 / checkpoints as f64;
        if min_spreading <= 0.0 {
            break;
        }
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                let th = angle(&covectors[i], &covectors[j]);
                let sep = exact::ball_distance(n, &endpoints[i][k], &endpoints[j][k]);
                if sep < 0.25 * th * rho {
                    break 'outer;
                }
            }
        }
        pass_radius = rho;
    }

    Ok(ProbeReport { radius: pass_radius, min_spreading, spreading_monotone: monotone })
}

/// Deterministic well-spread direction set: uniform circle for `n = 1`,
/// Fibonacci sphere for `n = 2`.
pub fn direction_set(n: usize, count: usize) -> Vec<V3> {
    let mut dirs = Vec::with_capacity(count);
    if n == 1 {
        for k in 0..count {
            let th = 2.0 * core::f64::consts::PI * k as f64 / count as f64;
            dirs.push(V3::new(th.cos(), th.sin(), 0.0));
        }
    } else {
        let golden = core::f64::consts::PI * (3.0 - 5f64.sqrt());
        for k in 0..count {
            let zc = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
            let r = (1.0 - zc * zc).sqrt();
            let th = golden * k as f64;
            dirs.push(V3::new(r * th.cos(), r * th.sin(), zc));
        }
    }
    dirs
}
