//! Sampling of the flow-out Lagrangian, its defining identities and the
//! caustic rank scan.
//!
//! Points of the initial set are (z, ζ, z, −ζ) with |ζ|_{g*} = 1; the flow-out
//! moves the left factor forward for time t₂ and the right factor (with the
//! reversed covector) for time t₁. Tangent frames are obtained by central
//! differences of this parametrization (base point, covector sphere, flow
//! parameter), and the caustic order is the rank deficiency of the projection
//! of the frame onto the base coordinates.

#[allow(unused_imports)]
use num_traits::Float;

use crate::chart::{ChartId, V3};
use crate::error::{CoreError, Result};
use crate::flow::{self, FlowParams, PhasePoint};
use crate::metric::AHMetric;
use alloc::vec::Vec;
use nalgebra::DMatrix;

/// A point of the flow-out Lagrangian with its flow parameters and a
/// numerical tangent frame in the (z, ζ, z', ζ') coordinates (ball chart).
#[derive(Debug, Clone)]
pub struct LagrangianSample {
    pub left: PhasePoint,
    pub right: PhasePoint,
    pub t1: f64,
    pub t2: f64,
    /// Columns are the 2n+2 tangent vectors in R^{4(n+1)}.
    pub tangent_frame: DMatrix<f64>,
}

/// A seed point of the initial set: base point (ball coordinates) and an
/// unnormalized covector direction.
#[derive(Debug, Clone, Copy)]
pub struct FlowoutSeed {
    pub z: V3,
    pub dir: V3,
}

#[derive(Debug, Clone)]
pub struct FlowoutResult {
    pub samples: Vec<LagrangianSample>,
    /// Seeds skipped because a flow or frame evaluation failed.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FrameParams {
    pub flow: FlowParams,
    /// Relative step for the central differences of the parametrization.
    pub fd_step: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        let mut flow = FlowParams::default();
        flow.rtol = 1e-12;
        flow.atol = 1e-14;
        flow.with_variational = false;
        FrameParams { flow, fd_step: 1e-5 }
    }
}

fn active(n: usize) -> usize {
    n + 1
}

/// Evaluate the flow-out map at (z₀, covector sphere offset u, t₁, t₂).
fn flowout_point(
    m: &AHMetric,
    z0: &V3,
    raw_dir: &V3,
    basis: &[V3],
    u: &[f64],
    t1: f64,
    t2: f64,
    params: &FlowParams,
) -> Result<(PhasePoint, PhasePoint)> {
    let mut dir = *raw_dir;
    for (a, b) in u.iter().zip(basis) {
        dir += *a * *b;
    }
    let start = PhasePoint::unit(m, ChartId::Ball, *z0, dir)?;
    let run = |sign: f64, t: f64| -> Result<PhasePoint> {
        if t == 0.0 {
            return Ok(PhasePoint::new(start.chart, start.z, sign * start.zeta));
        }
        let s = PhasePoint::new(start.chart, start.z, sign * start.zeta);
        let traj = flow::flow(m, &s, t, 1e-7, params)?;
        traj.last().state.to_chart(m, ChartId::Ball)
    };
    let left = run(1.0, t2)?;
    let right = run(-1.0, t1)?;
    Ok((left, right))
}

fn pack(n: usize, left: &PhasePoint, right: &PhasePoint) -> Vec<f64> {
    let d = active(n);
    let mut v = Vec::with_capacity(4 * d);
    for i in 0..d {
        v.push(left.z[i]);
    }
    for i in 0..d {
        v.push(left.zeta[i]);
    }
    for i in 0..d {
        v.push(right.z[i]);
    }
    for i in 0..d {
        v.push(right.zeta[i]);
    }
    v
}

/// Sample the flow-out Lagrangian over seeds × flow-parameter pairs, with
/// tangent frames by central differences. Failed evaluations are skipped and
/// counted.
pub fn sample_flowout(
    m: &AHMetric,
    seeds: &[FlowoutSeed],
    t_pairs: &[(f64, f64)],
    params: &FrameParams,
) -> FlowoutResult {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for seed in seeds {
        for &(t1, t2) in t_pairs {
            match frame_at(m, seed, t1, t2, params) {
                Ok(s) => samples.push(s),
                Err(_) => skipped += 1,
            }
        }
    }
    FlowoutResult { samples, skipped }
}

fn frame_at(
    m: &AHMetric,
    seed: &FlowoutSeed,
    t1: f64,
    t2: f64,
    params: &FrameParams,
) -> Result<LagrangianSample> {
    let n = m.n();
    let d = active(n);
    let start = PhasePoint::unit(m, ChartId::Ball, seed.z, seed.dir)?;
    let basis = flow::transverse_basis(m, &start)?;
    let (left, right) =
        flowout_point(m, &seed.z, &seed.dir, &basis, &[0.0; 2], t1, t2, &params.flow)?;

    let n_params = 2 * n + 2;
    let mut frame = DMatrix::<f64>::zeros(4 * d, n_params);
    let mut col = 0usize;

    // base-point directions
    for k in 0..d {
        let h = params.fd_step * (1.0 + seed.z[k].abs());
        let mut zp = seed.z;
        let mut zm = seed.z;
        zp[k] += h;
        zm[k] -= h;
        let (lp, rp) = flowout_point(m, &zp, &seed.dir, &basis, &[0.0; 2], t1, t2, &params.flow)?;
        let (lm, rm) = flowout_point(m, &zm, &seed.dir, &basis, &[0.0; 2], t1, t2, &params.flow)?;
        let vp = pack(n, &lp, &rp);
        let vm = pack(n, &lm, &rm);
        for i in 0..4 * d {
            frame[(i, col)] = (vp[i] - vm[i]) / (2.0 * h);
        }
        col += 1;
    }
    // covector-sphere directions
    for a in 0..n {
        let h = params.fd_step;
        let mut up = [0.0; 2];
        let mut um = [0.0; 2];
        up[a] = h;
        um[a] = -h;
        let (lp, rp) = flowout_point(m, &seed.z, &seed.dir, &basis, &up, t1, t2, &params.flow)?;
        let (lm, rm) = flowout_point(m, &seed.z, &seed.dir, &basis, &um, t1, t2, &params.flow)?;
        let vp = pack(n, &lp, &rp);
        let vm = pack(n, &lm, &rm);
        for i in 0..4 * d {
            frame[(i, col)] = (vp[i] - vm[i]) / (2.0 * h);
        }
        col += 1;
    }
    // flow direction (moves both parameters; one-sided near t = 0)
    {
        let h = params.fd_step * (1.0 + t1.abs() + t2.abs());
        let t1m = (t1 - 0.5 * h).max(0.0);
        let t2m = (t2 - 0.5 * h).max(0.0);
        let (lp, rp) = flowout_point(
            m, &seed.z, &seed.dir, &basis, &[0.0; 2], t1 + 0.5 * h, t2 + 0.5 * h, &params.flow,
        )?;
        let (lm, rm) =
            flowout_point(m, &seed.z, &seed.dir, &basis, &[0.0; 2], t1m, t2m, &params.flow)?;
        let denom = (t1 + 0.5 * h - t1m) + (t2 + 0.5 * h - t2m);
        let vp = pack(n, &lp, &rp);
        let vm = pack(n, &lm, &rm);
        for i in 0..4 * d {
            frame[(i, col)] = (vp[i] - vm[i]) / denom;
        }
    }

    Ok(LagrangianSample { left, right, t1, t2, tangent_frame: frame })
}

/// Maximum of the canonical two-form over all pairs of (normalized) frame
/// vectors. Errors when the frame is numerically degenerate (condition
/// number > 1e8).
pub fn isotropy_residual(n: usize, sample: &LagrangianSample) -> Result<f64> {
    let f = &sample.tangent_frame;
    let svd = f.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax / smin.max(1e-300) > 1e8 {
        return Err(CoreError::DegenerateFrame { cond: smax / smin });
    }
    let d = active(n);
    let cols = f.ncols();
    let mut worst: f64 = 0.0;
    for i in 0..cols {
        let vi = f.column(i);
        let ni = vi.norm();
        for j in (i + 1)..cols {
            let vj = f.column(j);
            let nj = vj.norm();
            let mut om = 0.0;
            for k in 0..d {
                om += vi[d + k] * vj[k] - vi[k] * vj[d + k];
                om += vi[3 * d + k] * vj[2 * d + k] - vi[2 * d + k] * vj[3 * d + k];
            }
            worst = worst.max((om / (ni * nj).max(1e-300)).abs());
        }
    }
    Ok(worst)
}

/// Caustic scan report.
#[derive(Debug, Clone)]
pub struct CausticReport {
    /// Rank deficiency of the base projection per sample.
    pub kappa0: Vec<usize>,
    /// `max κ₀ / 2` over the sweep.
    pub kappa_est: f64,
    /// Smallest ratio `σ_min/(threshold·σ_max)` over full-rank samples
    /// (≥ 1 means the rank decision is clear).
    pub min_margin: f64,
    /// Rank of the full tangent frame per sample (should be 2n+2).
    pub frame_rank: Vec<usize>,
}

pub const RANK_THRESHOLD: f64 = 1e-7;

/// Project tangent frames onto the base coordinates (z, z') and measure the
/// rank deficiency κ₀ per sample; κ_est = max κ₀ / 2. Samples on the initial
/// set itself (t₁ = t₂ = 0) are excluded: there the projection is degenerate
/// along the covector-sphere directions by construction.
pub fn caustic_scan(n: usize, samples: &[LagrangianSample]) -> CausticReport {
    let d = active(n);
    let expect = 2 * n + 2;
    let mut kappa0 = Vec::new();
    let mut frame_rank = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut kmax = 0usize;
    for s in samples {
        if s.t1 == 0.0 && s.t2 == 0.0 {
            continue;
        }
        let f = &s.tangent_frame;
        let svd_full = f.clone().svd(false, false);
        let smax_full = svd_full.singular_values.max();
        let rank_full =
            svd_full.singular_values.iter().filter(|&&sv| sv > RANK_THRESHOLD * smax_full).count();
        frame_rank.push(rank_full);

        // base projection: rows z and z'
        let mut base = DMatrix::<f64>::zeros(2 * d, f.ncols());
        for c in 0..f.ncols() {
            for i in 0..d {
                base[(i, c)] = f[(i, c)];
                base[(d + i, c)] = f[(2 * d + i, c)];
            }
        }
        let svd = base.svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&sv| sv > RANK_THRESHOLD * smax).count();
        let k0 = expect - rank;
        if k0 == 0 {
            let smin = svd.singular_values.min();
            min_margin = min_margin.min(smin / (RANK_THRESHOLD * smax));
        }
        kmax = kmax.max(k0);
        kappa0.push(k0);
    }
    CausticReport { kappa0, kappa_est: kmax as f64 / 2.0, min_margin, frame_rank }
}

/// Residuals of the phase-gradient identities off the diagonal: the sample's
/// covectors against the gradients of the distance phase, with gradients from
/// central differences of the shooting distance.
///
/// Samples store the flow-out orientation, for which `ζ = d_z r(z, z')` and
/// `ζ' = d_{z'} r(z, z')` (both covectors point outward along the connecting
/// geodesic); the frequently written `−d_{z'} r` form refers to the twisted
/// copy of the same Lagrangian and is related by flipping the right covector.
pub fn phase_gradient_check(m: &AHMetric, sample: &LagrangianSample) -> Result<(f64, f64)> {
    let d = active(m.n());
    let z = sample.left.z;
    let zp = sample.right.z;
    let grad = |which_left: bool| -> Result<V3> {
        let mut g = V3::zeros();
        for k in 0..d {
            let base = if which_left { z[k] } else { zp[k] };
            let h = 1e-5 * (1.0 + base.abs());
            let eval = |delta: f64| -> Result<f64> {
                let mut a = z;
                let mut b = zp;
                if which_left {
                    a[k] += delta;
                } else {
                    b[k] += delta;
                }
                crate::geodesic::distance(m, &a, &b)
            };
            g[k] = (eval(h)? - eval(-h)?) / (2.0 * h);
        }
        Ok(g)
    };
    let gl = grad(true)?;
    let gr = grad(false)?;
    let res_left = norm_active(d, &(sample.left.zeta - gl));
    let res_right = norm_active(d, &(sample.right.zeta - gr));
    Ok((res_left, res_right))
}

fn norm_active(d: usize, v: &V3) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        acc += v[i] * v[i];
    }
    acc.sqrt()
}

/// Evaluate the initial-set slice identity in the collar projective
/// coordinates: for a unit covector (ξ, η) at a collar point (x', y'),
/// residual of `(λ̃ + 1)² + h(x', y', μ) = 1` with `λ̃ = x'ξ − 1`, `μ = x'η`
/// and `h` the dual form of the boundary block applied to μ. Returns the
/// maximum residual over the grid.
pub fn slice_identity_check(
    m: &AHMetric,
    x_grid: &[f64],
    y_grid: &[(f64, f64)],
    dir_grid: &[V3],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &x in x_grid {
        for &y in y_grid {
            let data = m.collar_coefficients(x, y)?;
            let (hinv, _) = invert_active(&data.h, m.n());
            for dir in dir_grid {
                let xi_raw = dir[0];
                let mut eta_raw = V3::zeros();
                for a in 0..m.n() {
                    eta_raw[a] = dir[1 + a];
                }
                let q = x * x * (xi_raw * xi_raw + quad(&hinv, &eta_raw, m.n()));
                if q <= 0.0 {
                    continue;
                }
                let s = 1.0 / q.sqrt();
                let xi = xi_raw * s;
                let eta = eta_raw * s;
                let lam_tilde = x * xi - 1.0;
                let mu = x * eta;
                let res =
                    ((lam_tilde + 1.0) * (lam_tilde + 1.0) + quad(&hinv, &mu, m.n()) - 1.0).abs();
                worst = worst.max(res);
            }
        }
    }
    Ok(worst)
}

fn invert_active(h: &crate::chart::M3, n: usize) -> (crate::chart::M3, f64) {
    let mut inv = crate::chart::M3::zeros();
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

fn quad(a: &crate::chart::M3, v: &V3, n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * v[i] * v[j];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn seeds(n: usize, count: usize, rng: &mut impl Rng) -> Vec<FlowoutSeed> {
        let mut out = Vec::new();
        while out.len() < count {
            let z = V3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                if n == 2 { rng.gen_range(-0.4..0.4) } else { 0.0 },
            );
            let dir = V3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                if n == 2 { rng.gen_range(-1.0..1.0) } else { 0.0 },
            );
            if dir.norm() > 0.2 {
                out.push(FlowoutSeed { z, dir });
            }
        }
        out
    }

    #[test]
    fn initial_set_has_antipodal_covectors() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = seeds(2, 1, &mut rng);
        let r = sample_flowout(&m, &s, &[(0.0, 0.0)], &FrameParams::default());
        assert_eq!(r.skipped, 0);
        let smp = &r.samples[0];
        assert!((smp.left.z - smp.right.z).norm() < 1e-14);
        assert!((smp.left.zeta + smp.right.zeta).norm() < 1e-14);
        let res = isotropy_residual(2, smp).unwrap();
        assert!(res <= 1e-9, "residual {res}");
    }

    #[test]
    fn flowout_separates_endpoints_by_t1_plus_t2() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let s = seeds(2, 3, &mut rng);
        let pairs = [(0.3, 0.5), (0.0, 1.1), (0.8, 0.2)];
        let r = sample_flowout(&m, &s, &pairs, &FrameParams::default());
        assert_eq!(r.skipped, 0);
        for smp in &r.samples {
            let d = exact::ball_distance(2, &smp.left.z, &smp.right.z);
            assert_relative_eq!(d, smp.t1 + smp.t2, epsilon = 1e-6);
        }
    }

    #[test]
    fn isotropy_on_ball_sweep() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = seeds(2, 4, &mut rng);
        let pairs = [(0.4, 0.3), (1.0, 0.7)];
        let r = sample_flowout(&m, &s, &pairs, &FrameParams::default());
        for smp in &r.samples {
            let res = isotropy_residual(2, smp).unwrap();
            assert!(res <= 1e-6, "residual {res}");
        }
    }

    #[test]
    fn ball_has_no_caustics_with_margin() {
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let s = seeds(2, 4, &mut rng);
        let pairs = [(0.5, 0.4), (1.2, 0.3), (0.0, 0.0)];
        let r = sample_flowout(&m, &s, &pairs, &FrameParams::default());
        let report = caustic_scan(2, &r.samples);
        assert_eq!(report.kappa_est, 0.0);
        assert!(report.min_margin >= 10.0, "margin {}", report.min_margin);
        assert_eq!(report.kappa0.len(), 8);
        for &rk in &report.frame_rank {
            assert_eq!(rk, 6);
        }
    }

    #[test]
    fn phase_gradients_match_covectors() {
        let m = AHMetric::ball(2);
        let seed = FlowoutSeed { z: V3::new(0.1, 0.0, 0.0), dir: V3::new(1.0, 0.0, 0.0) };
        let r = sample_flowout(&m, &[seed], &[(0.4, 0.6)], &FrameParams::default());
        let smp = &r.samples[0];
        let (rl, rr) = phase_gradient_check(&m, smp).unwrap();
        assert!(rl <= 1e-6, "left residual {rl}");
        assert!(rr <= 1e-6, "right residual {rr}");
    }

    #[test]
    fn left_right_flowouts_coincide() {
        // Λ_L = Λ_R: a left-only sample equals the right-only sample built
        // from the transported seed (flow reversal supplies the bijection).
        let m = AHMetric::ball(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for seed in seeds(2, 5, &mut rng) {
            let tau = 0.9;
            let pl = sample_flowout(&m, &[seed], &[(0.0, tau)], &FrameParams::default());
            let a = &pl.samples[0];
            let seed_b = FlowoutSeed { z: a.left.z, dir: a.left.zeta };
            let pr = sample_flowout(&m, &[seed_b], &[(tau, 0.0)], &FrameParams::default());
            let b = &pr.samples[0];
            let gap = (a.left.z - b.left.z).norm()
                + (a.left.zeta - b.left.zeta).norm()
                + (a.right.z - b.right.z).norm()
                + (a.right.zeta - b.right.zeta).norm();
            assert!(gap <= 1e-6, "gap {gap}");
        }
    }

    #[test]
    fn flow_semigroup_additivity() {
        // exp((s+t)H) = exp(sH)∘exp(tH) to integrator tolerance.
        let m = AHMetric::ball(2);
        let start = PhasePoint::unit(
            &m,
            ChartId::Ball,
            V3::new(0.2, -0.1, 0.3),
            V3::new(0.4, 1.0, -0.2),
        )
        .unwrap();
        let p = FlowParams::default();
        let full = flow::flow(&m, &start, 1.4, 1e-7, &p).unwrap();
        let half = flow::flow(&m, &start, 0.7, 1e-7, &p).unwrap();
        let resumed = flow::flow(&m, &half.last().state, 0.7, 1e-7, &p).unwrap();
        let a = full.last().state.to_chart(&m, ChartId::Ball).unwrap();
        let b = resumed.last().state.to_chart(&m, ChartId::Ball).unwrap();
        assert!((a.z - b.z).norm() < 1e-7);
        assert!((a.zeta - b.zeta).norm() < 1e-7);
    }

    #[test]
    fn slice_identity_is_exact() {
        for n in [1usize, 2] {
            let m = AHMetric::ball(n);
            let x_grid = [0.05, 0.2, 0.6];
            let y_grid = [(0.7, 0.3), (1.4, 2.0)];
            let dirs =
                [V3::new(1.0, 0.0, 0.0), V3::new(0.3, 1.0, 0.0), V3::new(-0.5, 0.2, 0.8)];
            let res = slice_identity_check(&m, &x_grid, &y_grid, &dirs).unwrap();
            assert!(res <= 1e-9, "residual {res}");
        }
    }

    #[test]
    fn slice_identity_mu_zero_roots() {
        // μ = 0 ⇒ λ̃ ∈ {0, −2}
        let x = 0.3f64;
        for sign in [1.0, -1.0] {
            let xi = sign / x;
            let lam_tilde: f64 = x * xi - 1.0;
            assert!((lam_tilde - 0.0).abs() < 1e-14 || (lam_tilde + 2.0).abs() < 1e-14);
        }
    }
}
