//! Small shared numerics: line fits, Richardson extrapolation, Gauss–Legendre
//! quadrature nodes, finite-difference stencils and interpolation.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec::Vec;

/// Least-squares line fit `y ≈ slope·x + intercept`.
///
/// Returns `(slope, intercept, rms_residual)`.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let m = xs.len() as f64;
    assert!(m >= 2.0, "line fit needs at least two points");
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = y - slope * x - intercept;
        ss += r * r;
    }
    (slope, intercept, (ss / m).sqrt())
}

/// Log-log slope fit; all entries must be strictly positive.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (s, _, rms) = line_fit(&lx, &ly);
    (s, rms)
}

/// One Richardson pass for a sequence `t_k = T + c·q^{-α k} + o(q^{-α k})`
/// sampled at parameter ratio `q` with leading order `α`.
pub fn richardson_step(coarse: f64, fine: f64, q: f64, alpha: f64) -> f64 {
    let w = q.powf(alpha);
    (w * fine - coarse) / (w - 1.0)
}

/// Richardson-extrapolate a short sequence of values computed at levels
/// `x_k = x_0 · q^{-k}` with error expansion in orders `α, α + αstep, …`.
/// Returns the extrapolated limit and the successive correction magnitudes.
pub fn richardson_limit(values: &[f64], q: f64, alpha: f64, alpha_step: f64) -> (f64, Vec<f64>) {
    assert!(values.len() >= 2);
    let mut row: Vec<f64> = values.to_vec();
    let mut corrections = Vec::new();
    let mut order = alpha;
    while row.len() > 1 {
        let mut next = Vec::with_capacity(row.len() - 1);
        for k in 0..row.len() - 1 {
            next.push(richardson_step(row[k], row[k + 1], q, order));
        }
        corrections.push((next[next.len() - 1] - row[row.len() - 1]).abs());
        row = next;
        order += alpha_step;
    }
    (row[0], corrections)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre polynomial.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let m = (n + 1) / 2;
    for i in 0..m {
        // Tricomi initial guess.
        let mut x = (core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push(x);
        weights.push(w);
    }
    // Mirror to the full set, ascending in x.
    let mut full_nodes = Vec::with_capacity(n);
    let mut full_weights = Vec::with_capacity(n);
    for i in (0..m).rev() {
        if nodes[i].abs() > 1e-14 || n % 2 == 0 {
            full_nodes.push(-nodes[i]);
            full_weights.push(weights[i]);
        }
    }
    if n % 2 == 1 {
        full_nodes.push(0.0);
        let (_, d) = legendre_and_derivative(n, 0.0);
        full_weights.push(2.0 / (d * d));
    }
    for i in 0..m {
        if nodes[i].abs() > 1e-14 || n % 2 == 0 {
            full_nodes.push(nodes[i]);
            full_weights.push(weights[i]);
        }
    }
    (full_nodes, full_weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| w * half).collect(),
    )
}

/// Fourth-order central first derivative from five equispaced samples
/// `f(x ± 2δ), f(x ± δ), f(x)`.
pub fn central_d1_order4(fm2: f64, fm1: f64, fp1: f64, fp2: f64, delta: f64) -> f64 {
    (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * delta)
}

/// Fourth-order central second derivative from five equispaced samples.
pub fn central_d2_order4(fm2: f64, fm1: f64, f0: f64, fp1: f64, fp2: f64, delta: f64) -> f64 {
    (-fm2 + 16.0 * fm1 - 30.0 * f0 + 16.0 * fp1 - fp2) / (12.0 * delta * delta)
}

/// Natural cubic-spline-free local interpolation: 4-point Lagrange (cubic) on
/// a uniform grid. `frac` is the offset from node `i1` in units of the grid
/// step; requires samples at `i1-1 ..= i1+2`.
pub fn lagrange4(fm1: f64, f0: f64, f1: f64, f2: f64, frac: f64) -> f64 {
    let t = frac;
    let c0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
    let c1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
    let c2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
    let c3 = (t + 1.0) * t * (t - 1.0) / 6.0;
    c0 * fm1 + c1 * f0 + c2 * f1 + c3 * f2
}

/// Cubic interpolation on a uniform grid with clamped edge handling.
pub fn interp_uniform(values: &[f64], x0: f64, dx: f64, x: f64) -> f64 {
    let n = values.len();
    assert!(n >= 4);
    let s = (x - x0) / dx;
    let mut i1 = s.floor() as isize;
    if i1 < 1 {
        i1 = 1;
    }
    if i1 > n as isize - 3 {
        i1 = n as isize - 3;
    }
    let frac = s - i1 as f64;
    let i = i1 as usize;
    lagrange4(values[i - 1], values[i], values[i + 1], values[i + 2], frac)
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid_uniform(values: &[f64], dx: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dx * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}
