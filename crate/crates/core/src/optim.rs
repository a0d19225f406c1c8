//! Dense BFGS with a strong-Wolfe line search, for the low-dimensional
//! smooth problems of the estimator.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BfgsConfig {
    /// Stop when the stationarity measure falls to this value.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Armijo constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 500, c1: 1e-4, c2: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Status {
    Converged,
    MaxIterations,
    /// No step satisfying the Wolfe conditions was found, usually because
    /// the objective is flat to rounding.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub status: Status,
    /// Stationarity measure at `x`.
    pub measure: f64,
    /// Objective at every accepted iterate, starting with `x0`.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimizes `fg` from `x0`. `fg` returns the value and gradient; evaluation
/// errors during a line search count as an infinite value. `measure` maps
/// `(x, g)` to the stationarity measure compared against `grad_tol`.
pub fn minimize<F, M>(x0: &[f64], mut fg: F, measure: M, cfg: &BfgsConfig) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    M: Fn(&[f64], &[f64]) -> f64,
{
    let n = x0.len();
    let (f0, g0) = fg(x0)?;
    let mut cur = Point { x: x0.to_vec(), f: f0, g: g0 };
    let mut h = identity(n);
    let mut trace = vec![cur.f];
    let mut iterations = 0;
    let mut fresh = true;

    loop {
        let m = measure(&cur.x, &cur.g);
        if m <= cfg.grad_tol {
            return Ok(finish(cur, iterations, Status::Converged, m, trace));
        }
        if iterations >= cfg.max_iter {
            return Ok(finish(cur, iterations, Status::MaxIterations, m, trace));
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i], &cur.g)).collect();
        if dot(&d, &cur.g) >= 0.0 {
            h = identity(n);
            fresh = true;
            d = cur.g.iter().map(|v| -v).collect();
        }
        let step0 = if fresh { f64::min(1.0, 1.0 / sup(&cur.g).max(1e-300)) } else { 1.0 };
        let next = match line_search(&mut fg, &cur, &d, step0, cfg) {
            Some(p) => p,
            None if !fresh => {
                h = identity(n);
                fresh = true;
                continue;
            }
            None => return Ok(finish(cur, iterations, Status::LineSearchFailed, m, trace)),
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * libm::sqrt(dot(&s, &s) * dot(&y, &y)) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().enumerate().for_each(|(i, r)| r[i] = scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        cur = next;
        trace.push(cur.f);
        iterations += 1;
    }
}

fn finish(p: Point, iterations: usize, status: Status, measure: f64, trace: Vec<f64>) -> BfgsResult {
    BfgsResult { x: p.x, f: p.f, g: p.g, iterations, status, measure, trace }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// `H <- (I - rho s y') H (I - rho y s') + rho s s'`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

fn line_search<F>(fg: &mut F, cur: &Point, d: &[f64], step0: f64, cfg: &BfgsConfig) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dg0 = dot(&cur.g, d);
    let mut eval = |alpha: f64| -> (Point, f64) {
        let x: Vec<f64> = cur.x.iter().zip(d).map(|(x, di)| x + alpha * di).collect();
        match fg(&x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let dg = dot(&g, d);
                (Point { x, f, g }, dg)
            }
            _ => (Point { x, f: f64::INFINITY, g: vec![f64::NAN; d.len()] }, f64::NAN),
        }
    };

    let mut lo = (0.0, cur.f, dg0);
    let mut alpha = step0;
    let mut lo_point: Option<Point> = None;
    for i in 0..40 {
        let (p, dg) = eval(alpha);
        if !p.f.is_finite() {
            alpha = 0.5 * (lo.0 + alpha);
            continue;
        }
        if approx_wolfe(cur, &p, dg, dg0, cfg) {
            return Some(p);
        }
        if p.f > cur.f + cfg.c1 * alpha * dg0 || (i > 0 && p.f >= lo.1) {
            return zoom(&mut eval, cur, dg0, lo, lo_point, (alpha, p.f, dg), cfg);
        }
        if dg.abs() <= -cfg.c2 * dg0 {
            return Some(p);
        }
        if dg >= 0.0 {
            return zoom(&mut eval, cur, dg0, (alpha, p.f, dg), Some(p), lo, cfg);
        }
        lo = (alpha, p.f, dg);
        lo_point = Some(p);
        alpha *= 2.0;
    }
    None
}

/// Approximate Wolfe conditions (Hager and Zhang) for when the decrease is
/// below the rounding level of `f`: the slope must flatten out as in the
/// curvature condition, and the value may not increase.
fn approx_wolfe(cur: &Point, p: &Point, dg: f64, dg0: f64, cfg: &BfgsConfig) -> bool {
    let flat = 1e-12 * (1.0 + cur.f.abs());
    p.f <= cur.f && cur.f - p.f <= flat && dg >= cfg.c2 * dg0 && dg <= (2.0 * cfg.c1 - 1.0) * dg0
}

/// Zoom phase; `lo` satisfies sufficient decrease with the lowest value seen.
fn zoom<E>(
    eval: &mut E,
    cur: &Point,
    dg0: f64,
    mut lo: (f64, f64, f64),
    mut lo_point: Option<Point>,
    mut hi: (f64, f64, f64),
    cfg: &BfgsConfig,
) -> Option<Point>
where
    E: FnMut(f64) -> (Point, f64),
{
    for _ in 0..60 {
        let alpha = interpolate(lo, hi);
        let (p, dg) = eval(alpha);
        if approx_wolfe(cur, &p, dg, dg0, cfg) {
            return Some(p);
        }
        if !p.f.is_finite() || p.f > cur.f + cfg.c1 * alpha * dg0 || p.f >= lo.1 {
            hi = (alpha, p.f, dg);
        } else {
            if dg.abs() <= -cfg.c2 * dg0 {
                return Some(p);
            }
            if dg * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, p.f, dg);
            lo_point = Some(p);
        }
        if (hi.0 - lo.0).abs() <= 1e-14 * lo.0.abs().max(1e-14) {
            break;
        }
    }
    // Accept a point with sufficient decrease even if the curvature
    // condition could not be met; the update is skipped when s'y <= 0.
    lo_point.filter(|p| p.f < cur.f)
}

/// Minimizer of the cubic through both endpoints, safeguarded into the
/// middle of the bracket; bisection when the cubic is unusable.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a, fa, ga) = lo;
    let (b, fb, gb) = hi;
    let mid = 0.5 * (a + b);
    if !(fb.is_finite() && gb.is_finite()) {
        return mid;
    }
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * libm::sqrt(disc);
    let t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
    let (l, u) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (u - l);
    if t.is_finite() && t > l + margin && t < u - margin {
        t
    } else {
        mid
    }
}
