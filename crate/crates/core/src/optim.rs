//! Multi-start BFGS ascent on a box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;

/// A smooth function to maximize, returning value and gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Adapts a closure into an [`Objective`].
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaximizeOptions {
    pub restarts: usize,
    /// Gradient tolerance; `None` means `1e-7 / sqrt(n)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub seed: u64,
    /// Half-width of the parameter box.
    pub bound: f64,
    /// Restart points beyond the first are uniform on `[-start_range, start_range]^p`.
    pub start_range: f64,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        MaximizeOptions { restarts: 8, tol: None, max_iter: 500, seed: 0, bound: 50.0, start_range: 2.0 }
    }
}

impl MaximizeOptions {
    pub fn tolerance(&self, n: usize) -> f64 {
        self.tol.unwrap_or(1e-7 / (n.max(1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub restarts_used: usize,
    pub at_boundary: bool,
    pub iterations: usize,
    /// Value at each restart's starting point.
    pub start_values: Vec<f64>,
}

struct Run {
    theta: Vec<f64>,
    value: f64,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
    start_value: f64,
}

fn project(theta: &mut [f64], bound: f64) {
    for v in theta {
        *v = v.clamp(-bound, bound);
    }
}

/// Gradient with components pointing out of the box at active bounds removed.
fn projected_grad(theta: &[f64], g: &[f64], bound: f64) -> Vec<f64> {
    theta
        .iter()
        .zip(g)
        .map(|(&t, &gi)| if (t >= bound && gi > 0.0) || (t <= -bound && gi < 0.0) { 0.0 } else { gi })
        .collect()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bfgs_run(obj: &dyn Objective, start: Vec<f64>, tol: f64, max_iter: usize, bound: f64) -> Result<Run> {
    let p = obj.dim();
    let mut theta = start;
    project(&mut theta, bound);
    let (mut val, mut g) = obj.value_grad(&theta)?;
    let start_value = val;
    // inverse-Hessian approximation of -W
    let mut hinv = vec![0.0; p * p];
    let reset = |h: &mut [f64]| {
        h.fill(0.0);
        for i in 0..p {
            h[i * p + i] = 1.0;
        }
    };
    reset(&mut hinv);
    let mut first = true;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut pg = projected_grad(&theta, &g, bound);
    while iterations < max_iter {
        if norm_inf(&pg) <= tol {
            break;
        }
        iterations += 1;
        // ascent direction d = H g
        let mut d: Vec<f64> = (0..p).map(|i| (0..p).map(|j| hinv[i * p + j] * pg[j]).sum()).collect();
        // coordinates held at the box by the gradient stay fixed
        for i in 0..p {
            if (theta[i] >= bound && g[i] > 0.0) || (theta[i] <= -bound && g[i] < 0.0) {
                d[i] = 0.0;
            }
        }
        if first {
            let s = norm_inf(&d).max(1e-300);
            let scale = (1.0 / s).min(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
        }
        let mut slope = dot(&d, &pg);
        if slope <= 0.0 {
            reset(&mut hinv);
            d = pg.clone();
            slope = dot(&d, &pg);
        }
        let gnorm = norm_inf(&pg);
        let mut step = 1.0;
        let mut next: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut fallback: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..50 {
            let mut trial: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + step * di).collect();
            project(&mut trial, bound);
            let (tv, tg) = obj.value_grad(&trial)?;
            if tv.is_finite() {
                if tv >= val + 1e-4 * step * slope {
                    next = Some((trial, tv, tg));
                    break;
                }
                // near the optimum value differences drown in roundoff;
                // a step that shrinks the gradient is still progress
                if fallback.is_none() && tv >= val - 1e-12 * val.abs().max(1.0) {
                    let tpg = projected_grad(&trial, &tg, bound);
                    if norm_inf(&tpg) < gnorm {
                        fallback = Some((trial, tv, tg));
                    }
                }
            }
            step *= 0.5;
        }
        let Some((nt, nv, ng)) = next.or(fallback) else { break };
        // stop once the value has stopped moving beyond roundoff
        if nv - val <= 1e-14 * val.abs().max(1.0) {
            stalls += 1;
            if stalls >= 5 {
                theta = nt;
                val = nv;
                pg = projected_grad(&theta, &ng, bound);
                break;
            }
        } else {
            stalls = 0;
        }
        let s: Vec<f64> = nt.iter().zip(&theta).map(|(a, b)| a - b).collect();
        // curvature pair for minimizing -W
        let yv: Vec<f64> = g.iter().zip(&ng).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() && sy > 0.0 {
            if first {
                let scale = sy / dot(&yv, &yv);
                reset(&mut hinv);
                hinv.iter_mut().for_each(|v| *v *= scale);
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..p).map(|i| (0..p).map(|j| hinv[i * p + j] * yv[j]).sum()).collect();
            let yhy = dot(&yv, &hy);
            for i in 0..p {
                for j in 0..p {
                    hinv[i * p + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            first = false;
        }
        theta = nt;
        val = nv;
        g = ng;
        pg = projected_grad(&theta, &g, bound);
    }
    let grad_norm = norm_inf(&pg);
    Ok(Run { theta, value: val, grad_norm, converged: grad_norm <= tol, iterations, start_value })
}

/// Maximizes `obj` from `θ = 0` and `restarts - 1` random starts, keeping
/// the best final value. `n` sets the default gradient tolerance.
pub fn maximize(obj: &dyn Objective, opts: &MaximizeOptions, n: usize) -> Result<OptResult> {
    let p = obj.dim();
    let tol = opts.tolerance(n);
    let restarts = opts.restarts.max(1);
    let mut rng = rng::stream(opts.seed, &[0x0971]);
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|r| {
            if r == 0 {
                vec![0.0; p]
            } else {
                (0..p).map(|_| rng.random_range(-opts.start_range..=opts.start_range)).collect()
            }
        })
        .collect();
    let mut best: Option<Run> = None;
    let mut start_values = Vec::with_capacity(restarts);
    let mut iterations = 0;
    for s in starts {
        let run = bfgs_run(obj, s, tol, opts.max_iter, opts.bound)?;
        start_values.push(run.start_value);
        iterations += run.iterations;
        let better = match &best {
            None => true,
            Some(b) => run.value > b.value,
        };
        if better {
            best = Some(run);
        }
    }
    let b = best.expect("at least one restart");
    let at_boundary = b.theta.iter().any(|t| t.abs() >= opts.bound * (1.0 - 1e-12));
    Ok(OptResult {
        theta: b.theta,
        value: b.value,
        grad_norm: b.grad_norm,
        converged: b.converged,
        restarts_used: restarts,
        at_boundary,
        iterations,
        start_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_quadratic() {
        let obj = FnObjective { dim: 1, f: |t: &[f64]| Ok((-(t[0] - 1.0).powi(2) + 5.0, vec![-2.0 * (t[0] - 1.0)])) };
        let r = maximize(&obj, &MaximizeOptions::default(), 100).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-6);
        assert!((r.value - 5.0).abs() < 1e-12);
        assert!(r.converged);
        assert!(r.start_values.iter().all(|v| r.value >= *v));
    }

    #[test]
    fn rosenbrock_like_and_determinism() {
        let f = |t: &[f64]| {
            let (a, b) = (t[0], t[1]);
            let v = -((1.0 - a).powi(2) + 10.0 * (b - a * a).powi(2));
            let ga = 2.0 * (1.0 - a) + 40.0 * a * (b - a * a);
            let gb = -20.0 * (b - a * a);
            Ok((v, vec![ga, gb]))
        };
        let obj = FnObjective { dim: 2, f };
        let opts = MaximizeOptions { seed: 3, ..Default::default() };
        let r = maximize(&obj, &opts, 10_000).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-6 && (r.theta[1] - 1.0).abs() < 1e-6, "{:?}", r.theta);
        let r2 = maximize(&obj, &opts, 10_000).unwrap();
        assert_eq!(r.theta, r2.theta);
    }

    #[test]
    fn boundary_flag() {
        let obj = FnObjective { dim: 1, f: |t: &[f64]| Ok((t[0], vec![1.0])) };
        let r = maximize(&obj, &MaximizeOptions { restarts: 2, ..Default::default() }, 100).unwrap();
        assert!(r.at_boundary);
        assert_eq!(r.theta[0], 50.0);
        assert!(r.converged);
    }
}
