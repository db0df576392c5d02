//! Stabilized weights by entropy tilting.
//!
//! With `g_i = u(T_i) ⊗ v(X_i)` and `c = (∫u dt) ⊗ mean(v(X))`, the dual is
//!
//! ```text
//! G(λ) = -(1/n) Σ exp(-g_i'λ - 1) - c'λ
//! ```
//!
//! Its gradient `(1/n) Σ ω_i g_i - c` is exactly the balance residual, and
//! its Hessian `-(1/n) Σ ω_i g_i g_i'` is negative definite whenever the
//! `g_i` span the space. The fitted weight is `ω(t,x) = exp(-u(t)'Λv(x) - 1)`,
//! where `vec(Λ)` stacks rows of the `K1 × K2` matrix `Λ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::sieve::Basis;
use crate::stats::neumaier_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightOptions {
    pub tol_grad: f64,
    pub max_iter: usize,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions { tol_grad: 1e-9, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    pub dual: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub newton: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFit {
    pub lambda: DMatrix<f64>,
    pub basis_t: Basis,
    pub basis_x: Basis,
    pub integrate_u: Vec<f64>,
    pub converged: bool,
    pub dual_value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub history: Vec<IterRecord>,
    /// Smallest and largest weight on the fitting sample.
    pub range: (f64, f64),
}

/// Sample dual program over fixed bases.
pub struct DualProblem {
    g: DMatrix<f64>,
    c: DVector<f64>,
    k1: usize,
    k2: usize,
}

impl DualProblem {
    pub fn new(data: &Dataset, basis_t: &Basis, basis_x: &Basis) -> Result<Self> {
        let n = data.n();
        let (k1, k2) = (basis_t.k(), basis_x.k());
        let u = basis_t.eval_rows(data.t())?;
        let v = basis_x.eval_rows(data.x())?;
        let mut g = DMatrix::zeros(n, k1 * k2);
        for i in 0..n {
            for a in 0..k1 {
                let ua = u[(i, a)];
                for b in 0..k2 {
                    g[(i, a * k2 + b)] = ua * v[(i, b)];
                }
            }
        }
        let iu = basis_t.integrate_u()?;
        let vbar: Vec<f64> = (0..k2).map(|b| v.column(b).sum() / n as f64).collect();
        let c = DVector::from_fn(k1 * k2, |j, _| iu[j / k2] * vbar[j % k2]);
        Ok(DualProblem { g, c, k1, k2 })
    }

    pub fn dim(&self) -> usize {
        self.k1 * self.k2
    }

    fn n(&self) -> f64 {
        self.g.nrows() as f64
    }

    /// Per-unit weights `exp(-g_i'λ - 1)`.
    pub fn weights(&self, lambda: &DVector<f64>) -> DVector<f64> {
        (&self.g * lambda).map(|s| (-s - 1.0).exp())
    }

    pub fn value(&self, lambda: &DVector<f64>) -> f64 {
        self.value_from(&self.weights(lambda), lambda)
    }

    fn value_from(&self, w: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let s = neumaier_sum(w.iter().copied()) / self.n();
        -s - neumaier_sum(self.c.iter().zip(lambda.iter()).map(|(a, b)| a * b))
    }

    pub fn gradient_from(&self, w: &DVector<f64>) -> DVector<f64> {
        self.g.tr_mul(w) / self.n() - &self.c
    }

    pub fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.gradient_from(&self.weights(lambda))
    }

    /// The negated Hessian `(1/n) Σ ω_i g_i g_i'`.
    pub fn curvature_from(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut gw = self.g.clone();
        for (i, wi) in w.iter().enumerate() {
            gw.row_mut(i).scale_mut(*wi);
        }
        let mut m = self.g.tr_mul(&gw) / self.n();
        m = (&m + m.transpose()) * 0.5;
        m
    }

    fn to_matrix(&self, lambda: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.k1, self.k2, lambda.as_slice())
    }

    /// Damped Newton ascent from `λ = 0` with Armijo backtracking.
    pub fn solve(&self, opts: &WeightOptions) -> (DVector<f64>, Vec<IterRecord>, bool) {
        let mut lambda = DVector::zeros(self.dim());
        let mut w = self.weights(&lambda);
        let mut val = self.value_from(&w, &lambda);
        let mut history = Vec::new();
        let mut grad = self.gradient_from(&w);
        for iter in 0..opts.max_iter {
            let gnorm = grad.amax();
            if gnorm <= opts.tol_grad {
                history.push(IterRecord { iter, dual: val, grad_norm: gnorm, step: 0.0, newton: true });
                return (lambda, history, true);
            }
            let curv = self.curvature_from(&w);
            let (dir, newton) = match curv.cholesky() {
                Some(ch) => (ch.solve(&grad), true),
                None => (grad.clone(), false),
            };
            let slope = grad.dot(&dir);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &lambda + step * &dir;
                let tw = self.weights(&trial);
                let tv = self.value_from(&tw, &trial);
                if !tv.is_finite() {
                    step *= 0.5;
                    continue;
                }
                let armijo = tv >= val + 1e-4 * step * slope;
                // at the roundoff floor value changes are invisible, so a
                // step that shrinks the gradient without losing value counts
                let floor = !armijo
                    && tv >= val - 1e-13 * val.abs().max(1.0)
                    && self.gradient_from(&tw).amax() < gnorm;
                if armijo || floor {
                    lambda = trial;
                    w = tw;
                    val = tv;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            history.push(IterRecord { iter, dual: val, grad_norm: gnorm, step, newton });
            let new_grad = self.gradient_from(&w);
            if !accepted {
                // roundoff floor: no ascent is measurable any more
                grad = new_grad;
                break;
            }
            grad = new_grad;
        }
        let gnorm = grad.amax();
        let conv = gnorm <= opts.tol_grad;
        history.push(IterRecord { iter: history.len(), dual: val, grad_norm: gnorm, step: 0.0, newton: true });
        (lambda, history, conv)
    }
}

/// Fits `Λ` on `data`. Fails with the last iterate if the gradient
/// tolerance is not met.
pub fn fit_stabilized_weights(
    data: &Dataset,
    basis_t: &Basis,
    basis_x: &Basis,
    opts: &WeightOptions,
) -> Result<WeightFit> {
    let (k1, k2) = (basis_t.k(), basis_x.k());
    if data.n() < k1 * k2 {
        return Err(Error::InvalidArgument(format!(
            "need n >= K1*K2 = {}, have n = {}",
            k1 * k2,
            data.n()
        )));
    }
    let prob = DualProblem::new(data, basis_t, basis_x)?;
    let (lambda, history, converged) = prob.solve(opts);
    let last = history.last().expect("history is never empty");
    let fitted = prob.weights(&lambda);
    let fit = WeightFit {
        lambda: prob.to_matrix(&lambda),
        basis_t: basis_t.clone(),
        basis_x: basis_x.clone(),
        integrate_u: basis_t.integrate_u()?,
        converged,
        dual_value: last.dual,
        iterations: history.len() - 1,
        grad_norm: last.grad_norm,
        history,
        range: (fitted.min(), fitted.max()),
    };
    if !converged {
        return Err(Error::WeightsNotConverged(Box::new(fit)));
    }
    Ok(fit)
}

impl WeightFit {
    /// The stacked `vec(Λ)`.
    pub fn lambda_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.lambda.len(), self.lambda.transpose().iter().copied())
    }

    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<f64> {
        let u = DVector::from_vec(self.basis_t.eval_t(t)?);
        let v = DVector::from_vec(self.basis_x.eval(x)?);
        Ok((-(u.transpose() * &self.lambda * v)[(0, 0)] - 1.0).exp())
    }

    /// `evaluate` clamped to the weights seen on the fitting sample, for
    /// points outside it where the tilt would extrapolate.
    pub fn evaluate_in_range(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(t, x)?.clamp(self.range.0, self.range.1))
    }

    /// Weights at every observation of `data`.
    pub fn evaluate_all(&self, data: &Dataset) -> Result<Vec<f64>> {
        let u = self.basis_t.eval_rows(data.t())?;
        let v = self.basis_x.eval_rows(data.x())?;
        let ul = u * &self.lambda;
        Ok((0..data.n())
            .map(|i| (-ul.row(i).dot(&v.row(i)) - 1.0).exp())
            .collect())
    }
}

pub fn evaluate_weight(fit: &WeightFit, t: f64, x: &[f64]) -> Result<f64> {
    fit.evaluate(t, x)
}

/// `(1/n) Σ ω_i u(T_i) v(X_i)' - (∫u dt)(mean v(X))'`.
pub fn balance_residual(fit: &WeightFit, data: &Dataset) -> Result<DMatrix<f64>> {
    let prob = DualProblem::new(data, &fit.basis_t, &fit.basis_x)?;
    Ok(prob.to_matrix(&prob.gradient(&fit.lambda_vec())))
}

/// Root mean square of `ω̂ - ω` over the sample.
pub fn weight_l2_error(fit: &WeightFit, data: &Dataset, true_omega: &dyn Fn(f64, &[f64]) -> f64) -> Result<f64> {
    let w = fit.evaluate_all(data)?;
    let ss: f64 = (0..data.n())
        .map(|i| (w[i] - true_omega(data.t()[i], data.row(i))).powi(2))
        .sum();
    Ok((ss / data.n() as f64).sqrt())
}
