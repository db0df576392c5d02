//! Outcome regressions by sieve ridge and cross-fitted nuisance estimates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_folds, Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::sieve::{build_basis, raw_covariate_basis, treatment_basis, covariate_basis, Basis, BasisDomain, BasisSpec};
use crate::weights::{fit_stabilized_weights, WeightFit, WeightOptions};

/// A known conditional density or mass `f(t|x)`.
pub type CondDensity = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSpec {
    pub basis_t: BasisSpec,
    pub basis_x: BasisSpec,
    /// Ridge penalty; `None` picks `1e-6 · tr(B'B) / K`.
    #[serde(default)]
    pub ridge: Option<f64>,
}

/// `m̂(t,x) = clip(b(t,x)'c)` with `b = u(t) ⊗ v(x)` on raw bases.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFit {
    pub coef: Vec<f64>,
    pub basis_t: Basis,
    pub basis_x: Basis,
    pub ridge: f64,
    pub clip: f64,
}

fn joint_design(bt: &Basis, bx: &Basis, t: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    let u = bt.eval_rows(t)?;
    let v = bx.eval_rows(x)?;
    let (k1, k2) = (bt.k(), bx.k());
    let n = u.nrows();
    Ok(DMatrix::from_fn(n, k1 * k2, |i, j| u[(i, j / k2)] * v[(i, j % k2)]))
}

/// Ridge regression of `y` on the joint basis. Columns whose covariate
/// factor is constant (per-arm or per-treatment-function intercepts) are
/// not penalized.
pub fn fit_conditional_mean(data: &Dataset, spec: &MeanSpec) -> Result<MeanFit> {
    let bt = build_basis(BasisDomain::Treatment(data.space().clone()), spec.basis_t.kind.clone())?;
    let bx = raw_covariate_basis(&spec.basis_x, data.x(), data.d())?;
    let b = joint_design(&bt, &bx, data.t(), data.x())?;
    let (n, k) = (b.nrows(), b.ncols());
    let k2 = bx.k();
    let penalized: Vec<bool> = (0..k).map(|j| !bx.raw_is_constant(j % k2)).collect();
    let ridge = match spec.ridge {
        Some(r) if r >= 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::InvalidArgument(format!("ridge must be a finite nonnegative number, got {r}"))),
        None => 1e-6 * b.iter().map(|v| v * v).sum::<f64>() / k as f64,
    };
    let npen = penalized.iter().filter(|p| **p).count();
    let rows = if ridge > 0.0 { n + npen } else { n };
    let mut a = DMatrix::zeros(rows, k);
    a.rows_mut(0, n).copy_from(&b);
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, n).copy_from(&DVector::from_column_slice(data.y()));
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for (r, j) in (0..k).filter(|&j| penalized[j]).enumerate() {
            a[(n + r, j)] = s;
        }
    }
    if rows < k {
        return Err(Error::SingularDesign);
    }
    let qr = a.qr();
    let r = qr.r();
    let diag_max = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..k).any(|j| r[(j, j)].abs() <= 1e-10 * diag_max) || diag_max == 0.0 {
        return Err(Error::SingularDesign);
    }
    let qty = qr.q().tr_mul(&rhs);
    let coef = r.solve_upper_triangular(&qty).ok_or(Error::SingularDesign)?;
    let clip = 2.0 * data.y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(MeanFit { coef: coef.as_slice().to_vec(), basis_t: bt, basis_x: bx, ridge, clip })
}

impl MeanFit {
    pub fn predict(&self, t: f64, x: &[f64]) -> Result<f64> {
        let u = self.basis_t.eval_t(t)?;
        let v = self.basis_x.eval(x)?;
        let k2 = v.len();
        let mut s = 0.0;
        for (a, ua) in u.iter().enumerate() {
            for (b, vb) in v.iter().enumerate() {
                s += self.coef[a * k2 + b] * ua * vb;
            }
        }
        Ok(s.clamp(-self.clip, self.clip))
    }

    /// Predictions at every row of `data` at its observed treatment.
    pub fn predict_all(&self, data: &Dataset) -> Result<Vec<f64>> {
        let b = joint_design(&self.basis_t, &self.basis_x, data.t(), data.x())?;
        let c = DVector::from_column_slice(&self.coef);
        Ok((b * c).iter().map(|v| v.clamp(-self.clip, self.clip)).collect())
    }

    /// Coefficient index of the covariate-constant column for treatment
    /// function `a`, if present.
    pub fn intercept_index(&self, a: usize) -> Option<usize> {
        let k2 = self.basis_x.k();
        (0..k2).find(|&b| self.basis_x.raw_is_constant(b)).map(|b| a * k2 + b)
    }
}

/// How the DR weights are obtained on each complement.
#[derive(Clone)]
pub enum WeightSource {
    Estimated { basis_t: BasisSpec, basis_x: BasisSpec, opts: WeightOptions },
    /// Use `1 / f(t|x)` with a known propensity.
    Known(CondDensity),
}

impl std::fmt::Debug for WeightSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightSource::Estimated { basis_t, basis_x, opts } => f
                .debug_struct("Estimated")
                .field("basis_t", basis_t)
                .field("basis_x", basis_x)
                .field("opts", opts)
                .finish(),
            WeightSource::Known(_) => f.write_str("Known(..)"),
        }
    }
}

/// Fits stabilized weights with the bases described by `basis_t` and `basis_x`,
/// orthonormalized on `data`.
pub fn fit_weights_from_spec(
    data: &Dataset,
    basis_t: &BasisSpec,
    basis_x: &BasisSpec,
    opts: &WeightOptions,
) -> Result<WeightFit> {
    let bt = treatment_basis(basis_t, data.space())?;
    let bx = covariate_basis(basis_x, data.x(), data.d())?;
    fit_stabilized_weights(data, &bt, &bx, opts)
}

pub struct CrossFitNuisance {
    pub folds: FoldAssignment,
    pub mean_fits: Vec<MeanFit>,
    pub weight_fits: Vec<WeightFit>,
    known: Option<CondDensity>,
}

impl std::fmt::Debug for CrossFitNuisance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrossFitNuisance")
            .field("folds", &self.folds.l)
            .field("known_weights", &self.known.is_some())
            .finish()
    }
}

fn joint_size(spec: &MeanSpec, data: &Dataset) -> Result<usize> {
    let bt = build_basis(BasisDomain::Treatment(data.space().clone()), spec.basis_t.kind.clone())?;
    let bx = build_basis(BasisDomain::Covariate { dim: data.d() }, spec.basis_x.kind.clone())?;
    Ok(bt.k() * bx.k())
}

/// Splits into `l` folds and fits every nuisance on the complement of its
/// fold. Fold fits run in parallel and are collected in fold order.
pub fn crossfit(
    data: &Dataset,
    l: usize,
    seed: u64,
    mean: &MeanSpec,
    weights: &WeightSource,
) -> Result<CrossFitNuisance> {
    let folds = split_folds(data.n(), l, seed)?;
    let mut needed = joint_size(mean, data)?;
    if let WeightSource::Estimated { basis_t, basis_x, .. } = weights {
        let bt = build_basis(BasisDomain::Treatment(data.space().clone()), basis_t.kind.clone())?;
        let bx = build_basis(BasisDomain::Covariate { dim: data.d() }, basis_x.kind.clone())?;
        needed = needed.max(bt.k() * bx.k());
    }
    for f in 0..l {
        let size = data.n() - folds.members(f).len();
        if size < needed {
            return Err(Error::FoldTooSmall { fold: f, size, needed });
        }
    }
    let fits: Vec<Result<(MeanFit, Option<WeightFit>)>> = (0..l)
        .into_par_iter()
        .map(|f| {
            let train = data.subset(&folds.complement(f));
            let m = fit_conditional_mean(&train, mean)?;
            let w = match weights {
                WeightSource::Estimated { basis_t, basis_x, opts } => {
                    Some(fit_weights_from_spec(&train, basis_t, basis_x, opts)?)
                }
                WeightSource::Known(_) => None,
            };
            Ok((m, w))
        })
        .collect();
    let mut mean_fits = Vec::with_capacity(l);
    let mut weight_fits = Vec::new();
    for r in fits {
        let (m, w) = r?;
        mean_fits.push(m);
        weight_fits.extend(w);
    }
    let known = match weights {
        WeightSource::Known(f) => Some(f.clone()),
        _ => None,
    };
    Ok(CrossFitNuisance { folds, mean_fits, weight_fits, known })
}

impl CrossFitNuisance {
    pub fn fold_of(&self, i: usize) -> usize {
        self.folds.fold_of[i]
    }

    /// `m̂^{(-ℓ(i))}(t, x)`.
    pub fn mean_for(&self, i: usize, t: f64, x: &[f64]) -> Result<f64> {
        self.mean_fits[self.fold_of(i)].predict(t, x)
    }

    /// `ω̂^{(-ℓ(i))}(t, x)` kept within the range fitted on the complement,
    /// or `1/f(t|x)` for known propensities.
    pub fn weight_for(&self, i: usize, t: f64, x: &[f64]) -> Result<f64> {
        match &self.known {
            Some(f) => Ok(1.0 / f(t, x)),
            None => self.weight_fits[self.fold_of(i)].evaluate_in_range(t, x),
        }
    }

    pub fn known_weights(&self) -> bool {
        self.known.is_some()
    }

    /// Out-of-fold RMS errors of the weight and mean fits against oracles,
    /// and their product.
    pub fn product_rate(
        &self,
        data: &Dataset,
        true_omega: &dyn Fn(f64, &[f64]) -> f64,
        true_mean: &dyn Fn(f64, &[f64]) -> f64,
    ) -> Result<(f64, f64, f64)> {
        let (mut sw, mut sm) = (0.0, 0.0);
        for i in 0..data.n() {
            let (t, x) = (data.t()[i], data.row(i));
            sw += (self.weight_for(i, t, x)? - true_omega(t, x)).powi(2);
            sm += (self.mean_for(i, t, x)? - true_mean(t, x)).powi(2);
        }
        let n = data.n() as f64;
        let (ew, em) = ((sw / n).sqrt(), (sm / n).sqrt());
        Ok((ew, em, ew * em))
    }
}
