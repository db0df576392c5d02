//! Plug-in curvature and efficiency-bound estimates, the limit law of
//! scaled regret, and the supremum comparison of the two welfare
//! processes for binary treatments.
//!
//! The scaled regret `nR(θ̂)` converges to `½(G+U)'H(G+U)` with
//! `G ~ N(0, V_eff)` and independent `U ~ N(0, Σ_U)`. Its mean is
//! `½ tr(H^{½}(V_eff+Σ_U)H^{½})`, i.e. half the sum of the eigenvalues of
//! that matrix; for Gaussian `U` the variance is half the sum of their
//! squares.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::CrossFitNuisance;
use crate::policy::PolicyFamily;
use crate::quadrature::{QuadratureRule, DEFAULT_NODES};
use crate::rng;

/// A nuisance evaluated for unit `i` at `(t, x)`; cross-fitted fits route
/// `i` to the model trained without it.
pub type UnitFn = Arc<dyn Fn(usize, f64, &[f64]) -> f64 + Send + Sync>;

/// Outcome regression and weight used by the plug-in estimates.
#[derive(Clone)]
pub struct PlugIn {
    pub mean: UnitFn,
    pub weight: UnitFn,
}

impl PlugIn {
    /// Known nuisances shared by every unit.
    pub fn oracle(
        mean: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        weight: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        PlugIn { mean: Arc::new(move |_, t, x| mean(t, x)), weight: Arc::new(move |_, t, x| weight(t, x)) }
    }

    /// Out-of-fold fits; evaluation errors surface as NaN and are
    /// rejected downstream.
    pub fn from_crossfit(cf: Arc<CrossFitNuisance>) -> Self {
        let c2 = cf.clone();
        PlugIn {
            mean: Arc::new(move |i, t, x| cf.mean_for(i, t, x).unwrap_or(f64::NAN)),
            weight: Arc::new(move |i, t, x| c2.weight_for(i, t, x).unwrap_or(f64::NAN)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMethod {
    Analytic,
    FiniteDifference,
}

const CHUNK: usize = 2048;

/// Sums per-chunk partial results in chunk order, so the result does not
/// depend on thread scheduling.
fn chunked_sum<T, F>(n: usize, zero: T, f: F) -> Result<T>
where
    T: Send + Sync + Clone + std::ops::AddAssign,
    F: Fn(usize) -> Result<T> + Sync,
{
    let parts: Vec<Result<T>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = zero.clone();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                acc += f(i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.partial_cmp(a).unwrap());
    e
}

/// Fails with `DegenerateCurvature` unless all eigenvalues exceed
/// `1e-8` times the largest.
pub fn check_curvature(h: &DMatrix<f64>) -> Result<()> {
    let e = sorted_eigs(h);
    let (max, min) = (e[0], e[e.len() - 1]);
    if !(max > 0.0) || !(min > 1e-8 * max) {
        return Err(Error::DegenerateCurvature { min_eig: min, max_eig: max });
    }
    Ok(())
}

/// `Ĥ = −(1/n) Σ_i ∫ m̂(t,X_i) ∂²_θ π_θ(t|X_i) dt` at `θ`, either from the
/// analytic second derivative or by central differences of the smoothed
/// welfare gradient. The result is symmetrized and checked for
/// curvature.
pub fn estimate_h(
    family: &PolicyFamily,
    theta: &[f64],
    data: &Dataset,
    mean: &(dyn Fn(usize, f64, &[f64]) -> f64 + Sync),
    method: CurvatureMethod,
) -> Result<DMatrix<f64>> {
    let h = curvature_raw(family, theta, data, mean, method)?;
    check_curvature(&h)?;
    Ok(h)
}

fn curvature_raw(
    family: &PolicyFamily,
    theta: &[f64],
    data: &Dataset,
    mean: &(dyn Fn(usize, f64, &[f64]) -> f64 + Sync),
    method: CurvatureMethod,
) -> Result<DMatrix<f64>> {
    let dim = family.dim_theta();
    let quad = QuadratureRule::gauss_hermite(DEFAULT_NODES);
    let n = data.n();
    let h = match method {
        CurvatureMethod::Analytic => {
            let sum = chunked_sum(n, DMatrix::zeros(dim, dim), |i| {
                let m = |t: f64, x: &[f64]| mean(i, t, x);
                family.conditional_hessian(theta, &m, data.row(i), &quad)
            })?;
            -sum / n as f64
        }
        CurvatureMethod::FiniteDifference => {
            let grad_at = |th: &[f64]| -> Result<DVector<f64>> {
                let s = chunked_sum(n, DVector::zeros(dim), |i| {
                    let m = |t: f64, x: &[f64]| mean(i, t, x);
                    Ok(DVector::from_vec(family.conditional_value(th, &m, data.row(i), &quad)?.1))
                })?;
                Ok(s / n as f64)
            };
            let mut h = DMatrix::zeros(dim, dim);
            for j in 0..dim {
                let step = 1e-4 * theta[j].abs().max(1.0);
                let mut a = theta.to_vec();
                let mut b = theta.to_vec();
                a[j] += step;
                b[j] -= step;
                let col = (grad_at(&a)? - grad_at(&b)?) / (2.0 * step);
                h.set_column(j, &(-col));
            }
            h
        }
    };
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::QuadratureFailure);
    }
    Ok(symmetrize(&h))
}

/// Per-unit influence values at `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSample {
    /// `φ̇_i = ∂_θ μ̂_θ(X_i) + ω̂(T_i,X_i) ∂_θ π_θ(T_i|X_i)(Y_i − m̂(T_i,X_i))`.
    pub phi_dot: DMatrix<f64>,
    /// `d_i = m̂(T_i,X_i)/f(T_i|X_i) ∂_θ π_θ(T_i|X_i) − ∂_θ μ̂_θ(X_i)`, the
    /// extra noise of inverse weighting with the true propensity.
    pub phi_dot_tp_extra: Option<DMatrix<f64>>,
}

impl InfluenceSample {
    /// Column-centered copy of `phi_dot`.
    pub fn centered(&self) -> DMatrix<f64> {
        let mut c = self.phi_dot.clone();
        let n = c.nrows() as f64;
        for mut col in c.column_iter_mut() {
            let m = col.sum() / n;
            col.add_scalar_mut(-m);
        }
        c
    }
}

/// Evaluates influence values for every unit; `propensity` enables the
/// true-propensity extra term.
pub fn influence_sample(
    family: &PolicyFamily,
    theta: &[f64],
    data: &Dataset,
    plug: &PlugIn,
    propensity: Option<&(dyn Fn(f64, &[f64]) -> f64 + Sync)>,
) -> Result<InfluenceSample> {
    let dim = family.dim_theta();
    let quad = QuadratureRule::gauss_hermite(DEFAULT_NODES);
    let n = data.n();
    let rows: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (t, x, y) = (data.t()[i], data.row(i), data.y()[i]);
            let m = |tt: f64, xx: &[f64]| (plug.mean)(i, tt, xx);
            let (_, dmu) = family.conditional_value(theta, &m, x, &quad)?;
            let dpi = family.grad_density(theta, t, x)?;
            let mt = m(t, x);
            let w = (plug.weight)(i, t, x);
            if !mt.is_finite() || !w.is_finite() {
                return Err(Error::InvalidData(format!("nuisance not finite at observation {i}")));
            }
            let phi: Vec<f64> = (0..dim).map(|j| dmu[j] + w * dpi[j] * (y - mt)).collect();
            let extra = match propensity {
                Some(f) => {
                    let fv = f(t, x);
                    if !(fv > 0.0) {
                        return Err(Error::OverlapViolation { index: i, value: fv, f_min: 0.0 });
                    }
                    Some((0..dim).map(|j| mt / fv * dpi[j] - dmu[j]).collect())
                }
                None => None,
            };
            Ok((phi, extra))
        })
        .collect();
    let mut phi_dot = DMatrix::zeros(n, dim);
    let mut extra = propensity.map(|_| DMatrix::zeros(n, dim));
    for (i, r) in rows.into_iter().enumerate() {
        let (p, e) = r?;
        for j in 0..dim {
            phi_dot[(i, j)] = p[j];
        }
        if let (Some(ex), Some(ev)) = (extra.as_mut(), e) {
            for j in 0..dim {
                ex[(i, j)] = ev[j];
            }
        }
    }
    Ok(InfluenceSample { phi_dot, phi_dot_tp_extra: extra })
}

fn inverse_pd(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_curvature(h)?;
    let ch = h.clone().cholesky().ok_or_else(|| {
        let e = sorted_eigs(h);
        Error::DegenerateCurvature { min_eig: e[e.len() - 1], max_eig: e[0] }
    })?;
    Ok(symmetrize(&ch.inverse()))
}

/// `Ĥ⁻¹ Ĉov(φ̇) Ĥ⁻¹` with the `1/n` covariance.
pub fn estimate_veff(h: &DMatrix<f64>, infl: &InfluenceSample) -> Result<DMatrix<f64>> {
    let hinv = inverse_pd(h)?;
    let c = infl.centered();
    let cov = c.tr_mul(&c) / c.nrows() as f64;
    Ok(symmetrize(&(&hinv * cov * &hinv)))
}

/// `Ĥ⁻¹ ((1/n) Σ d_i d_i') Ĥ⁻¹`.
pub fn estimate_sigma_u_tp(h: &DMatrix<f64>, infl: &InfluenceSample) -> Result<DMatrix<f64>> {
    let d = infl
        .phi_dot_tp_extra
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("influence sample was built without a propensity".into()))?;
    let hinv = inverse_pd(h)?;
    let outer = d.tr_mul(d) / d.nrows() as f64;
    Ok(symmetrize(&(&hinv * outer * &hinv)))
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    symmetrize(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

fn check_psd(name: &str, m: &DMatrix<f64>, p: usize, strict: bool) -> Result<()> {
    if m.nrows() != p || m.ncols() != p {
        return Err(Error::NotPsd(format!("{name} must be {p}x{p}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(format!("{name} has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::NotPsd(format!("{name} is not symmetric")));
    }
    let e = sorted_eigs(m);
    let min = e[p - 1];
    if strict && !(min > 0.0) {
        return Err(Error::NotPsd(format!("{name} must be positive definite, min eigenvalue {min:.3e}")));
    }
    if min < -1e-10 * e[0].abs().max(1.0) {
        return Err(Error::NotPsd(format!("{name} has eigenvalue {min:.3e}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretMoments {
    pub mean: f64,
    /// Closed-form variance when `U` is Gaussian.
    pub variance: Option<f64>,
    /// Descending eigenvalues of `H^{½}(V+Σ)H^{½}`.
    pub eigs: Vec<f64>,
    /// `Var(½G'HG) = ½ tr((HV)²)`.
    pub var_signal: f64,
    /// `Var(G'HU) = tr(HVHΣ)`.
    pub var_cross: f64,
    /// `¼ Var(U'HU)` under Gaussian `U`, i.e. `½ tr((HΣ)²)`; for other
    /// laws this term must come from the sampler.
    pub var_noise_gaussian: f64,
}

/// Closed-form moments of `½(G+U)'H(G+U)`.
pub fn regret_limit_moments(
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    u_gaussian: bool,
) -> Result<RegretMoments> {
    let p = h.nrows();
    if p == 0 {
        return Err(Error::NotPsd("empty matrices".into()));
    }
    check_psd("H", h, p, true)?;
    check_psd("V", v, p, false)?;
    check_psd("Sigma_U", sigma, p, false)?;
    let hs = psd_sqrt(h);
    let a = |m: &DMatrix<f64>| symmetrize(&(&hs * m * &hs));
    let (av, asg) = (a(v), a(sigma));
    let eigs = sorted_eigs(&(&av + &asg));
    let mean = 0.5 * eigs.iter().sum::<f64>();
    let var_signal = 0.5 * (&av * &av).trace();
    let var_cross = (&av * &asg).trace();
    let var_noise_gaussian = 0.5 * (&asg * &asg).trace();
    let variance = u_gaussian.then(|| 0.5 * eigs.iter().map(|e| e * e).sum::<f64>());
    Ok(RegretMoments { mean, variance, eigs, var_signal, var_cross, var_noise_gaussian })
}

const DRAW_CHUNK: usize = 4096;

/// Draws of `½(G+U)'H(G+U)` with `G ~ N(0,V)`, `U ~ N(0,Σ)`. Chunk `c`
/// uses its own stream derived from `(seed, c)`.
pub fn sample_regret_limit(
    h: &DMatrix<f64>,
    v: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = h.nrows();
    check_psd("H", h, p, true)?;
    check_psd("V", v, p, false)?;
    check_psd("Sigma_U", sigma, p, false)?;
    let (lv, ls) = (psd_sqrt(v), psd_sqrt(sigma));
    let hsym = symmetrize(h);
    let chunks: Vec<Vec<f64>> = (0..n_draws.div_ceil(DRAW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = rng::stream(seed, &[0x5A3F, c as u64]);
            let size = DRAW_CHUNK.min(n_draws - c * DRAW_CHUNK);
            let mut out = Vec::with_capacity(size);
            let mut z1 = DVector::zeros(p);
            let mut z2 = DVector::zeros(p);
            for _ in 0..size {
                for j in 0..p {
                    z1[j] = g.sample(StandardNormal);
                    z2[j] = g.sample(StandardNormal);
                }
                let w = &lv * &z1 + &ls * &z2;
                out.push((0.5 * w.dot(&(&hsym * &w))).max(0.0));
            }
            out
        })
        .collect();
    Ok(chunks.concat())
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = level.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const REPORT_LEVELS: [f64; 4] = [0.5, 0.9, 0.95, 0.99];

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "V_eff")]
    pub v_eff: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_U")]
    pub sigma_u: Vec<Vec<f64>>,
    pub eigs: Vec<f64>,
    pub regret_mean: f64,
    /// Gaussian-U variance `½ Σ eigs²`.
    pub regret_var: f64,
    /// `(level, value)` from the sampled limit law.
    pub quantiles: Vec<(f64, f64)>,
}

/// Moments plus sampled quantiles; also returns the draws.
pub fn asymptotic_report(
    h: &DMatrix<f64>,
    v_eff: &DMatrix<f64>,
    sigma_u: &DMatrix<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<(AsymptoticReport, Vec<f64>)> {
    let mom = regret_limit_moments(h, v_eff, sigma_u, true)?;
    let draws = sample_regret_limit(h, v_eff, sigma_u, n_draws, seed)?;
    let mut sorted = draws.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantiles = REPORT_LEVELS.iter().map(|&l| (l, quantile_sorted(&sorted, l))).collect();
    Ok((
        AsymptoticReport {
            h: to_rows(h),
            v_eff: to_rows(v_eff),
            sigma_u: to_rows(sigma_u),
            eigs: mom.eigs,
            regret_mean: mom.mean,
            regret_var: mom.variance.unwrap_or(f64::NAN),
            quantiles,
        },
        draws,
    ))
}

/// A deterministic or randomized binary policy `x ↦ π(1|x)`.
pub type GridPolicy = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `size` threshold rules `1{x_column ≥ c}` with `c` equally spaced on
/// `[lo, hi]`.
pub fn threshold_grid(column: usize, lo: f64, hi: f64, size: usize) -> Vec<GridPolicy> {
    (0..size)
        .map(|k| {
            let c = if size == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (size - 1) as f64 };
            Arc::new(move |x: &[f64]| if x[column] >= c { 1.0 } else { 0.0 }) as GridPolicy
        })
        .collect()
}

/// Oracle nuisances of a binary-treatment design with homoskedastic arm
/// noise.
#[derive(Clone)]
pub struct BinaryOracle {
    pub m0: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub m1: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    /// `P(T = 1 | x)`.
    pub p: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub var0: f64,
    pub var1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMethod {
    /// Exact conditional second moments given `X`, averaged over the sample.
    ConditionalMoments,
    /// Sample covariance of influence values on simulated `(T, Y)`.
    Empirical,
}

#[derive(Debug, Clone, Serialize)]
pub struct GpSupResult {
    pub e_sup_tp: f64,
    pub e_sup_ep: f64,
    pub se_tp: f64,
    pub se_ep: f64,
    /// Standard error of the paired difference `sup|G_ep| − sup|G_tp|`.
    pub se_diff: f64,
    pub sups_tp: Vec<f64>,
    pub sups_ep: Vec<f64>,
    /// Largest `E[(ΔG_ep)²] − E[(ΔG_tp)²]` over grid pairs.
    pub max_increment_gap: f64,
    pub increment_tolerance: f64,
    pub increment_violations: usize,
    #[serde(skip)]
    pub kernel_tp: DMatrix<f64>,
    #[serde(skip)]
    pub kernel_ep: DMatrix<f64>,
}

/// Per-unit pieces of `φ_π = τπ(X) + b − W(π)`.
struct KernelParts {
    s_tt: Vec<f64>,
    s_tb: Vec<f64>,
    s_bb: Vec<f64>,
    e_t: Vec<f64>,
    e_b: Vec<f64>,
}

impl KernelParts {
    fn new(n: usize) -> Self {
        KernelParts {
            s_tt: Vec::with_capacity(n),
            s_tb: Vec::with_capacity(n),
            s_bb: Vec::with_capacity(n),
            e_t: Vec::with_capacity(n),
            e_b: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, tau: (f64, f64, f64), mean: (f64, f64)) {
        self.s_tt.push(tau.0);
        self.s_tb.push(tau.1);
        self.s_bb.push(tau.2);
        self.e_t.push(mean.0);
        self.e_b.push(mean.1);
    }

    /// `K = (1/n)[P'D_ττP + r1' + 1r' + q11'] − WW'`.
    fn kernel(&self, pmat: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, g) = (pmat.nrows(), pmat.ncols());
        let nf = n as f64;
        let a = DMatrix::from_fn(n, g, |i, j| self.s_tt[i].max(0.0).sqrt() * pmat[(i, j)]);
        // explicit transpose so the product goes through the blocked kernel
        let q_mat = a.transpose() * &a / nf;
        let r = pmat.tr_mul(&DVector::from_column_slice(&self.s_tb)) / nf;
        let q = crate::stats::mean(&self.s_bb);
        let w = (pmat.tr_mul(&DVector::from_column_slice(&self.e_t)) / nf).add_scalar(crate::stats::mean(&self.e_b));
        let k = DMatrix::from_fn(g, g, |i, j| q_mat[(i, j)] + r[i] + r[j] + q - w[i] * w[j]);
        symmetrize(&k)
    }
}

fn kernel_factor(k: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let trace = k.trace();
    let e = SymmetricEigen::new(k.clone());
    let min = e.eigenvalues.min();
    if min < -1e-8 * trace.abs().max(f64::MIN_POSITIVE) {
        log::warn!("{label} kernel has eigenvalue {min:.3e}");
        return Err(Error::KernelNotPsd { min_eig: min, trace });
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Ok(e.eigenvectors * d)
}

/// Monte Carlo expected suprema of the centred Gaussian processes indexed
/// by `grid` whose kernels are the influence covariances of the
/// true-propensity and efficient welfare estimators. Both processes are
/// driven by the same normal draws.
#[allow(clippy::too_many_arguments)]
pub fn gp_sup_compare(
    grid: &[GridPolicy],
    xs: &[f64],
    d: usize,
    oracle: &BinaryOracle,
    method: KernelMethod,
    n_draws: usize,
    seed: u64,
) -> Result<GpSupResult> {
    if grid.is_empty() || d == 0 || xs.is_empty() || xs.len() % d != 0 {
        return Err(Error::InvalidArgument("need a nonempty grid and covariate sample".into()));
    }
    if n_draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let n = xs.len() / d;
    let g = grid.len();
    let pmat = DMatrix::from_fn(n, g, |i, a| grid[a](&xs[i * d..(i + 1) * d]));
    let (mut tp, mut ep) = (KernelParts::new(n), KernelParts::new(n));
    let (s0, s1) = (oracle.var0, oracle.var1);
    let mut sim = rng::stream(seed, &[0x6B]);
    for i in 0..n {
        let x = &xs[i * d..(i + 1) * d];
        let (m0, m1, p) = ((oracle.m0)(x), (oracle.m1)(x), (oracle.p)(x));
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::OverlapViolation { index: i, value: p.min(1.0 - p), f_min: 0.0 });
        }
        match method {
            KernelMethod::ConditionalMoments => {
                let (a1, a0) = ((m1 * m1 + s1) / p, (m0 * m0 + s0) / (1.0 - p));
                tp.push((a1 + a0, -a0, a0), (m1 - m0, m0));
                let c = m1 - m0;
                ep.push(
                    (s1 / p + s0 / (1.0 - p) + c * c, -s0 / (1.0 - p) + c * m0, s0 / (1.0 - p) + m0 * m0),
                    (c, m0),
                );
            }
            KernelMethod::Empirical => {
                let treated = sim.random::<f64>() < p;
                let (m, var) = if treated { (m1, s1) } else { (m0, s0) };
                let half = (3.0 * var).sqrt();
                let y = m + if half > 0.0 { sim.random_range(-half..=half) } else { 0.0 };
                let (t1, t0) = if treated { (1.0, 0.0) } else { (0.0, 1.0) };
                let tau_tp = t1 * y / p - t0 * y / (1.0 - p);
                let b_tp = t0 * y / (1.0 - p);
                tp.push((tau_tp * tau_tp, tau_tp * b_tp, b_tp * b_tp), (tau_tp, b_tp));
                let tau_ep = (m1 - m0) + t1 * (y - m1) / p - t0 * (y - m0) / (1.0 - p);
                let b_ep = m0 + t0 * (y - m0) / (1.0 - p);
                ep.push((tau_ep * tau_ep, tau_ep * b_ep, b_ep * b_ep), (tau_ep, b_ep));
            }
        }
    }
    let (k_tp, k_ep) = (tp.kernel(&pmat), ep.kernel(&pmat));
    let (l_tp, l_ep) = (kernel_factor(&k_tp, "tp")?, kernel_factor(&k_ep, "ep")?);

    let scale = (0..g).map(|a| k_tp[(a, a)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let (mut gap, mut violations) = (f64::NEG_INFINITY, 0);
    for a in 0..g {
        for b in a + 1..g {
            let inc_tp = k_tp[(a, a)] + k_tp[(b, b)] - 2.0 * k_tp[(a, b)];
            let inc_ep = k_ep[(a, a)] + k_ep[(b, b)] - 2.0 * k_ep[(a, b)];
            gap = gap.max(inc_ep - inc_tp);
            if inc_ep > inc_tp + tol {
                violations += 1;
            }
        }
    }
    if g == 1 {
        gap = 0.0;
    }

    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n_draws.div_ceil(DRAW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[0x6C, c as u64]);
            let size = DRAW_CHUNK.min(n_draws - c * DRAW_CHUNK);
            let z = DMatrix::from_fn(g, size, |_, _| r.sample::<f64, _>(StandardNormal));
            let sup = |m: DMatrix<f64>| -> Vec<f64> { m.column_iter().map(|col| col.amax()).collect() };
            (sup(&l_tp * &z), sup(&l_ep * &z))
        })
        .collect();
    let (mut sups_tp, mut sups_ep) = (Vec::with_capacity(n_draws), Vec::with_capacity(n_draws));
    for (a, b) in chunks {
        sups_tp.extend(a);
        sups_ep.extend(b);
    }
    let diff: Vec<f64> = sups_ep.iter().zip(&sups_tp).map(|(a, b)| a - b).collect();
    use crate::stats::{mean, se_mean};
    Ok(GpSupResult {
        e_sup_tp: mean(&sups_tp),
        e_sup_ep: mean(&sups_ep),
        se_tp: se_mean(&sups_tp),
        se_ep: se_mean(&sups_ep),
        se_diff: se_mean(&diff),
        sups_tp,
        sups_ep,
        max_increment_gap: gap,
        increment_tolerance: tol,
        increment_violations: violations,
        kernel_tp: k_tp,
        kernel_ep: k_ep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TreatmentSpace;
    use crate::policy::FeatureMap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(p: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(p, p, v)
    }

    fn random_psd(rng: &mut ChaCha8Rng, p: usize, ridge: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(p, p) * ridge
    }

    #[test]
    fn closed_form_moments() {
        let i2 = DMatrix::identity(2, 2);
        let m = regret_limit_moments(&i2, &i2, &DMatrix::zeros(2, 2), true).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-14 && (m.variance.unwrap() - 1.0).abs() < 1e-14);
        let m = regret_limit_moments(&mat(1, &[2.0]), &mat(1, &[3.0]), &mat(1, &[1.0]), true).unwrap();
        assert!((m.eigs[0] - 8.0).abs() < 1e-12);
        assert!((m.mean - 4.0).abs() < 1e-12);
        assert!((m.variance.unwrap() - 32.0).abs() < 1e-10);
        // decomposition: ½(2·3)² + (2·3)(2·1) + ½(2·1)² = 18 + 12 + 2
        assert!((m.var_signal - 18.0).abs() < 1e-10);
        assert!((m.var_cross - 12.0).abs() < 1e-10);
        assert!((m.var_noise_gaussian - 2.0).abs() < 1e-10);
        assert!(m.var_signal + m.var_cross + m.var_noise_gaussian - 32.0 < 1e-9);
        assert!(regret_limit_moments(&mat(1, &[0.0]), &mat(1, &[1.0]), &mat(1, &[0.0]), true).is_err());
        assert!(regret_limit_moments(&mat(1, &[1.0]), &mat(1, &[-1.0]), &mat(1, &[0.0]), true).is_err());
    }

    #[test]
    fn sampler_half_chi_square() {
        let one = DMatrix::identity(1, 1);
        let draws = sample_regret_limit(&one, &one, &DMatrix::zeros(1, 1), 100_000, 7).unwrap();
        let chi = statrs::distribution::ChiSquared::new(1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let ks = crate::stats::ks_distance(&draws, |v| chi.cdf(2.0 * v));
        assert!(ks < 0.01, "{ks}");
        assert_eq!(draws, sample_regret_limit(&one, &one, &DMatrix::zeros(1, 1), 100_000, 7).unwrap());
        let shifted = sample_regret_limit(&one, &one, &mat(1, &[0.5]), 100_000, 7).unwrap();
        assert!(crate::stats::mean(&shifted) > crate::stats::mean(&draws));
        assert!(draws.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn sampler_matches_moments_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_psd(&mut rng, 3, 0.5);
        let v = random_psd(&mut rng, 3, 0.0);
        let s = random_psd(&mut rng, 3, 0.0) * 0.3;
        let m = regret_limit_moments(&h, &v, &s, true).unwrap();
        let draws = sample_regret_limit(&h, &v, &s, 1_000_000, 3).unwrap();
        let (mu, se) = (crate::stats::mean(&draws), crate::stats::se_mean(&draws));
        assert!((mu - m.mean).abs() < 3.0 * se, "{mu} vs {}", m.mean);
    }

    #[test]
    fn sqrt_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in 1..6 {
            let h = random_psd(&mut rng, p, 0.1);
            let r = psd_sqrt(&h);
            assert!((&r * &r - &h).norm() <= 1e-10 * h.norm());
        }
    }

    fn toy() -> (PolicyFamily, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| t[i] * (x[i] - 0.4) * 4.0 + rng.random::<f64>()).collect();
        let fam = PolicyFamily::binary_logistic(FeatureMap::intercept_and_all(1)).unwrap();
        (fam, Dataset::new(y, t, x, 1, TreatmentSpace::binary()).unwrap())
    }

    fn toy_mean(t: f64, x: &[f64]) -> f64 {
        t * (x[0] - 0.4) * 4.0 + 0.5
    }

    #[test]
    fn curvature_matches_fd_hessian_of_oracle_welfare() {
        let (fam, data) = toy();
        let theta = [-1.0, 2.5];
        let mean = |_: usize, t: f64, x: &[f64]| toy_mean(t, x);
        let h = estimate_h(&fam, &theta, &data, &mean, CurvatureMethod::Analytic).unwrap();
        assert_eq!(h, h.transpose());
        // central second differences of the exact sample welfare
        let w = |th: &[f64]| -> f64 {
            (0..data.n())
                .map(|i| {
                    let x = data.row(i);
                    let p1 = fam.arm_probs(th, x)[1];
                    p1 * toy_mean(1.0, x) + (1.0 - p1) * toy_mean(0.0, x)
                })
                .sum::<f64>()
                / data.n() as f64
        };
        let e = 1e-3;
        for j in 0..2 {
            for k in 0..2 {
                let at = |sj: f64, sk: f64| {
                    let mut th = theta.to_vec();
                    th[j] += sj;
                    th[k] += sk;
                    w(&th)
                };
                let fd = (at(e, e) - at(e, -e) - at(-e, e) + at(-e, -e)) / (4.0 * e * e);
                assert!((-fd - h[(j, k)]).abs() < 1e-4, "{j}{k}: {} vs {}", -fd, h[(j, k)]);
            }
        }
        let hf = estimate_h(&fam, &theta, &data, &mean, CurvatureMethod::FiniteDifference).unwrap();
        assert!((&hf - &h).amax() < 1e-6);
        let zero = |_: usize, _: f64, _: &[f64]| 0.0;
        assert!(matches!(
            estimate_h(&fam, &theta, &data, &zero, CurvatureMethod::Analytic),
            Err(Error::DegenerateCurvature { .. })
        ));
    }

    #[test]
    fn covariance_plug_ins() {
        let (fam, data) = toy();
        let theta = [-1.0, 2.5];
        let mean = |_: usize, t: f64, x: &[f64]| toy_mean(t, x);
        let h = estimate_h(&fam, &theta, &data, &mean, CurvatureMethod::Analytic).unwrap();
        let plug = PlugIn::oracle(toy_mean, |_, _| 2.0);
        let f = |_: f64, _: &[f64]| 0.5;
        let infl = influence_sample(&fam, &theta, &data, &plug, Some(&f)).unwrap();
        let c = infl.centered();
        for col in c.column_iter() {
            assert!(col.sum().abs() / c.nrows() as f64 <= 1e-10);
        }
        let v = estimate_veff(&h, &infl).unwrap();
        let s = estimate_sigma_u_tp(&h, &infl).unwrap();
        assert!(sorted_eigs(&v)[1] >= -1e-10 && sorted_eigs(&s)[1] >= -1e-10);

        // zero outcome regression kills the extra term
        let zero = PlugIn::oracle(|_, _| 0.0, |_, _| 2.0);
        let infl0 = influence_sample(&fam, &theta, &data, &zero, Some(&f)).unwrap();
        assert!(estimate_sigma_u_tp(&h, &infl0).unwrap().amax() == 0.0);

        // y ≡ m̂ and a constant regression: every influence value is zero
        let flat = Dataset::new(vec![3.0; 5], vec![0.0, 1.0, 0.0, 1.0, 1.0], vec![0.1, 0.2, 0.3, 0.4, 0.5], 1, TreatmentSpace::binary()).unwrap();
        let cst = PlugIn::oracle(|_, _| 3.0, |_, _| 2.0);
        let infl = influence_sample(&fam, &theta, &flat, &cst, None).unwrap();
        assert!(estimate_veff(&h, &infl).unwrap().amax() == 0.0);
    }

    #[test]
    fn hand_computed_covariance_sandwich() {
        // three scalar influence values 1, 2, 6: mean 3, 1/n covariance 14/3
        let infl = InfluenceSample { phi_dot: DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 6.0]), phi_dot_tp_extra: None };
        let v = estimate_veff(&mat(1, &[2.0]), &infl).unwrap();
        assert!((v[(0, 0)] - 14.0 / 3.0 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn hand_computed_tp_extra_term() {
        // π_θ = f = 1/2 at θ = 0 with an intercept-only policy and m ≡ c:
        // d = c ∂π(T)/f − ∂μ = c (±1/4)/(1/2) − 0 = ±c/2
        let fam = PolicyFamily::binary_logistic(FeatureMap::columns(true, vec![], vec![])).unwrap();
        let data = Dataset::new(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0], 1, TreatmentSpace::binary()).unwrap();
        let plug = PlugIn::oracle(|_, _| 2.0, |_, _| 2.0);
        let f = |_: f64, _: &[f64]| 0.5;
        let infl = influence_sample(&fam, &[0.0], &data, &plug, Some(&f)).unwrap();
        let d = infl.phi_dot_tp_extra.unwrap();
        assert!((d[(0, 0)] - 1.0).abs() < 1e-15 && (d[(1, 0)] + 1.0).abs() < 1e-15);
    }

    fn oracle(effect: f64) -> BinaryOracle {
        BinaryOracle {
            m0: Arc::new(move |x| effect * (1.0 + x[0])),
            m1: Arc::new(move |x| effect * (3.0 * x[0] - 0.5)),
            p: Arc::new(|x| 0.3 + 0.4 * x[0]),
            var0: 1.0,
            var1: 2.0,
        }
    }

    #[test]
    fn gp_comparison_orders_suprema() {
        let xs: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        let grid = threshold_grid(0, 0.0, 1.0, 30);
        let r = gp_sup_compare(&grid, &xs, 1, &oracle(1.0), KernelMethod::ConditionalMoments, 4000, 1).unwrap();
        assert_eq!(r.increment_violations, 0);
        assert!(r.e_sup_ep <= r.e_sup_tp + 2.0 * r.se_diff);
        let z = gp_sup_compare(&grid, &xs, 1, &oracle(0.0), KernelMethod::ConditionalMoments, 4000, 1).unwrap();
        assert!((z.e_sup_ep - z.e_sup_tp).abs() <= 1e-9 * z.e_sup_tp);
        let e = gp_sup_compare(&grid, &xs, 1, &oracle(1.0), KernelMethod::Empirical, 4000, 1).unwrap();
        assert!(e.e_sup_ep < e.e_sup_tp);
    }

    #[test]
    fn single_policy_folded_normal() {
        let xs: Vec<f64> = (0..500).map(|i| (i as f64 + 0.5) / 500.0).collect();
        let grid = threshold_grid(0, 0.5, 0.5, 1);
        let r = gp_sup_compare(&grid, &xs, 1, &oracle(1.0), KernelMethod::ConditionalMoments, 100_000, 2).unwrap();
        let sd = r.kernel_tp[(0, 0)].sqrt();
        let expect = sd * (2.0 / std::f64::consts::PI).sqrt();
        assert!((r.e_sup_tp - expect).abs() < 3.0 * r.se_tp, "{} vs {expect}", r.e_sup_tp);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mean_monotone_in_psd_order(seed in any::<u64>(), p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_psd(&mut rng, p, 0.2);
            let v1 = random_psd(&mut rng, p, 0.0);
            let v2 = &v1 + random_psd(&mut rng, p, 0.0);
            let z = DMatrix::zeros(p, p);
            let a = regret_limit_moments(&h, &v1, &z, true).unwrap();
            let b = regret_limit_moments(&h, &v2, &z, true).unwrap();
            prop_assert!(a.mean <= b.mean + 1e-12);
            let g = regret_limit_moments(&h, &v1, &v1, true).unwrap();
            let total = g.var_signal + g.var_cross + g.var_noise_gaussian;
            prop_assert!((total - g.variance.unwrap()).abs() <= 1e-9 * total.max(1.0));
        }
    }
}
