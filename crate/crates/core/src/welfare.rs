//! Welfare estimators, policy learning and bootstrap standard errors.
//!
//! All three estimators share the form
//!
//! ```text
//! Ŵ(θ) = (1/n) Σ_i [ c_i π_θ(T_i|X_i) + μ̂_θ,i ]
//! ```
//!
//! with `c_i = Y_i / f(T_i|X_i)` for the true-propensity estimator,
//! `c_i = ω̂(T_i,X_i) Y_i` for the estimated-weight estimator, and
//! `c_i = ω̂(T_i,X_i)(Y_i − m̂(T_i,X_i))` plus the plug-in `μ̂_θ(X_i)` for the
//! cross-fitted doubly robust estimator. Per-unit quantities are computed
//! once, so evaluating a new `θ` only touches the policy.

use std::sync::Arc;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{crossfit, fit_weights_from_spec, CondDensity, CrossFitNuisance, MeanSpec, WeightSource};
use crate::optim::{maximize, MaximizeOptions, Objective};
use crate::policy::PolicyFamily;
use crate::quadrature::{QuadratureRule, DEFAULT_NODES};
use crate::rng;
use crate::sieve::BasisSpec;
use crate::weights::{WeightFit, WeightOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Tp,
    Ep,
    Dr,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Tp => "tp",
            EstimatorKind::Ep => "ep",
            EstimatorKind::Dr => "dr",
        })
    }
}

/// Outcome regression for unit `i` at treatment `t`, routed to the fit
/// that did not see unit `i`.
pub type UnitMean = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

pub struct WelfareObjective {
    kind: EstimatorKind,
    family: PolicyFamily,
    n: usize,
    p: usize,
    phi: Vec<f64>,
    arm: Vec<usize>,
    t: Vec<f64>,
    coef: Vec<f64>,
    m_arms: Option<Vec<f64>>,
    m_cont: Option<UnitMean>,
    quad: QuadratureRule,
}

impl std::fmt::Debug for WelfareObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WelfareObjective").field("kind", &self.kind).field("n", &self.n).finish()
    }
}

impl WelfareObjective {
    /// General constructor from per-unit weights (`1/f` or `ω̂`) and an
    /// optional outcome regression, which switches on the augmentation.
    pub fn from_parts(
        kind: EstimatorKind,
        data: &Dataset,
        family: &PolicyFamily,
        weights: Vec<f64>,
        mean: Option<UnitMean>,
    ) -> Result<Self> {
        family.validate()?;
        let n = data.n();
        if weights.len() != n {
            return Err(Error::InvalidArgument("one weight per observation is required".into()));
        }
        if let Some(c) = family.features.max_column() {
            if c >= data.d() {
                return Err(Error::InvalidPolicy(format!(
                    "feature column {c} out of range for {} covariates",
                    data.d()
                )));
            }
        }
        let p = family.p();
        let mut phi = vec![0.0; n * p];
        for i in 0..n {
            family.features.eval_into(data.row(i), &mut phi[i * p..(i + 1) * p]);
        }
        let arm = if family.is_discrete() {
            data.t().iter().map(|&t| family.arm_index(t)).collect::<Result<Vec<_>>>()?
        } else {
            vec![]
        };
        let mut coef = Vec::with_capacity(n);
        for i in 0..n {
            let resid = match &mean {
                Some(m) => data.y()[i] - m(i, data.t()[i]),
                None => data.y()[i],
            };
            coef.push(weights[i] * resid);
        }
        if let Some(i) = coef.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite weighted outcome at observation {i}")));
        }
        let (m_arms, m_cont) = match (&mean, family.levels()) {
            (None, _) => (None, None),
            (Some(m), Some(levels)) => {
                let k = levels.len();
                let mut v = vec![0.0; n * k];
                for i in 0..n {
                    for (a, &l) in levels.iter().enumerate() {
                        v[i * k + a] = m(i, l);
                    }
                }
                (Some(v), None)
            }
            (Some(m), None) => (None, Some(m.clone())),
        };
        Ok(WelfareObjective {
            kind,
            family: family.clone(),
            n,
            p,
            phi,
            arm,
            t: data.t().to_vec(),
            coef,
            m_arms,
            m_cont,
            quad: QuadratureRule::gauss_hermite(DEFAULT_NODES),
        })
    }

    /// Inverse weighting with a known propensity; fails if any observed
    /// propensity is below `f_min`.
    pub fn tp(data: &Dataset, family: &PolicyFamily, f: &dyn Fn(f64, &[f64]) -> f64, f_min: f64) -> Result<Self> {
        let mut w = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let v = f(data.t()[i], data.row(i));
            if !(v >= f_min) {
                return Err(Error::OverlapViolation { index: i, value: v, f_min });
            }
            w.push(1.0 / v);
        }
        Self::from_parts(EstimatorKind::Tp, data, family, w, None)
    }

    /// Inverse weighting with fitted stabilized weights.
    pub fn ep(data: &Dataset, family: &PolicyFamily, fit: &WeightFit) -> Result<Self> {
        let w = fit.evaluate_all(data)?;
        Self::from_parts(EstimatorKind::Ep, data, family, w, None)
    }

    /// Cross-fitted doubly robust objective.
    pub fn dr(data: &Dataset, family: &PolicyFamily, cf: Arc<CrossFitNuisance>) -> Result<Self> {
        let mut w = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            w.push(cf.weight_for(i, data.t()[i], data.row(i))?);
        }
        // validate the regression on every unit before handing out a closure
        for i in 0..data.n() {
            cf.mean_for(i, data.t()[i], data.row(i))?;
        }
        let rows: Arc<Vec<f64>> = Arc::new(data.x().to_vec());
        let d = data.d();
        let cf2 = cf.clone();
        let mean: UnitMean = Arc::new(move |i, t| {
            cf2.mean_for(i, t, &rows[i * d..(i + 1) * d]).unwrap_or(f64::NAN)
        });
        Self::from_parts(EstimatorKind::Dr, data, family, w, Some(mean))
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn family(&self) -> &PolicyFamily {
        &self.family
    }

    /// `(Ŵ(θ), ∇Ŵ(θ))`.
    pub fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let dim = self.family.dim_theta();
        if theta.len() != dim || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("θ must be {dim} finite numbers")));
        }
        let p = self.p;
        let mut val = 0.0;
        let mut grad = vec![0.0; dim];
        let mut g = vec![0.0; dim];
        match self.family.n_arms() {
            Some(k) => {
                let mut probs = vec![0.0; k];
                for i in 0..self.n {
                    let phi = &self.phi[i * p..(i + 1) * p];
                    self.family.arm_probs_phi(theta, phi, &mut probs);
                    let a = self.arm[i];
                    PolicyFamily::arm_grad_phi(&probs, a, phi, &mut g);
                    let c = self.coef[i];
                    val += c * probs[a];
                    for (s, gj) in grad.iter_mut().zip(&g) {
                        *s += c * gj;
                    }
                    if let Some(m) = &self.m_arms {
                        let mu = PolicyFamily::arm_mean_grad_phi(&probs, &m[i * k..(i + 1) * k], phi, &mut g);
                        val += mu;
                        for (s, gj) in grad.iter_mut().zip(&g) {
                            *s += gj;
                        }
                    }
                }
            }
            None => {
                for i in 0..self.n {
                    let phi = &self.phi[i * p..(i + 1) * p];
                    let pi = self.family.grad_density_phi(theta, self.t[i], phi, &mut g)?;
                    let c = self.coef[i];
                    val += c * pi;
                    for (s, gj) in grad.iter_mut().zip(&g) {
                        *s += c * gj;
                    }
                    if let Some(m) = &self.m_cont {
                        let mi = |t: f64, _: &[f64]| m(i, t);
                        let x_dummy: [f64; 0] = [];
                        let (mu, gm) = self.conditional_value_phi(theta, phi, &mi, &x_dummy)?;
                        val += mu;
                        for (s, gj) in grad.iter_mut().zip(&gm) {
                            *s += gj;
                        }
                    }
                }
            }
        }
        let nf = self.n as f64;
        grad.iter_mut().for_each(|v| *v /= nf);
        Ok((val / nf, grad))
    }

    fn conditional_value_phi(
        &self,
        theta: &[f64],
        phi: &[f64],
        m: &dyn Fn(f64, &[f64]) -> f64,
        x: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        // Gaussian link: nodes centred at the policy mean
        let sigma = match self.family.kind {
            crate::policy::PolicyKind::GaussianLink { sigma } => sigma,
            _ => unreachable!("continuous path only"),
        };
        let eta: f64 = theta.iter().zip(phi).map(|(a, b)| a * b).sum();
        let (mut mu, mut gz) = (0.0, 0.0);
        for (&z, &w) in self.quad.nodes.iter().zip(&self.quad.weights) {
            let v = m(eta + sigma * z, x);
            if !v.is_finite() {
                return Err(Error::QuadratureFailure);
            }
            mu += w * v;
            gz += w * v * z;
        }
        Ok((mu, phi.iter().map(|f| gz / sigma * f).collect()))
    }
}

impl Objective for WelfareObjective {
    fn dim(&self) -> usize {
        self.family.dim_theta()
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        WelfareObjective::value_grad(self, theta)
    }
}

pub fn welfare_value_grad(obj: &WelfareObjective, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    obj.value_grad(theta)
}

/// How nuisances are obtained for each estimator.
#[derive(Clone)]
pub enum EstimatorSpec {
    Tp { propensity: CondDensity, f_min: f64 },
    Ep { basis_t: BasisSpec, basis_x: BasisSpec, opts: WeightOptions },
    Dr { folds: usize, fold_seed: u64, mean: MeanSpec, weights: WeightSource },
}

impl std::fmt::Debug for EstimatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EstimatorSpec::{}", self.kind())
    }
}

impl EstimatorSpec {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EstimatorSpec::Tp { .. } => EstimatorKind::Tp,
            EstimatorSpec::Ep { .. } => EstimatorKind::Ep,
            EstimatorSpec::Dr { .. } => EstimatorKind::Dr,
        }
    }

    /// Fits nuisances on `data` and returns the objective.
    pub fn objective(&self, data: &Dataset, family: &PolicyFamily) -> Result<WelfareObjective> {
        match self {
            EstimatorSpec::Tp { propensity, f_min } => WelfareObjective::tp(data, family, propensity.as_ref(), *f_min),
            EstimatorSpec::Ep { basis_t, basis_x, opts } => {
                let fit = fit_weights_from_spec(data, basis_t, basis_x, opts)?;
                WelfareObjective::ep(data, family, &fit)
            }
            EstimatorSpec::Dr { folds, fold_seed, mean, weights } => {
                let cf = crossfit(data, *folds, *fold_seed, mean, weights)?;
                WelfareObjective::dr(data, family, Arc::new(cf))
            }
        }
    }
}

fn default_folds() -> usize {
    2
}

/// Serializable description of an estimator and its nuisance bases.
/// Unset bases fall back to the defaults in [`BasisSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub label: Option<String>,
    /// Overlap floor for the true-propensity estimator.
    #[serde(default)]
    pub f_min: Option<f64>,
    /// Treatment basis of the stabilized weights.
    #[serde(default)]
    pub basis_t: Option<BasisSpec>,
    /// Covariate basis of the stabilized weights.
    #[serde(default)]
    pub basis_x: Option<BasisSpec>,
    #[serde(default)]
    pub mean: Option<MeanSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Doubly robust estimator with `1/f` in place of fitted weights.
    #[serde(default)]
    pub known_weights: bool,
    #[serde(default)]
    pub weight_options: WeightOptions,
}

pub const DEFAULT_F_MIN: f64 = 1e-6;

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            label: None,
            f_min: None,
            basis_t: None,
            basis_x: None,
            mean: None,
            folds: default_folds(),
            known_weights: false,
            weight_options: WeightOptions::default(),
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.to_string())
    }

    /// Resolves defaults against `data`. `propensity` is required for the
    /// true-propensity estimator and for known DR weights.
    pub fn build(&self, data: &Dataset, propensity: Option<CondDensity>, fold_seed: u64) -> Result<EstimatorSpec> {
        let need_f = || {
            propensity.clone().ok_or_else(|| {
                Error::Config(format!("estimator `{}` needs a known propensity", self.label()))
            })
        };
        let bt = || self.basis_t.clone().unwrap_or_else(|| BasisSpec::default_treatment(data.space()));
        let bx = || self.basis_x.clone().unwrap_or_else(|| BasisSpec::default_covariate(data.d(), data.n()));
        Ok(match self.kind {
            EstimatorKind::Tp => EstimatorSpec::Tp { propensity: need_f()?, f_min: self.f_min.unwrap_or(DEFAULT_F_MIN) },
            EstimatorKind::Ep => EstimatorSpec::Ep { basis_t: bt(), basis_x: bx(), opts: self.weight_options },
            EstimatorKind::Dr => {
                let mean = self.mean.clone().unwrap_or_else(|| MeanSpec {
                    basis_t: BasisSpec::default_treatment(data.space()),
                    basis_x: BasisSpec::default_covariate(data.d(), data.n()),
                    ridge: None,
                });
                let weights = if self.known_weights {
                    WeightSource::Known(need_f()?)
                } else {
                    WeightSource::Estimated { basis_t: bt(), basis_x: bx(), opts: self.weight_options }
                };
                EstimatorSpec::Dr { folds: self.folds, fold_seed, mean, weights }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEstimate {
    pub theta_hat: Vec<f64>,
    pub welfare_hat: f64,
    pub kind: EstimatorKind,
    pub gradient_norm_at_opt: f64,
    pub restarts_used: usize,
    pub converged: bool,
    pub at_boundary: bool,
}

/// Maximizes a prepared objective.
pub fn maximize_welfare(obj: &WelfareObjective, opts: &MaximizeOptions) -> Result<PolicyEstimate> {
    let r = maximize(obj, opts, obj.n())?;
    if !r.converged {
        warn!("{} optimizer stopped with gradient norm {:.3e}", obj.kind(), r.grad_norm);
    }
    Ok(PolicyEstimate {
        theta_hat: r.theta,
        welfare_hat: r.value,
        kind: obj.kind(),
        gradient_norm_at_opt: r.grad_norm,
        restarts_used: r.restarts_used,
        converged: r.converged,
        at_boundary: r.at_boundary,
    })
}

/// Fits nuisances and the policy in one call.
pub fn fit_policy(
    data: &Dataset,
    family: &PolicyFamily,
    spec: &EstimatorSpec,
    opts: &MaximizeOptions,
) -> Result<PolicyEstimate> {
    let obj = spec.objective(data, family)?;
    maximize_welfare(&obj, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: Vec<f64>,
    pub welfare_se: f64,
    /// One row per successful draw, in draw order.
    pub theta_draws: Vec<Vec<f64>>,
    pub welfare_draws: Vec<f64>,
    pub failures: usize,
}

/// Nonparametric bootstrap: resample rows, refit nuisances and `θ̂`.
/// Draw `b` uses its own stream derived from `(seed, b)`.
pub fn bootstrap_se(
    data: &Dataset,
    family: &PolicyFamily,
    spec: &EstimatorSpec,
    opts: &MaximizeOptions,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if b == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one replication".into()));
    }
    let n = data.n();
    let draws: Vec<Option<PolicyEstimate>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut g = rng::stream(seed, &[0xB007, r as u64]);
            let idx: Vec<usize> = (0..n).map(|_| g.random_range(0..n)).collect();
            let sample = data.subset(&idx);
            match fit_policy(&sample, family, spec, opts) {
                Ok(e) => Some(e),
                Err(e) => {
                    warn!("bootstrap draw {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = draws.iter().filter(|d| d.is_none()).count();
    if failures * 10 > b {
        return Err(Error::BootstrapFailure { failed: failures, total: b });
    }
    let ok: Vec<PolicyEstimate> = draws.into_iter().flatten().collect();
    let dim = family.dim_theta();
    let sd = |v: &[f64]| if v.len() > 1 { crate::stats::sd(v) } else { 0.0 };
    let se = (0..dim)
        .map(|j| sd(&ok.iter().map(|e| e.theta_hat[j]).collect::<Vec<_>>()))
        .collect();
    let welfare_draws: Vec<f64> = ok.iter().map(|e| e.welfare_hat).collect();
    Ok(BootstrapResult {
        se,
        welfare_se: sd(&welfare_draws),
        theta_draws: ok.iter().map(|e| e.theta_hat.clone()).collect(),
        welfare_draws,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TreatmentSpace;
    use crate::policy::FeatureMap;
    use crate::sieve::BasisKind;
    use crate::weights::fit_stabilized_weights;
    use crate::sieve::{covariate_basis, treatment_basis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn binary_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut y, mut t, mut x) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let a: f64 = rng.random();
            let ti = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            y.push(1.0 + a + ti * (a - 0.5) * 3.0 + rng.random::<f64>() - 0.5);
            t.push(ti);
            x.push(a);
        }
        Dataset::new(y, t, x, 1, TreatmentSpace::binary()).unwrap()
    }

    fn logistic() -> PolicyFamily {
        PolicyFamily::binary_logistic(FeatureMap::intercept_and_all(1)).unwrap()
    }

    #[test]
    fn hand_computed_tp_value() {
        let data = Dataset::new(vec![1.0, 3.0], vec![0.0, 1.0], vec![0.0, 0.0], 1, TreatmentSpace::binary()).unwrap();
        // π(1|x) = 1 via a custom feature map saturating the logistic link
        let fam = PolicyFamily::binary_logistic(FeatureMap::custom(1, |_| vec![1.0])).unwrap();
        let obj = WelfareObjective::tp(&data, &fam, &|_, _| 0.5, 1e-6).unwrap();
        let (v, _) = obj.value_grad(&[800.0]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tp_with_policy_equal_to_propensity_gives_mean_outcome() {
        let data = binary_data(300, 1);
        let fam = logistic();
        // propensity 0.4 = expit(ln(0.4/0.6))
        let theta = [(0.4f64 / 0.6).ln(), 0.0];
        let f = |t: f64, _: &[f64]| if t == 1.0 { 0.4 } else { 0.6 };
        let obj = WelfareObjective::tp(&data, &fam, &f, 1e-6).unwrap();
        let (v, _) = obj.value_grad(&theta).unwrap();
        assert!((v - crate::stats::mean(data.y())).abs() < 1e-12);
        let bad = |_: f64, _: &[f64]| 1e-9;
        assert!(matches!(WelfareObjective::tp(&data, &fam, &bad, 1e-6), Err(Error::OverlapViolation { .. })));
    }

    #[test]
    fn dr_with_exact_regression_is_flat() {
        let data = Dataset::new(vec![2.0], vec![1.0], vec![0.3], 1, TreatmentSpace::binary()).unwrap();
        let mean: UnitMean = Arc::new(|_, _| 2.0);
        let obj = WelfareObjective::from_parts(EstimatorKind::Dr, &data, &logistic(), vec![1.7], Some(mean)).unwrap();
        for th in [[0.0, 0.0], [1.0, -3.0]] {
            let (v, g) = obj.value_grad(&th).unwrap();
            assert!((v - 2.0).abs() < 1e-15);
            assert!(g.iter().all(|x| x.abs() < 1e-15));
        }
    }

    #[test]
    fn ep_matches_tp_under_saturated_weights() {
        // empirical treated share equals the constant propensity 0.25
        let t: Vec<f64> = (0..40).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).fract()).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let data = Dataset::new(y, t, x, 1, TreatmentSpace::binary()).unwrap();
        let bt = treatment_basis(&BasisSpec::new(BasisKind::Indicator), data.space()).unwrap();
        let bx = covariate_basis(&BasisSpec::new(BasisKind::TotalDegree { degree: 0, max_terms: None }), data.x(), 1)
            .unwrap();
        let fit = fit_stabilized_weights(&data, &bt, &bx, &WeightOptions::default()).unwrap();
        let ep = WelfareObjective::ep(&data, &logistic(), &fit).unwrap();
        let tp = WelfareObjective::tp(&data, &logistic(), &|t, _| if t == 1.0 { 0.25 } else { 0.75 }, 1e-6).unwrap();
        for th in [[0.0, 0.0], [0.5, -2.0], [-1.0, 3.0]] {
            assert!((ep.value_grad(&th).unwrap().0 - tp.value_grad(&th).unwrap().0).abs() < 1e-8);
        }
    }

    #[test]
    fn learns_policy_and_is_deterministic() {
        let data = binary_data(500, 2);
        let fam = logistic();
        let spec = EstimatorSpec::Dr {
            folds: 2,
            fold_seed: 5,
            mean: MeanSpec {
                basis_t: BasisSpec::new(BasisKind::Indicator),
                basis_x: BasisSpec::new(BasisKind::TensorPolynomial { degrees: vec![1] }),
                ridge: None,
            },
            weights: WeightSource::Estimated {
                basis_t: BasisSpec::new(BasisKind::Indicator),
                basis_x: BasisSpec::new(BasisKind::TensorPolynomial { degrees: vec![1] }),
                opts: WeightOptions::default(),
            },
        };
        let opts = MaximizeOptions { seed: 1, ..Default::default() };
        let a = fit_policy(&data, &fam, &spec, &opts).unwrap();
        let b = fit_policy(&data, &fam, &spec, &opts).unwrap();
        assert_eq!(a, b);
        // effect 3(x - 1/2): treat when x > 1/2, slope positive
        assert!(a.theta_hat[1] > 0.0);
    }

    #[test]
    fn bootstrap_contracts() {
        let data = binary_data(120, 3);
        let fam = logistic();
        let f: CondDensity = Arc::new(|t, _| if t == 1.0 { 0.4 } else { 0.6 });
        let spec = EstimatorSpec::Tp { propensity: f, f_min: 1e-6 };
        let opts = MaximizeOptions { restarts: 2, bound: 5.0, ..Default::default() };
        assert!(bootstrap_se(&data, &fam, &spec, &opts, 0, 1).is_err());
        let a = bootstrap_se(&data, &fam, &spec, &opts, 6, 9).unwrap();
        let b = bootstrap_se(&data, &fam, &spec, &opts, 6, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta_draws.len(), 6);

        // constant outcomes with an exact regression: Ŵ ≡ c for every θ
        let flat = Dataset::new(vec![4.0; 60], data.t()[..60].to_vec(), data.x()[..60].to_vec(), 1, TreatmentSpace::binary())
            .unwrap();
        let spec = EstimatorSpec::Dr {
            folds: 2,
            fold_seed: 1,
            mean: MeanSpec {
                basis_t: BasisSpec::new(BasisKind::Indicator),
                basis_x: BasisSpec::new(BasisKind::TotalDegree { degree: 0, max_terms: None }),
                ridge: None,
            },
            weights: WeightSource::Known(Arc::new(|t, _| if t == 1.0 { 0.4 } else { 0.6 })),
        };
        let r = bootstrap_se(&flat, &fam, &spec, &opts, 5, 2).unwrap();
        assert!(r.welfare_se < 1e-9 && r.se.iter().all(|s| *s < 1e-9));
    }

    fn fd_ok(obj: &WelfareObjective, theta: &[f64]) -> bool {
        let (_, g) = obj.value_grad(theta).unwrap();
        let h = 1e-5;
        (0..theta.len()).all(|j| {
            let mut a = theta.to_vec();
            let mut b = theta.to_vec();
            a[j] += h;
            b[j] -= h;
            let fd = (obj.value_grad(&a).unwrap().0 - obj.value_grad(&b).unwrap().0) / (2.0 * h);
            (fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradients_match_finite_differences(seed in any::<u64>(), th in prop::collection::vec(-2.0f64..2.0, 2)) {
            let data = binary_data(150, seed);
            let fam = logistic();
            let tp = WelfareObjective::tp(&data, &fam, &|t, _| if t == 1.0 { 0.4 } else { 0.6 }, 1e-6).unwrap();
            prop_assert!(fd_ok(&tp, &th));
            let mean: UnitMean = Arc::new(|i, t| 1.0 + t * (i as f64 * 0.01).sin());
            let dr = WelfareObjective::from_parts(EstimatorKind::Dr, &data, &fam, vec![1.3; 150], Some(mean.clone())).unwrap();
            prop_assert!(fd_ok(&dr, &th));
            // continuous policy with quadrature-based plug-in
            let cont = Dataset::new(data.y().to_vec(), data.x().iter().map(|a| a * 2.0 - 1.0).collect(), data.x().to_vec(), 1, TreatmentSpace::Line).unwrap();
            let gl = PolicyFamily::gaussian_link(FeatureMap::intercept_and_all(1), 0.5).unwrap();
            let mq: UnitMean = Arc::new(|i, t| 1.0 + t - 0.3 * t * t + (i % 3) as f64);
            let dr = WelfareObjective::from_parts(EstimatorKind::Dr, &cont, &gl, vec![0.8; 150], Some(mq)).unwrap();
            prop_assert!(fd_ok(&dr, &th));
        }
    }
}
