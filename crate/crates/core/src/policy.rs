//! Parametric randomized policies `π_θ(t|x)`.
//!
//! Discrete families (binary logistic, softmax) share one code path: arm 0
//! is the reference with score zero and arm `j ≥ 1` has score `θ_j'φ(x)`,
//! with `θ = (θ_1, …, θ_{K-1})` stacked. The Gaussian link family draws
//! `t ~ N(θ'φ(x), σ²)` on the real line.
//!
//! Point-mass policies are refused: their welfare is not pathwise
//! differentiable, so none of the efficiency results apply to them.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TreatmentSpace;
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

pub const SIGMA_MIN: f64 = 0.05;

/// A user-supplied feature map.
#[derive(Clone)]
pub struct CustomFeatures {
    pub dim: usize,
    pub f: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl std::fmt::Debug for CustomFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CustomFeatures(dim = {})", self.dim)
    }
}

impl PartialEq for CustomFeatures {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && Arc::ptr_eq(&self.f, &other.f)
    }
}

/// `φ(x) = (1?, x_{c_1} - o_1, …)`: an optional intercept followed by
/// selected covariate columns, each shifted by an offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub columns: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offsets: Vec<f64>,
    #[serde(skip)]
    pub custom: Option<CustomFeatures>,
}

fn default_true() -> bool {
    true
}

impl FeatureMap {
    /// `[1, x_1, …, x_d]`.
    pub fn intercept_and_all(d: usize) -> Self {
        FeatureMap { intercept: true, columns: (0..d).collect(), offsets: vec![], custom: None }
    }

    pub fn columns(intercept: bool, columns: Vec<usize>, offsets: Vec<f64>) -> Self {
        FeatureMap { intercept, columns, offsets, custom: None }
    }

    pub fn custom(dim: usize, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        FeatureMap {
            intercept: false,
            columns: vec![],
            offsets: vec![],
            custom: Some(CustomFeatures { dim, f: Arc::new(f) }),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.custom {
            Some(c) => c.dim,
            None => self.intercept as usize + self.columns.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidPolicy("feature map is empty".into()));
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.columns.len() {
            return Err(Error::InvalidPolicy("one offset per feature column is required".into()));
        }
        Ok(())
    }

    /// Largest covariate index used, for checking against the data.
    pub fn max_column(&self) -> Option<usize> {
        self.columns.iter().copied().max()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        if let Some(c) = &self.custom {
            out.copy_from_slice(&(c.f)(x));
            return;
        }
        let mut k = 0;
        if self.intercept {
            out[0] = 1.0;
            k = 1;
        }
        for (j, &c) in self.columns.iter().enumerate() {
            out[k + j] = x[c] - self.offsets.get(j).copied().unwrap_or(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Probability of `levels[1]` is `expit(θ'φ(x))`.
    BinaryLogistic { levels: [f64; 2] },
    Softmax { levels: Vec<f64> },
    GaussianLink { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFamily {
    pub kind: PolicyKind,
    pub features: FeatureMap,
}

impl PolicyFamily {
    pub fn new(kind: PolicyKind, features: FeatureMap) -> Result<Self> {
        let f = PolicyFamily { kind, features };
        f.validate()?;
        Ok(f)
    }

    pub fn binary_logistic(features: FeatureMap) -> Result<Self> {
        Self::new(PolicyKind::BinaryLogistic { levels: [0.0, 1.0] }, features)
    }

    pub fn softmax(levels: Vec<f64>, features: FeatureMap) -> Result<Self> {
        Self::new(PolicyKind::Softmax { levels }, features)
    }

    pub fn gaussian_link(features: FeatureMap, sigma: f64) -> Result<Self> {
        Self::new(PolicyKind::GaussianLink { sigma }, features)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        match &self.kind {
            PolicyKind::BinaryLogistic { levels } => {
                TreatmentSpace::Discrete { levels: levels.to_vec() }
                    .validate()
                    .map_err(|e| Error::InvalidPolicy(e.to_string()))
            }
            PolicyKind::Softmax { levels } => TreatmentSpace::Discrete { levels: levels.clone() }
                .validate()
                .map_err(|e| Error::InvalidPolicy(e.to_string())),
            PolicyKind::GaussianLink { sigma } => {
                if *sigma == 0.0 {
                    Err(Error::DeterministicPolicy)
                } else if !(sigma.is_finite() && *sigma >= SIGMA_MIN) {
                    Err(Error::InvalidPolicy(format!("sigma must be at least {SIGMA_MIN}, got {sigma}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn p(&self) -> usize {
        self.features.dim()
    }

    pub fn dim_theta(&self) -> usize {
        match &self.kind {
            PolicyKind::Softmax { levels } => (levels.len() - 1) * self.p(),
            _ => self.p(),
        }
    }

    pub fn levels(&self) -> Option<&[f64]> {
        match &self.kind {
            PolicyKind::BinaryLogistic { levels } => Some(levels),
            PolicyKind::Softmax { levels } => Some(levels),
            PolicyKind::GaussianLink { .. } => None,
        }
    }

    pub fn n_arms(&self) -> Option<usize> {
        self.levels().map(|l| l.len())
    }

    pub fn space(&self) -> TreatmentSpace {
        match self.levels() {
            Some(l) => TreatmentSpace::Discrete { levels: l.to_vec() },
            None => TreatmentSpace::Line,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.levels().is_some()
    }

    pub fn arm_index(&self, t: f64) -> Result<usize> {
        let levels = self.levels().ok_or(Error::TreatmentOutOfSpace(t))?;
        levels
            .iter()
            .position(|&l| (l - t).abs() <= 1e-9 * l.abs().max(1.0))
            .ok_or(Error::TreatmentOutOfSpace(t))
    }

    fn sigma(&self) -> f64 {
        match self.kind {
            PolicyKind::GaussianLink { sigma } => sigma,
            _ => f64::NAN,
        }
    }

    fn check_theta(&self, theta: &[f64]) {
        assert_eq!(theta.len(), self.dim_theta(), "parameter length does not match the family");
    }

    // ---- discrete arms ----

    /// Arm probabilities at features `phi`.
    pub fn arm_probs_phi(&self, theta: &[f64], phi: &[f64], out: &mut [f64]) {
        let p = phi.len();
        out[0] = 0.0;
        for j in 1..out.len() {
            out[j] = dot(&theta[(j - 1) * p..j * p], phi);
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in out.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in out.iter_mut() {
            *s /= total;
        }
    }

    pub fn arm_probs(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.check_theta(theta);
        let k = self.n_arms().expect("arm probabilities need a discrete family");
        let mut out = vec![0.0; k];
        self.arm_probs_phi(theta, &self.features.eval(x), &mut out);
        out
    }

    /// `∂π_k/∂θ` given arm probabilities `probs`.
    pub fn arm_grad_phi(probs: &[f64], k: usize, phi: &[f64], out: &mut [f64]) {
        let p = phi.len();
        for j in 1..probs.len() {
            let c = probs[k] * ((k == j) as u8 as f64 - probs[j]);
            for r in 0..p {
                out[(j - 1) * p + r] = c * phi[r];
            }
        }
    }

    /// `μ = Σ_k m_k π_k` and its gradient `π_j (m_j - μ) φ` per block.
    pub fn arm_mean_grad_phi(probs: &[f64], m: &[f64], phi: &[f64], grad: &mut [f64]) -> f64 {
        let p = phi.len();
        let mu: f64 = probs.iter().zip(m).map(|(a, b)| a * b).sum();
        for j in 1..probs.len() {
            let c = probs[j] * (m[j] - mu);
            for r in 0..p {
                grad[(j - 1) * p + r] = c * phi[r];
            }
        }
        mu
    }

    fn arm_hess_phi(probs: &[f64], k: usize, phi: &[f64]) -> DMatrix<f64> {
        let p = phi.len();
        let km = probs.len();
        let d = |a: usize, b: usize| (a == b) as u8 as f64;
        let mut h = DMatrix::zeros((km - 1) * p, (km - 1) * p);
        for j in 1..km {
            for l in 1..km {
                let c = probs[k] * (d(k, l) - probs[l]) * (d(k, j) - probs[j])
                    - probs[k] * probs[j] * (d(j, l) - probs[l]);
                fill_block(&mut h, j - 1, l - 1, c, phi);
            }
        }
        h
    }

    /// `Σ_k m_k ∂²π_k`.
    pub fn arm_mean_hess_phi(probs: &[f64], m: &[f64], phi: &[f64]) -> DMatrix<f64> {
        let p = phi.len();
        let km = probs.len();
        let mu: f64 = probs.iter().zip(m).map(|(a, b)| a * b).sum();
        let mut h = DMatrix::zeros((km - 1) * p, (km - 1) * p);
        for j in 1..km {
            for l in 1..km {
                let c = probs[j] * ((j == l) as u8 as f64 - probs[l]) * (m[j] - mu)
                    - probs[j] * probs[l] * (m[l] - mu);
                fill_block(&mut h, j - 1, l - 1, c, phi);
            }
        }
        h
    }

    // ---- pointwise interface ----

    pub fn density(&self, theta: &[f64], t: f64, x: &[f64]) -> Result<f64> {
        self.density_phi(theta, t, &self.features.eval(x))
    }

    pub fn density_phi(&self, theta: &[f64], t: f64, phi: &[f64]) -> Result<f64> {
        self.check_theta(theta);
        match self.n_arms() {
            Some(km) => {
                let k = self.arm_index(t)?;
                let mut probs = vec![0.0; km];
                self.arm_probs_phi(theta, phi, &mut probs);
                Ok(probs[k])
            }
            None => {
                if !t.is_finite() {
                    return Err(Error::TreatmentOutOfSpace(t));
                }
                let s = self.sigma();
                let z = (t - dot(theta, phi)) / s;
                Ok(normal_pdf(z) / s)
            }
        }
    }

    pub fn grad_density(&self, theta: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.dim_theta()];
        self.grad_density_phi(theta, t, &self.features.eval(x), &mut g)?;
        Ok(g)
    }

    /// Writes `∂_θ π_θ(t|x)` into `out` and returns `π_θ(t|x)`.
    pub fn grad_density_phi(&self, theta: &[f64], t: f64, phi: &[f64], out: &mut [f64]) -> Result<f64> {
        self.check_theta(theta);
        match self.n_arms() {
            Some(km) => {
                let k = self.arm_index(t)?;
                let mut probs = vec![0.0; km];
                self.arm_probs_phi(theta, phi, &mut probs);
                Self::arm_grad_phi(&probs, k, phi, out);
                Ok(probs[k])
            }
            None => {
                if !t.is_finite() {
                    return Err(Error::TreatmentOutOfSpace(t));
                }
                let s = self.sigma();
                let r = t - dot(theta, phi);
                let pi = normal_pdf(r / s) / s;
                let c = pi * r / (s * s);
                for (o, f) in out.iter_mut().zip(phi) {
                    *o = c * f;
                }
                Ok(pi)
            }
        }
    }

    pub fn hess_density(&self, theta: &[f64], t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta);
        let phi = self.features.eval(x);
        match self.n_arms() {
            Some(km) => {
                let k = self.arm_index(t)?;
                let mut probs = vec![0.0; km];
                self.arm_probs_phi(theta, &phi, &mut probs);
                Ok(Self::arm_hess_phi(&probs, k, &phi))
            }
            None => {
                if !t.is_finite() {
                    return Err(Error::TreatmentOutOfSpace(t));
                }
                let s = self.sigma();
                let r = t - dot(theta, &phi);
                let pi = normal_pdf(r / s) / s;
                let c = pi * ((r / (s * s)).powi(2) - 1.0 / (s * s));
                let mut h = DMatrix::zeros(phi.len(), phi.len());
                fill_block(&mut h, 0, 0, c, &phi);
                Ok(h)
            }
        }
    }

    /// `μ_θ(x) = ∫ m(t,x) π_θ(dt|x)` and `∂_θ μ_θ(x) = ∫ m ∂_θπ_θ dt`.
    /// Discrete families sum exactly; the Gaussian link uses `quad` as a
    /// standard-normal rule centred at the policy mean.
    pub fn conditional_value(
        &self,
        theta: &[f64],
        m: &dyn Fn(f64, &[f64]) -> f64,
        x: &[f64],
        quad: &QuadratureRule,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta);
        let phi = self.features.eval(x);
        let mut grad = vec![0.0; self.dim_theta()];
        let mu = match self.levels() {
            Some(levels) => {
                let mv = levels.iter().map(|&t| m(t, x)).collect::<Vec<_>>();
                if mv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::QuadratureFailure);
                }
                let mut probs = vec![0.0; levels.len()];
                self.arm_probs_phi(theta, &phi, &mut probs);
                Self::arm_mean_grad_phi(&probs, &mv, &phi, &mut grad)
            }
            None => {
                let s = self.sigma();
                let eta = dot(theta, &phi);
                let (mut mu, mut gz) = (0.0, 0.0);
                for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
                    let v = m(eta + s * z, x);
                    if !v.is_finite() {
                        return Err(Error::QuadratureFailure);
                    }
                    mu += w * v;
                    gz += w * v * z;
                }
                for (g, f) in grad.iter_mut().zip(&phi) {
                    *g = gz / s * f;
                }
                mu
            }
        };
        Ok((mu, grad))
    }

    /// `∫ m(t,x) ∂²_θ π_θ(t|x) dt`.
    pub fn conditional_hessian(
        &self,
        theta: &[f64],
        m: &dyn Fn(f64, &[f64]) -> f64,
        x: &[f64],
        quad: &QuadratureRule,
    ) -> Result<DMatrix<f64>> {
        self.check_theta(theta);
        let phi = self.features.eval(x);
        match self.levels() {
            Some(levels) => {
                let mv = levels.iter().map(|&t| m(t, x)).collect::<Vec<_>>();
                if mv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::QuadratureFailure);
                }
                let mut probs = vec![0.0; levels.len()];
                self.arm_probs_phi(theta, &phi, &mut probs);
                Ok(Self::arm_mean_hess_phi(&probs, &mv, &phi))
            }
            None => {
                let s = self.sigma();
                let eta = dot(theta, &phi);
                let mut c = 0.0;
                for (&z, &w) in quad.nodes.iter().zip(&quad.weights) {
                    let v = m(eta + s * z, x);
                    if !v.is_finite() {
                        return Err(Error::QuadratureFailure);
                    }
                    c += w * v * (z * z - 1.0);
                }
                let mut h = DMatrix::zeros(phi.len(), phi.len());
                fill_block(&mut h, 0, 0, c / (s * s), &phi);
                Ok(h)
            }
        }
    }

    /// Draws `t ~ π_θ(·|x)`.
    pub fn sample_action<R: Rng + ?Sized>(&self, theta: &[f64], x: &[f64], rng: &mut R) -> f64 {
        self.check_theta(theta);
        let phi = self.features.eval(x);
        match self.levels() {
            Some(levels) => {
                let mut probs = vec![0.0; levels.len()];
                self.arm_probs_phi(theta, &phi, &mut probs);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return levels[k];
                    }
                }
                levels[levels.len() - 1]
            }
            None => {
                let z: f64 = rng.sample(StandardNormal);
                dot(theta, &phi) + self.sigma() * z
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn fill_block(h: &mut DMatrix<f64>, bj: usize, bl: usize, c: f64, phi: &[f64]) {
    let p = phi.len();
    for r in 0..p {
        for s in 0..p {
            h[(bj * p + r, bl * p + s)] = c * phi[r] * phi[s];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn families() -> Vec<PolicyFamily> {
        vec![
            PolicyFamily::binary_logistic(FeatureMap::intercept_and_all(2)).unwrap(),
            PolicyFamily::softmax(vec![0.0, 1.0, 2.0], FeatureMap::intercept_and_all(2)).unwrap(),
            PolicyFamily::gaussian_link(FeatureMap::intercept_and_all(2), 0.7).unwrap(),
        ]
    }

    #[test]
    fn rejects_point_mass_and_tiny_sigma() {
        let f = FeatureMap::intercept_and_all(1);
        assert!(matches!(PolicyFamily::gaussian_link(f.clone(), 0.0), Err(Error::DeterministicPolicy)));
        assert!(matches!(PolicyFamily::gaussian_link(f.clone(), 0.01), Err(Error::InvalidPolicy(_))));
        assert!(PolicyFamily::softmax(vec![0.0], f).is_err());
    }

    #[test]
    fn symmetric_start_values() {
        let fam = &families()[0];
        assert_eq!(fam.density(&[0.0; 3], 1.0, &[0.3, -2.0]).unwrap(), 0.5);
        let g = fam.grad_density(&[0.0; 3], 1.0, &[0.3, -2.0]).unwrap();
        assert_eq!(g, vec![0.25, 0.25 * 0.3, 0.25 * -2.0]);
        let sm = &families()[1];
        for t in [0.0, 1.0, 2.0] {
            assert!((sm.density(&[0.0; 6], t, &[1.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(sm.density(&[0.0; 6], 3.0, &[1.0, 2.0]), Err(Error::TreatmentOutOfSpace(_))));
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let fam = &families()[2];
        let theta = [0.4, -1.0, 2.0];
        let x = [0.5, 0.25];
        let eta = 0.4 - 0.5 + 0.5;
        let q = QuadratureRule::gauss_legendre(200, eta - 12.0, eta + 12.0);
        let total = q.integrate(|t| fam.density(&theta, t, &x).unwrap());
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conditional_value_examples() {
        let q = QuadratureRule::gauss_hermite(64);
        let fam = &families()[0];
        let theta = [0.2, -0.5, 1.0];
        let x = [0.3, 0.9];
        let (mu, g) = fam.conditional_value(&theta, &|t, _| t, &x, &q).unwrap();
        assert!((mu - fam.density(&theta, 1.0, &x).unwrap()).abs() < 1e-15);
        let gd = fam.grad_density(&theta, 1.0, &x).unwrap();
        for (a, b) in g.iter().zip(&gd) {
            assert!((a - b).abs() < 1e-15);
        }
        for fam in families() {
            let theta = vec![0.3; fam.dim_theta()];
            let (mu, g) = fam.conditional_value(&theta, &|_, _| 4.5, &x, &q).unwrap();
            assert!((mu - 4.5).abs() < 1e-12);
            assert!(g.iter().all(|v| v.abs() < 1e-12));
        }
        let fam = &families()[2];
        let (mu, _) = fam.conditional_value(&theta, &|t, _| t, &x, &q).unwrap();
        assert!((mu - (0.2 - 0.15 + 0.9)).abs() < 1e-6);
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fam = &families()[0];
        let ones = (0..100_000).filter(|_| fam.sample_action(&[0.0; 3], &[0.1, 0.2], &mut rng) == 1.0).count();
        assert!((ones as f64 / 1e5 - 0.5).abs() < 0.01);
        let sm = &families()[1];
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            counts[sm.sample_action(&[0.0; 6], &[0.1, 0.2], &mut rng) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 1.0 / 3.0).abs() < 0.01);
        }
        let a = fam.sample_action(&[0.1; 3], &[0.1, 0.2], &mut ChaCha8Rng::seed_from_u64(3));
        let b = fam.sample_action(&[0.1; 3], &[0.1, 0.2], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    fn fd_check(fam: &PolicyFamily, theta: &[f64], t: f64, x: &[f64]) -> std::result::Result<(), String> {
        let g = fam.grad_density(theta, t, x).unwrap();
        let h = fam.hess_density(theta, t, x).unwrap();
        let e = 1e-5;
        for j in 0..theta.len() {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += e;
            tm[j] -= e;
            let fd = (fam.density(&tp, t, x).unwrap() - fam.density(&tm, t, x).unwrap()) / (2.0 * e);
            if (fd - g[j]).abs() > 1e-6 * (1.0 + g[j].abs()) {
                return Err(format!("grad {j}: fd {fd} vs {}", g[j]));
            }
            let gp = fam.grad_density(&tp, t, x).unwrap();
            let gm = fam.grad_density(&tm, t, x).unwrap();
            for l in 0..theta.len() {
                let fd = (gp[l] - gm[l]) / (2.0 * e);
                if (fd - h[(l, j)]).abs() > 1e-6 * (1.0 + h[(l, j)].abs()) {
                    return Err(format!("hess ({l},{j}): fd {fd} vs {}", h[(l, j)]));
                }
            }
        }
        Ok(())
    }

    proptest! {
        #[test]
        fn mass_conservation(th in prop::collection::vec(-3.0f64..3.0, 6), x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let fams = families();
            for fam in &fams[..2] {
                let theta = &th[..fam.dim_theta()];
                let levels = fam.levels().unwrap();
                let total: f64 = levels.iter().map(|&t| fam.density(theta, t, &x).unwrap()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                let mut gsum = vec![0.0; theta.len()];
                for &t in levels {
                    for (s, g) in gsum.iter_mut().zip(fam.grad_density(theta, t, &x).unwrap()) {
                        *s += g;
                    }
                }
                prop_assert!(gsum.iter().all(|v| v.abs() < 1e-12));
            }
        }

        #[test]
        fn derivatives_match_finite_differences(
            th in prop::collection::vec(-2.0f64..2.0, 6),
            x in prop::collection::vec(-1.5f64..1.5, 2),
            arm in 0usize..3,
            t in -2.0f64..2.0,
        ) {
            let fams = families();
            prop_assert!(fd_check(&fams[0], &th[..3], (arm % 2) as f64, &x).is_ok());
            prop_assert!(fd_check(&fams[1], &th, arm as f64, &x).is_ok());
            prop_assert!(fd_check(&fams[2], &th[..3], t, &x).is_ok());
        }

        #[test]
        fn conditional_derivatives_match_finite_differences(
            th in prop::collection::vec(-1.0f64..1.0, 6),
            x in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let q = QuadratureRule::gauss_hermite(64);
            let m = |t: f64, x: &[f64]| 1.0 + t * x[0] - 0.5 * t * t + x[1].sin();
            for fam in families() {
                let theta = &th[..fam.dim_theta()];
                let (_, g) = fam.conditional_value(theta, &m, &x, &q).unwrap();
                let h = fam.conditional_hessian(theta, &m, &x, &q).unwrap();
                let e = 1e-5;
                for j in 0..theta.len() {
                    let mut tp = theta.to_vec();
                    let mut tm = theta.to_vec();
                    tp[j] += e;
                    tm[j] -= e;
                    let (vp, gp) = fam.conditional_value(&tp, &m, &x, &q).unwrap();
                    let (vm, gm) = fam.conditional_value(&tm, &m, &x, &q).unwrap();
                    let fd = (vp - vm) / (2.0 * e);
                    prop_assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()));
                    for l in 0..theta.len() {
                        let fd = (gp[l] - gm[l]) / (2.0 * e);
                        prop_assert!((fd - h[(l, j)]).abs() < 1e-6 * (1.0 + h[(l, j)].abs()));
                    }
                }
            }
        }
    }
}
