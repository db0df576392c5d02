//! Synthetic designs, oracle welfare on large test samples, and the Monte
//! Carlo engine.
//!
//! A design is described by a serializable [`DgpSpec`] whose propensity and
//! outcome means are closed-form expressions (see [`crate::expr`]). Noise
//! is centred uniform with the given per-arm variance. Regret of a learned
//! policy is `W* − W(θ̂)` where both welfares are averages of true
//! conditional means over one shared test sample.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::{info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::asymptotics::BinaryOracle;
use crate::data::{Dataset, TreatmentSpace};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::nuisance::CondDensity;
use crate::optim::{maximize, MaximizeOptions, Objective};
use crate::policy::{FeatureMap, PolicyFamily};
use crate::quadrature::{QuadratureRule, DEFAULT_NODES};
use crate::rng::{derive_seed, stream};
use crate::sieve::{BasisKind, BasisSpec};
use crate::stats::{histogram, mean, neumaier_sum, sd};
use crate::welfare::{maximize_welfare, EstimatorConfig, EstimatorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent `U[0,1]` coordinates.
    Uniform { dim: usize },
    /// Rows resampled with replacement from a CSV file.
    Bootstrap { path: PathBuf, columns: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensitySpec {
    /// Probability of the second of two levels.
    Binary { treated: String },
    /// One nonnegative score per level, normalized to sum to one.
    Levels { scores: Vec<String> },
    /// Normal with the given mean and standard deviation, truncated to the
    /// interval when the space is bounded.
    Gaussian { mean: String, sd: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeSpec {
    /// `m_t(x)` for each level.
    Arms { means: Vec<String> },
    /// `m(t, x)` for continuous treatments.
    Continuous { mean: String },
}

fn default_f_min() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub name: String,
    pub covariates: CovariateLaw,
    pub space: TreatmentSpace,
    pub propensity: PropensitySpec,
    pub outcome: OutcomeSpec,
    /// Noise variance per arm; a single entry is shared.
    pub noise_var: Vec<f64>,
    /// Overlap floor checked on the probe set.
    #[serde(default = "default_f_min")]
    pub f_min: f64,
    /// Optional covariate names usable in expressions next to `x1..xd`.
    #[serde(default)]
    pub names: Vec<String>,
}

enum CompiledPropensity {
    Binary(Expr),
    Levels(Vec<Expr>),
    Gaussian { mean: Expr, sd: Expr },
}

enum CompiledOutcome {
    Arms(Vec<Expr>),
    Continuous(Expr),
}

/// A validated design ready for sampling.
pub struct CompiledDgp {
    spec: DgpSpec,
    d: usize,
    names: Vec<String>,
    propensity: CompiledPropensity,
    outcome: CompiledOutcome,
    rows: Option<Vec<f64>>,
}

impl std::fmt::Debug for CompiledDgp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompiledDgp").field("name", &self.spec.name).field("d", &self.d).finish()
    }
}

fn read_columns(path: &Path, columns: &[String]) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let idx = columns
        .iter()
        .map(|c| header.iter().position(|h| h.trim() == c).ok_or_else(|| Error::MissingColumn(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (&j, name) in idx.iter().zip(columns) {
            let v: f64 = rec
                .get(j)
                .and_then(|s| s.trim().parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell { row: r + 1, col: name.clone() })?;
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(out)
}

/// Evenly spaced or random probe points in `[0,1]^d`.
fn uniform_probe(d: usize) -> Vec<f64> {
    let per = 11usize;
    if (per as f64).powi(d as i32) <= 20_000.0 {
        let total = per.pow(d as u32);
        let mut out = Vec::with_capacity(total * d);
        for k in 0..total {
            let mut r = k;
            for _ in 0..d {
                out.push((r % per) as f64 / (per - 1) as f64);
                r /= per;
            }
        }
        out
    } else {
        let mut g = stream(0, &[0x9B]);
        (0..10_000 * d).map(|_| g.random::<f64>()).collect()
    }
}

fn uniform_noise(g: &mut ChaCha8Rng, var: f64) -> f64 {
    let half = (3.0 * var).sqrt();
    if half > 0.0 {
        g.random_range(-half..=half)
    } else {
        0.0
    }
}

impl CompiledDgp {
    pub fn compile(spec: &DgpSpec) -> Result<Self> {
        let cfg = |m: String| Error::Config(format!("design `{}`: {m}", spec.name));
        spec.space.validate()?;
        let (d, rows) = match &spec.covariates {
            CovariateLaw::Uniform { dim } => (*dim, None),
            CovariateLaw::Bootstrap { path, columns } => (columns.len(), Some(read_columns(path, columns)?)),
        };
        if d == 0 {
            return Err(cfg("at least one covariate is required".into()));
        }
        let names = if spec.names.is_empty() {
            match &spec.covariates {
                CovariateLaw::Bootstrap { columns, .. } => columns.clone(),
                _ => (1..=d).map(|j| format!("x{j}")).collect(),
            }
        } else if spec.names.len() == d {
            spec.names.clone()
        } else {
            return Err(cfg(format!("{} names given for {d} covariates", spec.names.len())));
        };
        let compile = |s: &String| Expr::compile(s, &names);
        let k = spec.space.levels().map(|l| l.len());
        let propensity = match (&spec.propensity, k) {
            (PropensitySpec::Binary { treated }, Some(2)) => CompiledPropensity::Binary(compile(treated)?),
            (PropensitySpec::Levels { scores }, Some(k)) if scores.len() == k => {
                CompiledPropensity::Levels(scores.iter().map(compile).collect::<Result<_>>()?)
            }
            (PropensitySpec::Gaussian { mean, sd }, None) => {
                CompiledPropensity::Gaussian { mean: compile(mean)?, sd: compile(sd)? }
            }
            _ => return Err(cfg("propensity kind does not match the treatment space".into())),
        };
        let outcome = match (&spec.outcome, k) {
            (OutcomeSpec::Arms { means }, Some(k)) if means.len() == k => {
                CompiledOutcome::Arms(means.iter().map(compile).collect::<Result<_>>()?)
            }
            (OutcomeSpec::Continuous { mean }, _) => CompiledOutcome::Continuous(compile(mean)?),
            _ => return Err(cfg("outcome means do not match the treatment space".into())),
        };
        let arms = k.unwrap_or(1);
        if !(spec.noise_var.len() == 1 || spec.noise_var.len() == arms) {
            return Err(cfg(format!("noise_var needs 1 or {arms} entries")));
        }
        if spec.noise_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(cfg("noise variances must be finite and nonnegative".into()));
        }
        if !(spec.f_min > 0.0) {
            return Err(cfg("f_min must be positive".into()));
        }
        let dgp = CompiledDgp { spec: spec.clone(), d, names, propensity, outcome, rows };
        dgp.check_overlap()?;
        Ok(dgp)
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn space(&self) -> &TreatmentSpace {
        &self.spec.space
    }

    fn probe_points(&self) -> Vec<f64> {
        match &self.rows {
            Some(r) => r.clone(),
            None => uniform_probe(self.d),
        }
    }

    fn check_overlap(&self) -> Result<()> {
        let pts = self.probe_points();
        let f_min = self.spec.f_min;
        for (i, x) in pts.chunks(self.d).enumerate() {
            let worst = match (&self.propensity, &self.spec.space) {
                (CompiledPropensity::Gaussian { .. }, TreatmentSpace::Interval { lo, hi }) => {
                    // a truncated normal density is smallest at an endpoint
                    self.propensity(*lo, x)?.min(self.propensity(*hi, x)?)
                }
                (CompiledPropensity::Gaussian { sd, .. }, _) => {
                    // unbounded support: only a positive scale can be checked
                    let s = sd.eval(0.0, x)?;
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(Error::InvalidData(format!("propensity sd {s} at probe point {i}")));
                    }
                    f64::INFINITY
                }
                _ => self.arm_probs(x)?.into_iter().fold(f64::INFINITY, f64::min),
            };
            if !(worst >= f_min) {
                return Err(Error::OverlapViolation { index: i, value: worst, f_min });
            }
        }
        Ok(())
    }

    /// Treatment probabilities per level.
    pub fn arm_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.propensity {
            CompiledPropensity::Binary(e) => {
                let p = e.eval(0.0, x)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidData(format!("propensity {p} outside [0, 1]")));
                }
                Ok(vec![1.0 - p, p])
            }
            CompiledPropensity::Levels(es) => {
                let s = es.iter().map(|e| e.eval(0.0, x)).collect::<Result<Vec<_>>>()?;
                let total: f64 = s.iter().sum();
                if s.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0 && total.is_finite()) {
                    return Err(Error::InvalidData("propensity scores must be nonnegative and finite".into()));
                }
                Ok(s.into_iter().map(|v| v / total).collect())
            }
            CompiledPropensity::Gaussian { .. } => Err(Error::InvalidArgument("continuous propensity has no arms".into())),
        }
    }

    fn gaussian_params(&self, x: &[f64]) -> Result<(f64, f64)> {
        match &self.propensity {
            CompiledPropensity::Gaussian { mean, sd } => {
                let (m, s) = (mean.eval(0.0, x)?, sd.eval(0.0, x)?);
                if !(m.is_finite() && s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidData(format!("propensity mean {m} / sd {s} invalid")));
                }
                Ok((m, s))
            }
            _ => unreachable!("gaussian propensity only"),
        }
    }

    /// `f(t|x)`: probability mass for discrete spaces, density otherwise.
    pub fn propensity(&self, t: f64, x: &[f64]) -> Result<f64> {
        match &self.spec.space {
            TreatmentSpace::Discrete { .. } => match self.spec.space.level_index(t) {
                Some(k) => Ok(self.arm_probs(x)?[k]),
                None => Ok(0.0),
            },
            TreatmentSpace::Interval { lo, hi } => {
                if t < *lo || t > *hi {
                    return Ok(0.0);
                }
                let (m, s) = self.gaussian_params(x)?;
                let nd = Normal::new(m, s).expect("validated");
                Ok(nd.pdf(t) / (nd.cdf(*hi) - nd.cdf(*lo)))
            }
            TreatmentSpace::Line => {
                let (m, s) = self.gaussian_params(x)?;
                Ok(Normal::new(m, s).expect("validated").pdf(t))
            }
        }
    }

    /// True conditional mean `m(t, x)`.
    pub fn mean(&self, t: f64, x: &[f64]) -> Result<f64> {
        match &self.outcome {
            CompiledOutcome::Arms(es) => {
                let k = self.spec.space.level_index(t).ok_or(Error::TreatmentOutOfSpace(t))?;
                es[k].eval(t, x)
            }
            CompiledOutcome::Continuous(e) => e.eval(t, x),
        }
    }

    /// `m_t(x)` for every level.
    pub fn arm_means(&self, x: &[f64]) -> Result<Vec<f64>> {
        let levels = self.spec.space.levels().ok_or_else(|| Error::InvalidArgument("continuous design".into()))?;
        levels.iter().map(|&l| self.mean(l, x)).collect()
    }

    pub fn noise_var(&self, arm: usize) -> f64 {
        let v = &self.spec.noise_var;
        if v.len() == 1 {
            v[0]
        } else {
            v[arm]
        }
    }

    fn draw_x(&self, g: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match &self.rows {
            Some(r) => {
                let n = r.len() / self.d;
                let i = g.random_range(0..n);
                out.extend_from_slice(&r[i * self.d..(i + 1) * self.d]);
            }
            None => out.extend((0..self.d).map(|_| g.random::<f64>())),
        }
    }

    /// Covariates only, for test samples.
    pub fn sample_covariates(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut g = stream(seed, &[0xC0]);
        let mut out = Vec::with_capacity(n * self.d);
        for _ in 0..n {
            self.draw_x(&mut g, &mut out);
        }
        out
    }

    fn draw_t(&self, g: &mut ChaCha8Rng, x: &[f64]) -> Result<(f64, usize)> {
        match &self.spec.space {
            TreatmentSpace::Discrete { levels } => {
                let probs = self.arm_probs(x)?;
                let u: f64 = g.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok((levels[k], k));
                    }
                }
                Ok((levels[levels.len() - 1], levels.len() - 1))
            }
            TreatmentSpace::Interval { lo, hi } => {
                let (m, s) = self.gaussian_params(x)?;
                let nd = Normal::new(m, s).expect("validated");
                let (a, b) = (nd.cdf(*lo), nd.cdf(*hi));
                let u = a + (b - a) * g.random::<f64>();
                Ok((nd.inverse_cdf(u).clamp(*lo, *hi), 0))
            }
            TreatmentSpace::Line => {
                let (m, s) = self.gaussian_params(x)?;
                Ok((m + s * g.sample::<f64, _>(rand_distr::StandardNormal), 0))
            }
        }
    }

    /// Draws `n` observations; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SimSample> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        let mut g = stream(seed, &[0xD6]);
        let k = self.spec.space.levels().map(|l| l.len());
        let (mut x, mut t, mut y) = (Vec::with_capacity(n * self.d), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut potentials = Vec::with_capacity(n * k.unwrap_or(0));
        for i in 0..n {
            self.draw_x(&mut g, &mut x);
            let xi = &x[i * self.d..(i + 1) * self.d];
            let (ti, arm) = self.draw_t(&mut g, xi)?;
            match k {
                Some(k) => {
                    let means = self.arm_means(xi)?;
                    for (a, m) in means.iter().enumerate() {
                        potentials.push(m + uniform_noise(&mut g, self.noise_var(a)));
                    }
                    y.push(potentials[i * k + arm]);
                }
                None => y.push(self.mean(ti, xi)? + uniform_noise(&mut g, self.noise_var(0))),
            }
            t.push(ti);
        }
        let data = Dataset::with_names(y, t, x, self.d, self.spec.space.clone(), self.names.clone())?;
        Ok(SimSample { data, potentials })
    }

    /// `f(t|x)` as a shareable closure; evaluation errors map to `0`,
    /// which the estimators reject as an overlap violation.
    pub fn propensity_density(self: &Arc<Self>) -> CondDensity {
        let me = self.clone();
        Arc::new(move |t, x| me.propensity(t, x).unwrap_or(0.0))
    }

    /// Oracle nuisances for the supremum comparison; binary designs only.
    pub fn binary_oracle(self: &Arc<Self>) -> Result<BinaryOracle> {
        let levels = self.spec.space.levels().filter(|l| l.len() == 2).ok_or_else(|| {
            Error::Config(format!("design `{}` is not a binary-treatment design", self.spec.name))
        })?;
        let (l0, l1) = (levels[0], levels[1]);
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        Ok(BinaryOracle {
            m0: Arc::new(move |x| a.mean(l0, x).unwrap_or(f64::NAN)),
            m1: Arc::new(move |x| b.mean(l1, x).unwrap_or(f64::NAN)),
            p: Arc::new(move |x| c.arm_probs(x).map(|p| p[1]).unwrap_or(f64::NAN)),
            var0: self.noise_var(0),
            var1: self.noise_var(1),
        })
    }
}

/// A simulated sample with its potential outcomes (`n × K`, discrete
/// designs only).
#[derive(Debug, Clone)]
pub struct SimSample {
    pub data: Dataset,
    pub potentials: Vec<f64>,
}

pub fn run_dgp(spec: &DgpSpec, n: usize, seed: u64) -> Result<SimSample> {
    CompiledDgp::compile(spec)?.sample(n, seed)
}

const ORACLE_CHUNK: usize = 8192;

/// Covariates of a large test sample with true arm means precomputed.
pub struct OracleTestSample {
    dgp: Arc<CompiledDgp>,
    xs: Vec<f64>,
    n: usize,
    /// `n × K` arm means for discrete designs.
    m: Vec<f64>,
}

impl OracleTestSample {
    pub fn new(dgp: &Arc<CompiledDgp>, n_test: usize, seed: u64) -> Result<Self> {
        if n_test == 0 {
            return Err(Error::InvalidArgument("test sample must be nonempty".into()));
        }
        let xs = dgp.sample_covariates(n_test, seed);
        let d = dgp.d();
        let m = if dgp.space().is_discrete() {
            let rows: Vec<Result<Vec<f64>>> = xs.par_chunks(d).map(|x| dgp.arm_means(x)).collect();
            let mut m = Vec::with_capacity(n_test * dgp.space().levels().unwrap().len());
            for r in rows {
                m.extend(r?);
            }
            m
        } else {
            vec![]
        };
        Ok(OracleTestSample { dgp: dgp.clone(), xs, n: n_test, m })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn dgp(&self) -> &Arc<CompiledDgp> {
        &self.dgp
    }

    pub fn objective(&self, family: &PolicyFamily) -> Result<OracleObjective<'_>> {
        family.validate()?;
        if let Some(c) = family.features.max_column() {
            if c >= self.dgp.d() {
                return Err(Error::InvalidPolicy(format!("feature column {c} out of range")));
            }
        }
        if family.space() != *self.dgp.space() && !(family.space() == TreatmentSpace::Line && !self.dgp.space().is_discrete()) {
            return Err(Error::InvalidPolicy("policy levels differ from the design's treatment levels".into()));
        }
        let p = family.p();
        let mut phi = vec![0.0; self.n * p];
        for (i, x) in self.xs.chunks(self.dgp.d()).enumerate() {
            family.features.eval_into(x, &mut phi[i * p..(i + 1) * p]);
        }
        Ok(OracleObjective { test: self, family: family.clone(), phi, quad: QuadratureRule::gauss_hermite(DEFAULT_NODES) })
    }

    /// `W(θ) = (1/n_test) Σ_j μ_θ(X_j)`.
    pub fn welfare(&self, family: &PolicyFamily, theta: &[f64]) -> Result<f64> {
        Ok(self.objective(family)?.value_grad(theta)?.0)
    }

    /// Welfare of an arbitrary assignment `x ↦ (π(t_k|x))_k`; discrete
    /// designs only.
    pub fn welfare_with(&self, assign: &(dyn Fn(&[f64]) -> Vec<f64> + Sync)) -> Result<f64> {
        let k = self.dgp.space().levels().ok_or_else(|| Error::InvalidArgument("continuous design".into()))?.len();
        let d = self.dgp.d();
        let vals: Vec<f64> = (0..self.n)
            .into_par_iter()
            .map(|j| {
                let p = assign(&self.xs[j * d..(j + 1) * d]);
                p.iter().zip(&self.m[j * k..(j + 1) * k]).map(|(a, b)| a * b).sum()
            })
            .collect();
        Ok(neumaier_sum(vals) / self.n as f64)
    }

    /// Welfare estimated by drawing actions from the policy and outcomes
    /// with noise; returns `(mean, standard error)`.
    pub fn simulated_welfare(&self, family: &PolicyFamily, theta: &[f64], seed: u64) -> Result<(f64, f64)> {
        let d = self.dgp.d();
        let mut g = stream(seed, &[0x51]);
        let mut ys = Vec::with_capacity(self.n);
        for x in self.xs.chunks(d) {
            let t = family.sample_action(theta, x, &mut g);
            let arm = self.dgp.space().level_index(t).unwrap_or(0);
            ys.push(self.dgp.mean(t, x)? + uniform_noise(&mut g, self.dgp.noise_var(arm)));
        }
        Ok((mean(&ys), crate::stats::se_mean(&ys)))
    }
}

/// Oracle welfare of one policy family on a test sample.
pub struct OracleObjective<'a> {
    test: &'a OracleTestSample,
    family: PolicyFamily,
    phi: Vec<f64>,
    quad: QuadratureRule,
}

impl Objective for OracleObjective<'_> {
    fn dim(&self) -> usize {
        self.family.dim_theta()
    }

    fn value_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let dim = self.family.dim_theta();
        if theta.len() != dim {
            return Err(Error::InvalidArgument(format!("θ must have {dim} entries")));
        }
        let (n, p, d) = (self.test.n, self.family.p(), self.test.dgp.d());
        let parts: Vec<Result<Vec<f64>>> = (0..n.div_ceil(ORACLE_CHUNK))
            .into_par_iter()
            .map(|c| {
                // [value, grad...] for this chunk
                let mut acc = vec![0.0; dim + 1];
                let mut g = vec![0.0; dim];
                match self.family.n_arms() {
                    Some(k) => {
                        let mut probs = vec![0.0; k];
                        for j in c * ORACLE_CHUNK..((c + 1) * ORACLE_CHUNK).min(n) {
                            let phi = &self.phi[j * p..(j + 1) * p];
                            self.family.arm_probs_phi(theta, phi, &mut probs);
                            acc[0] += PolicyFamily::arm_mean_grad_phi(&probs, &self.test.m[j * k..(j + 1) * k], phi, &mut g);
                            for (a, b) in acc[1..].iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                    }
                    None => {
                        let dgp = &self.test.dgp;
                        let m = |t: f64, x: &[f64]| dgp.mean(t, x).unwrap_or(f64::NAN);
                        for j in c * ORACLE_CHUNK..((c + 1) * ORACLE_CHUNK).min(n) {
                            let (mu, gr) = self.family.conditional_value(theta, &m, &self.test.xs[j * d..(j + 1) * d], &self.quad)?;
                            acc[0] += mu;
                            for (a, b) in acc[1..].iter_mut().zip(&gr) {
                                *a += b;
                            }
                        }
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(parts.len()); dim + 1];
        for part in parts {
            for (col, v) in cols.iter_mut().zip(part?) {
                col.push(v);
            }
        }
        let nf = n as f64;
        let sums: Vec<f64> = cols.into_iter().map(|c| neumaier_sum(c) / nf).collect();
        Ok((sums[0], sums[1..].to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOptimum {
    pub theta: Vec<f64>,
    pub welfare: f64,
    pub at_boundary: bool,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Multi-start maximization of the oracle welfare on `test`.
pub fn oracle_optimum_on(test: &OracleTestSample, family: &PolicyFamily, opts: &MaximizeOptions) -> Result<OracleOptimum> {
    let obj = test.objective(family)?;
    let r = maximize(&obj, opts, test.n())?;
    if r.at_boundary {
        warn!("oracle optimum lies on the parameter box boundary");
    }
    Ok(OracleOptimum { theta: r.theta, welfare: r.value, at_boundary: r.at_boundary, grad_norm: r.grad_norm, converged: r.converged })
}

/// Explicit cache of oracle optima keyed by design, family, test size,
/// seed and optimizer settings.
#[derive(Default)]
pub struct OptimumCache {
    map: Mutex<HashMap<String, OracleOptimum>>,
}

impl OptimumCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Oracle `(θ*, W*)` on a test sample of size `n_test` drawn with `seed`.
pub fn oracle_optimum(
    spec: &DgpSpec,
    family: &PolicyFamily,
    opts: &MaximizeOptions,
    n_test: usize,
    seed: u64,
    cache: &OptimumCache,
) -> Result<OracleOptimum> {
    let key = format!("{spec:?}|{family:?}|{n_test}|{seed}|{opts:?}");
    if let Some(hit) = cache.map.lock().unwrap().get(&key) {
        return Ok(hit.clone());
    }
    let dgp = Arc::new(CompiledDgp::compile(spec)?);
    let test = OracleTestSample::new(&dgp, n_test, seed)?;
    let opt = oracle_optimum_on(&test, family, opts)?;
    cache.map.lock().unwrap().insert(key, opt.clone());
    Ok(opt)
}

fn default_n_test() -> usize {
    1_000_000
}

fn default_bins() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McStudy {
    pub dgp: DgpSpec,
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<EstimatorConfig>,
    pub policy: PolicyFamily,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    pub seed: u64,
    /// Optimizer for the learned policies; its seed is replaced per fit.
    #[serde(default)]
    pub optimizer: MaximizeOptions,
    /// Optimizer for the oracle optimum; defaults to `optimizer` with 16
    /// restarts.
    #[serde(default)]
    pub oracle_optimizer: Option<MaximizeOptions>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

pub const MIN_TEST_SIZE: usize = 100_000;

impl McStudy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if self.n_test < MIN_TEST_SIZE {
            return bad("n_test must be at least 100000");
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return bad("sizes must be a nonempty list of positive integers");
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required");
        }
        let mut labels: Vec<String> = self.estimators.iter().map(|e| e.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.estimators.len() {
            return bad("estimator labels must be unique");
        }
        self.policy.validate()
    }

    fn oracle_opts(&self) -> MaximizeOptions {
        self.oracle_optimizer.clone().unwrap_or(MaximizeOptions { restarts: 16, ..self.optimizer.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretDraw {
    pub rep: usize,
    pub regret: f64,
    pub n_regret: f64,
    pub welfare: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub estimator: String,
    pub kind: EstimatorKind,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_regret: f64,
    pub sd_regret: f64,
    pub mean_n_regret: f64,
    pub sd_n_regret: f64,
    pub draws: Vec<RegretDraw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub dgp: String,
    pub theta_star: Vec<f64>,
    /// `max(W(θ*), best welfare achieved by any replication)`.
    pub w_star: f64,
    pub w_star_optimizer: f64,
    pub theta_star_at_boundary: bool,
    pub n_test: usize,
    pub cells: Vec<McCell>,
}

impl McReport {
    pub fn cell(&self, estimator: &str, n: usize) -> Option<&McCell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.n == n)
    }

    /// Regrets of two estimators at `n` on the replications both
    /// completed, aligned by replication.
    pub fn paired(&self, a: &str, b: &str, n: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let (ca, cb) = (self.cell(a, n)?, self.cell(b, n)?);
        let mut out = (vec![], vec![]);
        for da in &ca.draws {
            if let Some(db) = cb.draws.iter().find(|d| d.rep == da.rep) {
                out.0.push(da.regret);
                out.1.push(db.regret);
            }
        }
        Some(out)
    }

    /// CSV with columns `estimator,n,rep,regret,n_times_regret`.
    pub fn write_draws_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["estimator", "n", "rep", "regret", "n_times_regret"])?;
        for c in &self.cells {
            for d in &c.draws {
                w.write_record([c.estimator.clone(), c.n.to_string(), d.rep.to_string(), d.regret.to_string(), d.n_regret.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binned counts of `nR` per cell over `[0, max nR]`.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>, bins: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["estimator", "n", "bin_lo", "bin_hi", "count"])?;
        for c in &self.cells {
            let v: Vec<f64> = c.draws.iter().map(|d| d.n_regret).collect();
            let hi = v.iter().copied().fold(0.0, f64::max);
            for (lo, up, count) in histogram(&v, bins, 0.0, hi) {
                w.write_record([c.estimator.clone(), c.n.to_string(), lo.to_string(), up.to_string(), count.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of replication `r` at sample size `n`; independent of how many
/// replications are run.
pub fn replication_seed(base: u64, r: usize, n: usize) -> u64 {
    derive_seed(base, &[r as u64, n as u64])
}

pub fn monte_carlo(study: &McStudy) -> Result<McReport> {
    monte_carlo_cached(study, &OptimumCache::new())
}

pub fn monte_carlo_cached(study: &McStudy, cache: &OptimumCache) -> Result<McReport> {
    study.validate()?;
    let dgp = Arc::new(CompiledDgp::compile(&study.dgp)?);
    let test_seed = derive_seed(study.seed, &[0x7E57]);
    let test = OracleTestSample::new(&dgp, study.n_test, test_seed)?;
    let oracle_opts = study.oracle_opts();
    let key = format!("{:?}|{:?}|{}|{}|{:?}", study.dgp, study.policy, study.n_test, test_seed, oracle_opts);
    let cached = cache.map.lock().unwrap().get(&key).cloned();
    let opt = match cached {
        Some(o) => o,
        None => {
            let o = oracle_optimum_on(&test, &study.policy, &oracle_opts)?;
            cache.map.lock().unwrap().insert(key, o.clone());
            o
        }
    };
    info!("oracle optimum θ* = {:?}, W* = {:.6}", opt.theta, opt.welfare);
    let oracle_obj = test.objective(&study.policy)?;
    let propensity = dgp.propensity_density();

    let tasks: Vec<(usize, usize)> =
        study.sizes.iter().flat_map(|&n| (0..study.replications).map(move |r| (n, r))).collect();
    let results: Vec<Vec<Option<(f64, Vec<f64>)>>> = tasks
        .par_iter()
        .map(|&(n, r)| {
            let seed = replication_seed(study.seed, r, n);
            let sample = match dgp.sample(n, seed) {
                Ok(s) => s,
                Err(e) => {
                    warn!("replication {r} at n = {n}: simulation failed: {e}");
                    return vec![None; study.estimators.len()];
                }
            };
            study
                .estimators
                .iter()
                .enumerate()
                .map(|(e, cfg)| {
                    let fit = || -> Result<(f64, Vec<f64>)> {
                        let spec = cfg.build(&sample.data, Some(propensity.clone()), derive_seed(seed, &[1, e as u64]))?;
                        let obj = spec.objective(&sample.data, &study.policy)?;
                        let opts = MaximizeOptions { seed: derive_seed(seed, &[2, e as u64]), ..study.optimizer.clone() };
                        let est = maximize_welfare(&obj, &opts)?;
                        let w = oracle_obj.value_grad(&est.theta_hat)?.0;
                        Ok((w, est.theta_hat))
                    };
                    match fit() {
                        Ok(v) => Some(v),
                        Err(err) => {
                            warn!("replication {r} at n = {n}, estimator {}: {err}", cfg.label());
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();

    let best = results.iter().flatten().flatten().map(|(w, _)| *w).fold(f64::NEG_INFINITY, f64::max);
    let w_star = opt.welfare.max(best);
    let mut cells = Vec::new();
    for (e, cfg) in study.estimators.iter().enumerate() {
        for &n in &study.sizes {
            let mut draws = Vec::new();
            let mut failures = 0;
            for (t, &(tn, r)) in tasks.iter().enumerate() {
                if tn != n {
                    continue;
                }
                match &results[t][e] {
                    Some((w, theta)) => {
                        let regret = w_star - w;
                        draws.push(RegretDraw { rep: r, regret, n_regret: n as f64 * regret, welfare: *w, theta: theta.clone() });
                    }
                    None => failures += 1,
                }
            }
            if failures * 50 > study.replications {
                return Err(Error::StudyFailed { failed: failures, total: study.replications });
            }
            let reg: Vec<f64> = draws.iter().map(|d| d.regret).collect();
            let nreg: Vec<f64> = draws.iter().map(|d| d.n_regret).collect();
            let sd_or_zero = |v: &[f64]| if v.len() > 1 { sd(v) } else { 0.0 };
            cells.push(McCell {
                estimator: cfg.label(),
                kind: cfg.kind,
                n,
                replications: study.replications,
                failures,
                mean_regret: if reg.is_empty() { f64::NAN } else { mean(&reg) },
                sd_regret: sd_or_zero(&reg),
                mean_n_regret: if nreg.is_empty() { f64::NAN } else { mean(&nreg) },
                sd_n_regret: sd_or_zero(&nreg),
                draws,
            });
        }
    }
    Ok(McReport {
        dgp: study.dgp.name.clone(),
        theta_star: opt.theta,
        w_star,
        w_star_optimizer: opt.welfare,
        theta_star_at_boundary: opt.at_boundary,
        n_test: study.n_test,
        cells,
    })
}

/// Binary design with a cubic treatment effect in `x1` whose welfare has
/// an interior optimum for a logistic policy in the centred `x1`.
/// Propensity `expit(0.5 − 0.5 x1)`, `Y(0) = 10 + ε`, uniform noise on
/// `[−10, 10]`.
pub fn benchmark_dgp() -> DgpSpec {
    DgpSpec {
        name: "benchmark".into(),
        covariates: CovariateLaw::Uniform { dim: 2 },
        space: TreatmentSpace::binary(),
        propensity: PropensitySpec::Binary { treated: "expit(0.5 - 0.5*x1)".into() },
        outcome: OutcomeSpec::Arms {
            means: vec!["10".into(), "10 + 5*(x1 - x2) + 100*(x1 - 0.5)*(10*(x1 - 0.5)^2 - 1)".into()],
        },
        noise_var: vec![100.0 / 3.0],
        f_min: 1e-3,
        names: vec![],
    }
}

/// Same propensity and noise with the linear effect `5(x1 − x2)`. Under a
/// logistic policy in `(1, x1, x2)` its welfare keeps increasing towards
/// the threshold rule, so the optimum sits on the parameter box.
pub fn linear_effect_dgp() -> DgpSpec {
    DgpSpec {
        name: "linear_effect".into(),
        outcome: OutcomeSpec::Arms { means: vec!["10".into(), "10 + 5*(x1 - x2)".into()] },
        ..benchmark_dgp()
    }
}

/// Logistic policy in `x1 − 1/2` without intercept.
pub fn benchmark_policy() -> PolicyFamily {
    PolicyFamily::binary_logistic(FeatureMap::columns(false, vec![0], vec![0.5])).expect("valid family")
}

/// Estimators of the benchmark study: true propensity, estimated weights,
/// and cross-fitted doubly robust.
pub fn benchmark_estimators() -> Vec<EstimatorConfig> {
    let weight_x = BasisSpec { kind: BasisKind::TensorPolynomial { degrees: vec![6, 1] }, standardize: true };
    let mut ep = EstimatorConfig::new(EstimatorKind::Ep);
    ep.basis_t = Some(BasisSpec::new(BasisKind::Indicator));
    ep.basis_x = Some(weight_x.clone());
    let mut dr = EstimatorConfig::new(EstimatorKind::Dr);
    dr.basis_t = Some(BasisSpec::new(BasisKind::Indicator));
    dr.basis_x = Some(BasisSpec { kind: BasisKind::TensorPolynomial { degrees: vec![3, 1] }, standardize: true });
    dr.mean = Some(crate::nuisance::MeanSpec {
        basis_t: BasisSpec::new(BasisKind::Indicator),
        basis_x: BasisSpec::new(BasisKind::TensorPolynomial { degrees: vec![3, 1] }),
        ridge: None,
    });
    vec![EstimatorConfig::new(EstimatorKind::Tp), ep, dr]
}

pub fn benchmark_study(sizes: Vec<usize>, replications: usize, n_test: usize, seed: u64) -> McStudy {
    McStudy {
        dgp: benchmark_dgp(),
        sizes,
        replications,
        estimators: benchmark_estimators(),
        policy: benchmark_policy(),
        n_test,
        seed,
        optimizer: MaximizeOptions { restarts: 4, ..Default::default() },
        oracle_optimizer: None,
        histogram_bins: default_bins(),
    }
}
