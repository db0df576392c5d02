//! Subcommands. Each one reads its inputs through [`Inputs`], writes JSON
//! and CSV files into its output directory, and never consults the clock
//! or the environment, so a rerun with the same inputs and seed produces
//! the same bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Subcommand};
use effpolicy::asymptotics::{
    asymptotic_report, estimate_h, estimate_sigma_u_tp, estimate_veff, gp_sup_compare, influence_sample,
    threshold_grid, AsymptoticReport, CurvatureMethod, KernelMethod, PlugIn,
};
use effpolicy::data::{Dataset, TreatmentSpace};
use effpolicy::expr::Expr;
use effpolicy::nuisance::{crossfit, fit_weights_from_spec, CondDensity};
use effpolicy::optim::MaximizeOptions;
use effpolicy::policy::{FeatureMap, PolicyFamily, PolicyKind};
use effpolicy::rng::derive_seed;
use effpolicy::sieve::BasisSpec;
use effpolicy::simlab::{
    monte_carlo, oracle_optimum_on, CompiledDgp, CovariateLaw, DgpSpec, McStudy, OracleTestSample,
};
use effpolicy::weights::{balance_residual, WeightFit, WeightOptions};
use effpolicy::welfare::{
    bootstrap_se, maximize_welfare, EstimatorConfig, EstimatorKind, EstimatorSpec, WelfareObjective, DEFAULT_F_MIN,
};
use effpolicy::{Error, Result};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::inputs::{parse_theta, Inputs, SchemaArgs};

const DEFAULT_OUT: &str = "effpolicy-out";

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Learn a policy from a CSV sample.
    Learn(LearnArgs),
    /// Fit stabilized weights and report balance diagnostics.
    Weights(WeightsArgs),
    /// Run a Monte Carlo study from a JSON config.
    Simulate(SimulateArgs),
    /// Estimate the limit law of scaled regret.
    Asymptotics(AsymptoticsArgs),
    /// Compare expected suprema of the two welfare processes.
    Gpsup(GpsupArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LearnArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: String,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// `tp`, `ep` or `dr`.
    #[arg(long, value_parser = parse_enum::<EstimatorKind>)]
    pub estimator: EstimatorKind,
    /// Policy family JSON, inline or a file path.
    #[arg(long)]
    pub policy: Option<String>,
    /// Estimator JSON with nuisance bases and fold count.
    #[arg(long)]
    pub estimator_config: Option<String>,
    /// Density `f(t|x)` as an expression in `t` and covariate names.
    #[arg(long, conflicts_with = "propensity_column")]
    pub propensity: Option<String>,
    /// Column holding `f(T_i|X_i)` for each row.
    #[arg(long)]
    pub propensity_column: Option<String>,
    /// Doubly robust estimator with `1/f` in place of fitted weights.
    #[arg(long)]
    pub known_weights: bool,
    /// Bootstrap replications for standard errors.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_OUT)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct WeightsArgs {
    #[arg(long)]
    pub data: String,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Treatment basis JSON, inline or a file path.
    #[arg(long)]
    pub basis_t: Option<String>,
    /// Covariate basis JSON, inline or a file path.
    #[arg(long)]
    pub basis_x: Option<String>,
    /// Gradient tolerance of the dual solver.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_OUT)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Study JSON.
    #[arg(long)]
    pub study: String,
    /// Overrides the seed in the study file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the replication count in the study file.
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long, default_value = DEFAULT_OUT)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AsymptoticsArgs {
    /// Observed sample; nuisances are cross-fitted on it.
    #[arg(long, required_unless_present = "dgp", conflicts_with = "dgp")]
    pub data: Option<String>,
    /// Design JSON; nuisances are the true ones.
    #[arg(long)]
    pub dgp: Option<String>,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, value_parser = parse_enum::<EstimatorKind>)]
    pub estimator: EstimatorKind,
    #[arg(long)]
    pub estimator_config: Option<String>,
    /// Policy parameter, comma separated; refit when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<String>,
    /// Density `f(t|x)` for the true-propensity estimator on data.
    #[arg(long)]
    pub propensity: Option<String>,
    /// Size of the simulated sample in design mode.
    #[arg(long, default_value_t = 200_000)]
    pub n_oracle: usize,
    /// Draws from the limit law.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    /// `analytic` or `finite_difference`.
    #[arg(long, default_value = "analytic", value_parser = parse_enum::<CurvatureMethod>)]
    pub curvature: CurvatureMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_OUT)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GpsupArgs {
    /// Binary-treatment design JSON.
    #[arg(long)]
    pub dgp: String,
    #[arg(long, default_value_t = 200)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Simulated sample used for the kernels.
    #[arg(long, default_value_t = 100_000)]
    pub n_kernel: usize,
    /// Covariate thresholded by the grid; defaults to the first.
    #[arg(long)]
    pub column: Option<String>,
    /// `conditional_moments` or `empirical`.
    #[arg(long, default_value = "conditional_moments", value_parser = parse_enum::<KernelMethod>)]
    pub method: KernelMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = DEFAULT_OUT)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl Command {
    pub fn out(&self) -> &Path {
        match self {
            Command::Learn(a) => &a.out,
            Command::Weights(a) => &a.out,
            Command::Simulate(a) => &a.out,
            Command::Asymptotics(a) => &a.out,
            Command::Gpsup(a) => &a.out,
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Learn(a) => a.out = out,
            Command::Weights(a) => a.out = out,
            Command::Simulate(a) => a.out = out,
            Command::Asymptotics(a) => a.out = out,
            Command::Gpsup(a) => a.out = out,
        }
    }

    /// Runs the command and returns the seed that drove it.
    pub fn run(&self, inputs: &mut Inputs) -> Result<u64> {
        fs::create_dir_all(self.out())?;
        match self {
            Command::Learn(a) => learn(a, inputs).map(|_| a.seed),
            Command::Weights(a) => weights(a, inputs).map(|_| a.seed),
            Command::Simulate(a) => simulate(a, inputs),
            Command::Asymptotics(a) => asymptotics(a, inputs).map(|_| a.seed),
            Command::Gpsup(a) => gpsup(a, inputs).map(|_| a.seed),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PolicyChoice {
    BinaryLogistic,
    Softmax,
    GaussianLink,
}

fn default_true() -> bool {
    true
}

/// Policy family in terms of covariate names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyConfig {
    /// Defaults to binary logistic on two levels, softmax on more, and a
    /// Gaussian link on continuous spaces.
    #[serde(default)]
    kind: Option<PolicyChoice>,
    /// Covariates entering the index; defaults to all.
    #[serde(default)]
    features: Option<Vec<String>>,
    #[serde(default = "default_true")]
    intercept: bool,
    /// Subtracted from each feature.
    #[serde(default)]
    offsets: Vec<f64>,
    /// Defaults to the levels of the treatment space.
    #[serde(default)]
    levels: Option<Vec<f64>>,
    /// Standard deviation of the Gaussian link.
    #[serde(default)]
    sigma: Option<f64>,
}

const DEFAULT_SIGMA: f64 = 1.0;

impl PolicyConfig {
    fn empty() -> Self {
        PolicyConfig { kind: None, features: None, intercept: true, offsets: vec![], levels: None, sigma: None }
    }

    fn build(&self, space: &TreatmentSpace, names: &[String]) -> Result<PolicyFamily> {
        let columns = match &self.features {
            None => (0..names.len()).collect(),
            Some(f) => f
                .iter()
                .map(|c| {
                    names
                        .iter()
                        .position(|n| n == c)
                        .ok_or_else(|| Error::InvalidPolicy(format!("unknown feature `{c}`")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let features = FeatureMap::columns(self.intercept, columns, self.offsets.clone());
        let levels = self.levels.clone().or_else(|| space.levels().map(|l| l.to_vec()));
        let kind = self.kind.unwrap_or(match &levels {
            Some(l) if l.len() == 2 => PolicyChoice::BinaryLogistic,
            Some(_) => PolicyChoice::Softmax,
            None => PolicyChoice::GaussianLink,
        });
        let need_levels = || levels.clone().ok_or_else(|| Error::InvalidPolicy("discrete policy needs levels".into()));
        let kind = match kind {
            PolicyChoice::BinaryLogistic => match need_levels()?.as_slice() {
                [a, b] => PolicyKind::BinaryLogistic { levels: [*a, *b] },
                _ => return Err(Error::InvalidPolicy("binary logistic policy needs two levels".into())),
            },
            PolicyChoice::Softmax => PolicyKind::Softmax { levels: need_levels()? },
            PolicyChoice::GaussianLink => PolicyKind::GaussianLink { sigma: self.sigma.unwrap_or(DEFAULT_SIGMA) },
        };
        let family = PolicyFamily::new(kind, features)?;
        if family.space().levels() != space.levels() && family.is_discrete() {
            return Err(Error::InvalidPolicy("policy levels differ from the treatment space".into()));
        }
        Ok(family)
    }
}

fn policy_family(arg: Option<&str>, inputs: &mut Inputs, space: &TreatmentSpace, names: &[String]) -> Result<PolicyFamily> {
    let cfg = match arg {
        Some(a) => inputs.inline_or_file::<PolicyConfig>(a, "policy")?,
        None => PolicyConfig::empty(),
    };
    cfg.build(space, names)
}

fn estimator_config(
    arg: Option<&str>,
    kind: EstimatorKind,
    inputs: &mut Inputs,
) -> Result<EstimatorConfig> {
    let mut cfg = match arg {
        Some(a) => inputs.inline_or_file::<EstimatorConfig>(a, "estimator config")?,
        None => EstimatorConfig::new(kind),
    };
    if cfg.kind != kind {
        log::warn!("estimator config kind `{}` replaced by `{kind}`", cfg.kind);
        cfg.kind = kind;
    }
    Ok(cfg)
}

/// Compiles a density expression and checks it on every observation.
fn propensity_expr(source: &str, data: &Dataset) -> Result<CondDensity> {
    let expr = Arc::new(Expr::compile(source, data.names())?);
    for i in 0..data.n() {
        let v = expr.eval(data.t()[i], data.row(i))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidData(format!("propensity is {v} at observation {i}")));
        }
    }
    Ok(Arc::new(move |t, x| expr.eval(t, x).unwrap_or(0.0)))
}

#[derive(Serialize)]
struct BootstrapSummary {
    replications: usize,
    failures: usize,
    se: Vec<f64>,
    welfare_se: f64,
}

#[derive(Serialize)]
struct LearnOutput {
    estimator: String,
    n: usize,
    covariates: Vec<String>,
    policy: PolicyFamily,
    theta_hat: Vec<f64>,
    welfare_hat: f64,
    converged: bool,
    gradient_norm_at_opt: f64,
    at_boundary: bool,
    restarts_used: usize,
    bootstrap: Option<BootstrapSummary>,
}

fn optimizer(restarts: Option<usize>, seed: u64) -> MaximizeOptions {
    let mut o = MaximizeOptions { seed, ..Default::default() };
    if let Some(r) = restarts {
        o.restarts = r;
    }
    o
}

fn learn(a: &LearnArgs, inputs: &mut Inputs) -> Result<()> {
    if a.propensity_column.is_some() && (a.bootstrap > 0 || a.known_weights) {
        return Err(Error::Config("--propensity-column supports neither --bootstrap nor --known-weights".into()));
    }
    let exclude: Vec<&str> = a.propensity_column.iter().map(|s| s.as_str()).collect();
    let data = inputs.dataset(&a.data, &a.schema, &exclude)?;
    let family = policy_family(a.policy.as_deref(), inputs, data.space(), data.names())?;
    let mut cfg = estimator_config(a.estimator_config.as_deref(), a.estimator, inputs)?;
    cfg.known_weights |= a.known_weights;
    let propensity = a.propensity.as_deref().map(|s| propensity_expr(s, &data)).transpose()?;
    let opts = optimizer(a.restarts, derive_seed(a.seed, &[2]));

    let mut spec: Option<EstimatorSpec> = None;
    let objective = match (&a.propensity_column, a.estimator) {
        (Some(col), EstimatorKind::Tp) => {
            let f = inputs.column(&a.data, col)?;
            let f_min = cfg.f_min.unwrap_or(DEFAULT_F_MIN);
            if let Some(i) = f.iter().position(|&v| v < f_min) {
                return Err(Error::OverlapViolation { index: i, value: f[i], f_min });
            }
            let w = f.iter().map(|v| 1.0 / v).collect();
            WelfareObjective::from_parts(EstimatorKind::Tp, &data, &family, w, None)?
        }
        _ => {
            let s = cfg.build(&data, propensity, derive_seed(a.seed, &[1]))?;
            let obj = s.objective(&data, &family)?;
            spec = Some(s);
            obj
        }
    };
    let est = maximize_welfare(&objective, &opts)?;
    let bootstrap = match (&spec, a.bootstrap) {
        (Some(s), b) if b > 0 => {
            let r = bootstrap_se(&data, &family, s, &opts, b, derive_seed(a.seed, &[3]))?;
            Some(BootstrapSummary { replications: b, failures: r.failures, se: r.se, welfare_se: r.welfare_se })
        }
        _ => None,
    };

    let out = LearnOutput {
        estimator: cfg.label(),
        n: data.n(),
        covariates: data.names().to_vec(),
        policy: family.clone(),
        theta_hat: est.theta_hat.clone(),
        welfare_hat: est.welfare_hat,
        converged: est.converged,
        gradient_norm_at_opt: est.gradient_norm_at_opt,
        at_boundary: est.at_boundary,
        restarts_used: est.restarts_used,
        bootstrap,
    };
    write_json(&a.out.join("estimate.json"), &out)?;
    write_assignments(&a.out.join("assignments.csv"), &data, &family, &est.theta_hat)
}

/// Per-row arm probabilities, or the mean and spread of the action for
/// continuous policies.
fn write_assignments(path: &Path, data: &Dataset, family: &PolicyFamily, theta: &[f64]) -> Result<()> {
    let mut header = vec!["row".to_string()];
    match family.levels() {
        Some(levels) => header.extend(levels.iter().map(|l| format!("p_{l}"))),
        None => header.extend(["mean".to_string(), "sd".to_string()]),
    }
    let rows = (0..data.n()).map(|i| {
        let x = data.row(i);
        let mut r = vec![i.to_string()];
        match &family.kind {
            PolicyKind::GaussianLink { sigma } => {
                let phi = family.features.eval(x);
                let mean: f64 = phi.iter().zip(theta).map(|(a, b)| a * b).sum();
                r.push(mean.to_string());
                r.push(sigma.to_string());
            }
            _ => r.extend(family.arm_probs(theta, x).iter().map(|p| p.to_string())),
        }
        r
    });
    write_csv(path, &header, rows)
}

#[derive(Serialize)]
struct WeightsOutput {
    n: usize,
    converged: bool,
    iterations: usize,
    dual_value: f64,
    grad_norm: f64,
    /// Largest absolute entry of the balance residual matrix.
    balance_residual_max: f64,
    balance_residual_norm: f64,
    basis_t: BasisSpec,
    basis_x: BasisSpec,
    /// `Λ̂` with one row per treatment basis function.
    lambda: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn weights(a: &WeightsArgs, inputs: &mut Inputs) -> Result<()> {
    let data = inputs.dataset(&a.data, &a.schema, &[])?;
    let bt = match &a.basis_t {
        Some(s) => inputs.inline_or_file::<BasisSpec>(s, "basis-t")?,
        None => BasisSpec::default_treatment(data.space()),
    };
    let bx = match &a.basis_x {
        Some(s) => inputs.inline_or_file::<BasisSpec>(s, "basis-x")?,
        None => BasisSpec::default_covariate(data.d(), data.n()),
    };
    let mut opts = WeightOptions::default();
    if let Some(t) = a.tol {
        opts.tol_grad = t;
    }
    if let Some(m) = a.max_iter {
        opts.max_iter = m;
    }
    let (fit, failure) = match fit_weights_from_spec(&data, &bt, &bx, &opts) {
        Ok(f) => (f, None),
        Err(Error::WeightsNotConverged(f)) => {
            let fit: WeightFit = *f.clone();
            (fit, Some(Error::WeightsNotConverged(f)))
        }
        Err(e) => return Err(e),
    };
    let resid = balance_residual(&fit, &data)?;
    let out = WeightsOutput {
        n: data.n(),
        converged: fit.converged,
        iterations: fit.iterations,
        dual_value: fit.dual_value,
        grad_norm: fit.grad_norm,
        balance_residual_max: resid.amax(),
        balance_residual_norm: resid.norm(),
        basis_t: bt,
        basis_x: bx,
        lambda: rows_of(&fit.lambda),
    };
    write_json(&a.out.join("weights.json"), &out)?;
    let w = fit.evaluate_all(&data)?;
    write_csv(
        &a.out.join("weights.csv"),
        &["row".into(), "t".into(), "weight".into()],
        w.iter().enumerate().map(|(i, v)| vec![i.to_string(), data.t()[i].to_string(), v.to_string()]),
    )?;
    write_csv(
        &a.out.join("iterations.csv"),
        &["iter".into(), "dual".into(), "grad_norm".into(), "step".into(), "newton".into()],
        fit.history.iter().map(|r| {
            vec![r.iter.to_string(), r.dual.to_string(), r.grad_norm.to_string(), r.step.to_string(), r.newton.to_string()]
        }),
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Registers data files a design resamples from, so replays detect
/// changes.
fn record_design_files(spec: &DgpSpec, inputs: &mut Inputs) -> Result<()> {
    if let CovariateLaw::Bootstrap { path, .. } = &spec.covariates {
        inputs.data_bytes(&path.to_string_lossy())?;
    }
    Ok(())
}

fn simulate(a: &SimulateArgs, inputs: &mut Inputs) -> Result<u64> {
    let mut study: McStudy = inputs.config(&a.study)?;
    if let Some(s) = a.seed {
        study.seed = s;
    }
    if let Some(r) = a.replications {
        study.replications = r;
    }
    record_design_files(&study.dgp, inputs)?;
    let report = monte_carlo(&study)?;
    write_json(&a.out.join("report.json"), &report)?;
    report.write_draws_csv(a.out.join("regret_draws.csv"))?;
    report.write_histogram_csv(a.out.join("histogram.csv"), study.histogram_bins)?;
    Ok(study.seed)
}

#[derive(Serialize)]
struct AsymptoticsOutput {
    source: &'static str,
    estimator: EstimatorKind,
    n: usize,
    theta: Vec<f64>,
    #[serde(flatten)]
    report: AsymptoticReport,
}

fn zeros_like(h: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::zeros(h.nrows(), h.ncols())
}

fn asymptotics(a: &AsymptoticsArgs, inputs: &mut Inputs) -> Result<()> {
    let given = a.theta.as_deref().map(parse_theta).transpose()?;
    let (source, n, theta, h, v, s) = if let Some(path) = &a.dgp {
        let spec: DgpSpec = inputs.config(path)?;
        record_design_files(&spec, inputs)?;
        let dgp = Arc::new(CompiledDgp::compile(&spec)?);
        let family = policy_family(a.policy.as_deref(), inputs, dgp.space(), dgp.names())?;
        let data = dgp.sample(a.n_oracle, derive_seed(a.seed, &[1]))?.data;
        let theta = match given {
            Some(t) => t,
            None => {
                let test = OracleTestSample::new(&dgp, a.n_oracle, derive_seed(a.seed, &[2]))?;
                let opts = MaximizeOptions { restarts: 16, seed: derive_seed(a.seed, &[3]), ..Default::default() };
                oracle_optimum_on(&test, &family, &opts)?.theta
            }
        };
        let (dm, dw) = (dgp.clone(), dgp.propensity_density());
        let plug = PlugIn::oracle(move |t, x| dm.mean(t, x).unwrap_or(f64::NAN), move |t, x| 1.0 / dw(t, x));
        let f = dgp.propensity_density();
        let (h, v, s) = curvature_and_noise(&family, &theta, &data, &plug, a, &*f)?;
        ("dgp", data.n(), theta, h, v, s)
    } else {
        let path = a.data.as_deref().expect("clap requires --data or --dgp");
        let data = inputs.dataset(path, &a.schema, &[])?;
        let family = policy_family(a.policy.as_deref(), inputs, data.space(), data.names())?;
        let cfg = estimator_config(a.estimator_config.as_deref(), a.estimator, inputs)?;
        let propensity = a.propensity.as_deref().map(|p| propensity_expr(p, &data)).transpose()?;
        let fold_seed = derive_seed(a.seed, &[1]);
        let theta = match given {
            Some(t) => t,
            None => {
                let spec = cfg.build(&data, propensity.clone(), fold_seed)?;
                let obj = spec.objective(&data, &family)?;
                maximize_welfare(&obj, &optimizer(None, derive_seed(a.seed, &[2])))?.theta_hat
            }
        };
        let nuis_cfg = EstimatorConfig { kind: EstimatorKind::Dr, known_weights: false, ..cfg };
        let EstimatorSpec::Dr { folds, mean, weights, .. } = nuis_cfg.build(&data, None, fold_seed)? else {
            unreachable!("doubly robust config builds a doubly robust spec")
        };
        let cf = Arc::new(crossfit(&data, folds, fold_seed, &mean, &weights)?);
        let plug = PlugIn::from_crossfit(cf);
        let f: CondDensity = match (a.estimator, propensity) {
            (_, Some(p)) => p,
            (EstimatorKind::Tp, None) => {
                return Err(Error::Config("the true-propensity estimator needs --propensity".into()))
            }
            (_, None) => Arc::new(|_, _| f64::NAN),
        };
        let (h, v, s) = curvature_and_noise(&family, &theta, &data, &plug, a, &*f)?;
        ("data", data.n(), theta, h, v, s)
    };
    let (report, draws) = asymptotic_report(&h, &v, &s, a.draws, derive_seed(a.seed, &[4]))?;
    let out = AsymptoticsOutput { source, estimator: a.estimator, n, theta, report };
    write_json(&a.out.join("asymptotics.json"), &out)?;
    write_csv(
        &a.out.join("regret_draws.csv"),
        &["draw".into(), "n_times_regret".into()],
        draws.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}

type Triple = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// `Ĥ`, `V̂_eff` and the extra noise covariance of the chosen estimator.
fn curvature_and_noise(
    family: &PolicyFamily,
    theta: &[f64],
    data: &Dataset,
    plug: &PlugIn,
    a: &AsymptoticsArgs,
    propensity: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
) -> Result<Triple> {
    if theta.len() != family.dim_theta() {
        return Err(Error::Config(format!(
            "--theta has {} entries, the policy has {}",
            theta.len(),
            family.dim_theta()
        )));
    }
    let mean = plug.mean.clone();
    let h = estimate_h(family, theta, data, &move |i, t, x| mean(i, t, x), a.curvature)?;
    let tp = a.estimator == EstimatorKind::Tp;
    let infl = influence_sample(family, theta, data, plug, if tp { Some(propensity) } else { None })?;
    let v = estimate_veff(&h, &infl)?;
    let s = if tp { estimate_sigma_u_tp(&h, &infl)? } else { zeros_like(&h) };
    Ok((h, v, s))
}

#[derive(Serialize)]
struct GpsupOutput {
    design: String,
    column: String,
    threshold_lo: f64,
    threshold_hi: f64,
    grid_size: usize,
    draws: usize,
    n_kernel: usize,
    method: KernelMethod,
    e_sup_tp: f64,
    e_sup_ep: f64,
    se_tp: f64,
    se_ep: f64,
    se_diff: f64,
    max_increment_gap: f64,
    increment_tolerance: f64,
    increment_violations: usize,
}

fn gpsup(a: &GpsupArgs, inputs: &mut Inputs) -> Result<()> {
    let spec: DgpSpec = inputs.config(&a.dgp)?;
    record_design_files(&spec, inputs)?;
    let dgp = Arc::new(CompiledDgp::compile(&spec)?);
    let oracle = dgp.binary_oracle()?;
    let d = dgp.d();
    let column = match &a.column {
        Some(c) => dgp
            .names()
            .iter()
            .position(|n| n == c)
            .ok_or_else(|| Error::Config(format!("unknown covariate `{c}`")))?,
        None => 0,
    };
    let xs = dgp.sample_covariates(a.n_kernel, derive_seed(a.seed, &[1]));
    let col: Vec<f64> = xs.iter().skip(column).step_by(d).copied().collect();
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let grid = threshold_grid(column, lo, hi, a.grid_size);
    let r = gp_sup_compare(&grid, &xs, d, &oracle, a.method, a.draws, derive_seed(a.seed, &[2]))?;
    let out = GpsupOutput {
        design: spec.name.clone(),
        column: dgp.names()[column].clone(),
        threshold_lo: lo,
        threshold_hi: hi,
        grid_size: a.grid_size,
        draws: a.draws,
        n_kernel: a.n_kernel,
        method: a.method,
        e_sup_tp: r.e_sup_tp,
        e_sup_ep: r.e_sup_ep,
        se_tp: r.se_tp,
        se_ep: r.se_ep,
        se_diff: r.se_diff,
        max_increment_gap: r.max_increment_gap,
        increment_tolerance: r.increment_tolerance,
        increment_violations: r.increment_violations,
    };
    write_json(&a.out.join("gpsup.json"), &out)?;
    let mut w = fs::File::create(a.out.join("sups.csv"))?;
    writeln!(w, "draw,sup_tp,sup_ep")?;
    for (i, (t, e)) in r.sups_tp.iter().zip(&r.sups_ep).enumerate() {
        writeln!(w, "{i},{t},{e}")?;
    }
    Ok(())
}
