use std::sync::Arc;

use effpolicy::data::{Dataset, TreatmentSpace};
use effpolicy::nuisance::MeanSpec;
use effpolicy::optim::MaximizeOptions;
use effpolicy::policy::{FeatureMap, PolicyFamily};
use effpolicy::rng::derive_seed;
use effpolicy::sieve::{BasisKind, BasisSpec};
use effpolicy::simlab::{
    benchmark_dgp, benchmark_estimators, benchmark_policy, benchmark_study, linear_effect_dgp, monte_carlo,
    replication_seed, CompiledDgp, OracleTestSample,
};
use effpolicy::welfare::{fit_policy, EstimatorConfig, EstimatorKind, WelfareObjective};

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn tp_objective_matches_hand_computed_ipw() {
    let x = vec![0.1, 0.4, 0.7, 0.9, 0.3];
    let t = vec![1.0, 0.0, 1.0, 0.0, 1.0];
    let y = vec![2.0, -1.0, 3.5, 0.5, 1.0];
    let data = Dataset::new(y.clone(), t.clone(), x.clone(), 1, TreatmentSpace::binary()).unwrap();
    let family = PolicyFamily::binary_logistic(FeatureMap::intercept_and_all(1)).unwrap();
    let prop = |x: f64| 0.3 + 0.4 * x;
    let f = move |t: f64, x: &[f64]| if t == 1.0 { prop(x[0]) } else { 1.0 - prop(x[0]) };
    let obj = WelfareObjective::tp(&data, &family, &f, 1e-3).unwrap();
    let theta = [0.2, -1.3];
    let mut expected = 0.0;
    for i in 0..5 {
        let pi1 = expit(theta[0] + theta[1] * x[i]);
        let pi = if t[i] == 1.0 { pi1 } else { 1.0 - pi1 };
        expected += pi * y[i] / f(t[i], &[x[i]]);
    }
    expected /= 5.0;
    let (value, _) = obj.value_grad(&theta).unwrap();
    assert!((value - expected).abs() < 1e-12, "{value} vs {expected}");
}

/// DR stays consistent when either nuisance is misspecified.
#[test]
fn dr_is_robust_to_one_misspecified_nuisance() {
    let spec = linear_effect_dgp();
    let dgp = Arc::new(CompiledDgp::compile(&spec).unwrap());
    let family = PolicyFamily::binary_logistic(FeatureMap::intercept_and_all(2)).unwrap();
    let theta = [0.3, 2.0, -1.5];
    let truth = OracleTestSample::new(&dgp, 400_000, 11).unwrap().welfare(&family, &theta).unwrap();
    let sample = dgp.sample(8000, 12).unwrap();
    let constant_x = BasisSpec::new(BasisKind::TotalDegree { degree: 0, max_terms: None });
    let rich_x = BasisSpec::new(BasisKind::TensorPolynomial { degrees: vec![1, 1] });

    // wrong mean (per-arm constants), true weights
    let mut known = EstimatorConfig::new(EstimatorKind::Dr);
    known.known_weights = true;
    known.mean = Some(MeanSpec { basis_t: BasisSpec::new(BasisKind::Indicator), basis_x: constant_x.clone(), ridge: None });
    // right mean, wrong weights (inverse arm frequencies)
    let mut freq = EstimatorConfig::new(EstimatorKind::Dr);
    freq.basis_t = Some(BasisSpec::new(BasisKind::Indicator));
    freq.basis_x = Some(constant_x);
    freq.mean = Some(MeanSpec { basis_t: BasisSpec::new(BasisKind::Indicator), basis_x: rich_x, ridge: None });

    for cfg in [known, freq] {
        let est = cfg.build(&sample.data, Some(dgp.propensity_density()), 5).unwrap();
        let value = est.objective(&sample.data, &family).unwrap().value_grad(&theta).unwrap().0;
        assert!((value - truth).abs() < 0.5, "{value} vs {truth}");
    }
}

/// Out-of-fold weights at the edge of the covariate range once blew up and
/// sent the DR policy to the parameter bound on these replications.
#[test]
fn dr_benchmark_fit_stays_interior_at_small_n() {
    let dgp = Arc::new(CompiledDgp::compile(&benchmark_dgp()).unwrap());
    let family = benchmark_policy();
    let dr = benchmark_estimators().into_iter().find(|c| c.kind == EstimatorKind::Dr).unwrap();
    for rep in [51, 138] {
        let seed = replication_seed(2024, rep, 500);
        let sample = dgp.sample(500, seed).unwrap();
        let spec = dr.build(&sample.data, None, derive_seed(seed, &[1, 2])).unwrap();
        let opts = MaximizeOptions { restarts: 4, seed: 3, ..Default::default() };
        let est = fit_policy(&sample.data, &family, &spec, &opts).unwrap();
        assert!(!est.at_boundary && (3.0..20.0).contains(&est.theta_hat[0]), "rep {rep}: {:?}", est.theta_hat);
    }
}

#[test]
fn monte_carlo_is_reproducible_and_replications_are_stable() {
    let mut small = benchmark_study(vec![200], 2, 100_000, 9);
    small.optimizer.restarts = 2;
    small.oracle_optimizer = Some(MaximizeOptions { restarts: 2, ..Default::default() });
    let a = monte_carlo(&small).unwrap();
    let b = monte_carlo(&small).unwrap();
    assert_eq!(a, b);

    // adding replications leaves existing ones unchanged
    let mut more = small.clone();
    more.replications = 3;
    let c = monte_carlo(&more).unwrap();
    for (ca, cc) in a.cells.iter().zip(&c.cells) {
        for (da, dc) in ca.draws.iter().zip(&cc.draws) {
            assert_eq!((da.rep, da.welfare, &da.theta), (dc.rep, dc.welfare, &dc.theta));
        }
        assert_eq!(cc.draws.len(), 3);
    }
}
