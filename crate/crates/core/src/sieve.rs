//! Finite sieve bases for treatments and covariates.
//!
//! A [`Basis`] evaluates `transform · raw(point)`. Raw functions are
//! indicators of discrete levels, shifted Legendre polynomials, or
//! monomials (tensor or total-degree). Orthonormalization replaces the
//! transform by `G^{-1/2} · transform`, with `G` the Gram matrix under
//! either the analytic dominating measure of the treatment space or the
//! empirical distribution of a covariate sample.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::TreatmentSpace;
use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;

pub const GRAM_EIG_MIN: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    /// One indicator per level of a discrete treatment (saturated).
    Indicator,
    /// Shifted Legendre polynomials of degree `0..=degree` on a 1-d domain.
    ShiftedLegendre { degree: usize },
    /// Products of per-coordinate monomials, `x_j^{e_j}` with `e_j ≤ degrees[j]`.
    TensorPolynomial { degrees: Vec<usize> },
    /// Monomials of total degree at most `degree` in graded order,
    /// truncated to the first `max_terms`.
    TotalDegree {
        degree: usize,
        #[serde(default)]
        max_terms: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisDomain {
    Treatment(TreatmentSpace),
    Covariate { dim: usize },
}

impl BasisDomain {
    fn dim(&self) -> usize {
        match self {
            BasisDomain::Treatment(_) => 1,
            BasisDomain::Covariate { dim } => *dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    domain: BasisDomain,
    kind: BasisKind,
    exponents: Vec<Vec<u32>>,
    transform: DMatrix<f64>,
    center: Vec<f64>,
    scale: Vec<f64>,
}

/// Measure used by [`Basis::orthonormalize`].
pub enum Measure<'a> {
    /// Counting measure on discrete levels or Lebesgue measure on an interval.
    Analytic,
    /// Empirical distribution of row-major points.
    Empirical(&'a [f64]),
}

fn tensor_exponents(degrees: &[usize]) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    // first coordinate varies fastest
    for &dj in degrees {
        let mut next = Vec::with_capacity(out.len() * (dj + 1));
        for e in 0..=dj as u32 {
            for prefix in &out {
                let mut v: Vec<u32> = prefix.clone();
                v.push(e);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn total_degree_exponents(d: usize, degree: usize, cap: Option<usize>) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut level = Vec::new();
        graded(d, total, &mut vec![], &mut level);
        out.extend(level);
    }
    if let Some(c) = cap {
        out.truncate(c.max(1));
    }
    out
}

// exponent vectors of the given total in lexicographically decreasing
// order, so x1^2 comes before x1 x2 before x2^2
fn graded(d: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == d {
        let mut v = prefix.clone();
        v.push(remaining);
        out.push(v);
        return;
    }
    if d == 0 {
        out.push(vec![]);
        return;
    }
    for e in (0..=remaining).rev() {
        prefix.push(e);
        graded(d, remaining - e, prefix, out);
        prefix.pop();
    }
}

fn shifted_legendre(s: f64, degree: usize, out: &mut [f64]) {
    let x = 2.0 * s - 1.0;
    out[0] = 1.0;
    if degree >= 1 {
        out[1] = x;
    }
    for k in 2..=degree {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// Builds a raw basis with identity transform.
pub fn build_basis(domain: BasisDomain, kind: BasisKind) -> Result<Basis> {
    if let BasisDomain::Treatment(space) = &domain {
        space.validate()?;
    }
    let d = domain.dim();
    let (k, exponents) = match (&kind, &domain) {
        (BasisKind::Indicator, BasisDomain::Treatment(TreatmentSpace::Discrete { levels })) => {
            (levels.len(), vec![])
        }
        (BasisKind::Indicator, BasisDomain::Treatment(_)) => return Err(Error::IndicatorOnContinuous),
        (BasisKind::Indicator, BasisDomain::Covariate { .. }) => {
            return Err(Error::InvalidArgument("indicator bases are for discrete treatments".into()))
        }
        (BasisKind::ShiftedLegendre { degree }, _) => {
            if d != 1 {
                return Err(Error::InvalidArgument("shifted Legendre bases need a 1-d domain".into()));
            }
            if matches!(domain, BasisDomain::Treatment(TreatmentSpace::Line)) {
                return Err(Error::InvalidArgument(
                    "shifted Legendre bases need a bounded treatment space".into(),
                ));
            }
            (degree + 1, vec![])
        }
        (BasisKind::TensorPolynomial { degrees }, _) => {
            if degrees.len() != d {
                return Err(Error::InvalidArgument(format!(
                    "tensor basis has {} degrees for a {d}-dimensional domain",
                    degrees.len()
                )));
            }
            let e = tensor_exponents(degrees);
            (e.len(), e)
        }
        (BasisKind::TotalDegree { degree, max_terms }, _) => {
            let e = total_degree_exponents(d, *degree, *max_terms);
            (e.len(), e)
        }
    };
    Ok(Basis {
        domain,
        kind,
        exponents,
        transform: DMatrix::identity(k, k),
        center: vec![0.0; d],
        scale: vec![1.0; d],
    })
}

impl Basis {
    pub fn k(&self) -> usize {
        self.transform.nrows()
    }

    pub fn domain(&self) -> &BasisDomain {
        &self.domain
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Evaluates monomials at `(x - center) / scale`.
    pub fn with_standardization(mut self, center: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let d = self.domain.dim();
        if center.len() != d || scale.len() != d || scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("standardization needs one center and positive scale per coordinate".into()));
        }
        self.center = center;
        self.scale = scale;
        Ok(self)
    }

    /// Left-multiplies the current transform by `a`.
    pub fn with_transform(mut self, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != self.k() {
            return Err(Error::InvalidArgument("transform has the wrong number of columns".into()));
        }
        self.transform = a * &self.transform;
        Ok(self)
    }

    /// Whether raw function `j` is constant.
    pub fn raw_is_constant(&self, j: usize) -> bool {
        match &self.kind {
            BasisKind::Indicator => false,
            BasisKind::ShiftedLegendre { .. } => j == 0,
            _ => self.exponents[j].iter().all(|&e| e == 0),
        }
    }

    fn raw_len(&self) -> usize {
        self.transform.ncols()
    }

    fn raw_into(&self, point: &[f64], out: &mut [f64]) -> Result<()> {
        if point.len() != self.domain.dim() {
            return Err(Error::PointOutOfDomain(format!(
                "expected {} coordinates, got {}",
                self.domain.dim(),
                point.len()
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::PointOutOfDomain("non-finite coordinate".into()));
        }
        if let BasisDomain::Treatment(space) = &self.domain {
            if !space.contains(point[0]) {
                return Err(Error::PointOutOfDomain(format!("treatment {} not in {space:?}", point[0])));
            }
        }
        match &self.kind {
            BasisKind::Indicator => {
                let BasisDomain::Treatment(space) = &self.domain else { unreachable!() };
                let k = space.level_index(point[0]).expect("checked above");
                out.fill(0.0);
                out[k] = 1.0;
            }
            BasisKind::ShiftedLegendre { degree } => {
                let (a, b) = match &self.domain {
                    BasisDomain::Treatment(TreatmentSpace::Interval { lo, hi }) => (*lo, *hi),
                    BasisDomain::Treatment(TreatmentSpace::Discrete { levels }) => {
                        (levels[0], levels[levels.len() - 1])
                    }
                    _ => (self.center[0], self.center[0] + self.scale[0]),
                };
                shifted_legendre((point[0] - a) / (b - a), *degree, out);
            }
            _ => {
                let z: Vec<f64> = point
                    .iter()
                    .zip(self.center.iter().zip(&self.scale))
                    .map(|(v, (c, s))| (v - c) / s)
                    .collect();
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = e.iter().zip(&z).map(|(&p, &v)| v.powi(p as i32)).product();
                }
            }
        }
        Ok(())
    }

    /// Evaluates the basis at a point (`&[t]` for treatment bases).
    pub fn eval(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.k()];
        self.eval_into(point, &mut out)?;
        Ok(out)
    }

    pub fn eval_t(&self, t: f64) -> Result<Vec<f64>> {
        self.eval(&[t])
    }

    pub fn eval_into(&self, point: &[f64], out: &mut [f64]) -> Result<()> {
        let mut raw = vec![0.0; self.raw_len()];
        self.raw_into(point, &mut raw)?;
        let v = &self.transform * DVector::from_vec(raw);
        out.copy_from_slice(v.as_slice());
        Ok(())
    }

    /// Evaluates at every row of a row-major matrix; result is `n × K`.
    pub fn eval_rows(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.domain.dim();
        let n = if d == 0 { 0 } else { points.len() / d };
        let mut raw = DMatrix::zeros(n, self.raw_len());
        let mut buf = vec![0.0; self.raw_len()];
        for i in 0..n {
            self.raw_into(&points[i * d..(i + 1) * d], &mut buf)?;
            for (j, v) in buf.iter().enumerate() {
                raw[(i, j)] = *v;
            }
        }
        Ok(raw * self.transform.transpose())
    }

    fn treatment_rule(&self) -> Result<Option<QuadratureRule>> {
        match &self.domain {
            BasisDomain::Treatment(TreatmentSpace::Discrete { .. }) => Ok(None),
            BasisDomain::Treatment(TreatmentSpace::Interval { lo, hi }) => {
                let deg = match &self.kind {
                    BasisKind::ShiftedLegendre { degree } => *degree,
                    _ => self.exponents.iter().map(|e| e[0] as usize).max().unwrap_or(0),
                };
                Ok(Some(QuadratureRule::gauss_legendre(64 + deg, *lo, *hi)))
            }
            BasisDomain::Treatment(TreatmentSpace::Line) => Err(Error::InvalidArgument(
                "the real line has infinite Lebesgue mass; use a bounded treatment space".into(),
            )),
            BasisDomain::Covariate { .. } => Err(Error::InvalidArgument(
                "analytic measure is only defined for treatment bases".into(),
            )),
        }
    }

    /// `∫ u(t) dt` under the dominating measure of the treatment space.
    pub fn integrate_u(&self) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.k()];
        match self.treatment_rule()? {
            None => {
                let BasisDomain::Treatment(space) = &self.domain else { unreachable!() };
                for &l in space.levels().unwrap() {
                    for (a, v) in acc.iter_mut().zip(self.eval_t(l)?) {
                        *a += v;
                    }
                }
            }
            Some(q) => {
                for (&t, &w) in q.nodes.iter().zip(&q.weights) {
                    for (a, v) in acc.iter_mut().zip(self.eval_t(t)?) {
                        *a += w * v;
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Gram matrix of the current functions under `measure`.
    pub fn gram(&self, measure: &Measure) -> Result<DMatrix<f64>> {
        let k = self.k();
        match measure {
            Measure::Analytic => {
                let (pts, wts): (Vec<f64>, Vec<f64>) = match self.treatment_rule()? {
                    None => {
                        let BasisDomain::Treatment(space) = &self.domain else { unreachable!() };
                        let l = space.levels().unwrap().to_vec();
                        let w = vec![1.0; l.len()];
                        (l, w)
                    }
                    Some(q) => (q.nodes, q.weights),
                };
                let mut g = DMatrix::zeros(k, k);
                for (&t, &w) in pts.iter().zip(&wts) {
                    let v = DVector::from_vec(self.eval_t(t)?);
                    g += w * &v * v.transpose();
                }
                Ok(g)
            }
            Measure::Empirical(points) => {
                let b = self.eval_rows(points)?;
                let n = b.nrows();
                if n == 0 {
                    return Err(Error::InvalidArgument("empty sample".into()));
                }
                Ok(b.tr_mul(&b) / n as f64)
            }
        }
    }

    /// Returns a basis whose Gram matrix under `measure` is the identity.
    pub fn orthonormalize(&self, measure: &Measure) -> Result<Basis> {
        let g = self.gram(measure)?;
        let eig = SymmetricEigen::new(g);
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min >= GRAM_EIG_MIN) {
            return Err(Error::SingularGram { min_eig: min });
        }
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        let mut out = self.clone();
        out.transform = w * &self.transform;
        Ok(out)
    }
}

/// Configuration for building a basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    #[serde(flatten)]
    pub kind: BasisKind,
    /// Center and scale covariates by their sample mean and standard
    /// deviation before forming monomials.
    #[serde(default)]
    pub standardize: bool,
}

impl BasisSpec {
    pub fn new(kind: BasisKind) -> Self {
        BasisSpec { kind, standardize: false }
    }

    /// Levels count for discrete spaces (saturated), degree-3 Legendre
    /// otherwise.
    pub fn default_treatment(space: &TreatmentSpace) -> Self {
        match space {
            TreatmentSpace::Discrete { .. } => BasisSpec::new(BasisKind::Indicator),
            _ => BasisSpec::new(BasisKind::ShiftedLegendre { degree: 3 }),
        }
    }

    /// Total degree 2 truncated to `min(1 + d + d(d+1)/2, ⌊n^{1/3}⌋)` terms.
    pub fn default_covariate(d: usize, n: usize) -> Self {
        let full = 1 + d + d * (d + 1) / 2;
        let cube = (n as f64).cbrt().floor() as usize;
        BasisSpec {
            kind: BasisKind::TotalDegree { degree: 2, max_terms: Some(full.min(cube).max(1)) },
            standardize: true,
        }
    }
}

fn column_moments(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d.max(1);
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for j in 0..d {
        let m = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (x[i * d + j] - m).powi(2)).sum::<f64>() / n as f64;
        mean[j] = m;
        sd[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

/// Raw covariate basis, standardized from `x` when `spec.standardize` is set.
pub fn raw_covariate_basis(spec: &BasisSpec, x: &[f64], d: usize) -> Result<Basis> {
    let b = build_basis(BasisDomain::Covariate { dim: d }, spec.kind.clone())?;
    if spec.standardize && d > 0 && !x.is_empty() {
        let (c, s) = column_moments(x, d);
        return b.with_standardization(c, s);
    }
    Ok(b)
}

/// Treatment basis orthonormal under the analytic measure of `space`.
pub fn treatment_basis(spec: &BasisSpec, space: &TreatmentSpace) -> Result<Basis> {
    build_basis(BasisDomain::Treatment(space.clone()), spec.kind.clone())?.orthonormalize(&Measure::Analytic)
}

/// Covariate basis orthonormal under the empirical law of `x`.
pub fn covariate_basis(spec: &BasisSpec, x: &[f64], d: usize) -> Result<Basis> {
    raw_covariate_basis(spec, x, d)?.orthonormalize(&Measure::Empirical(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> TreatmentSpace {
        TreatmentSpace::Interval { lo: 0.0, hi: 1.0 }
    }

    fn max_abs_dev_from_identity(g: &DMatrix<f64>) -> f64 {
        (g - DMatrix::identity(g.nrows(), g.ncols())).abs().max()
    }

    #[test]
    fn build_examples() {
        let b = build_basis(BasisDomain::Treatment(TreatmentSpace::binary()), BasisKind::Indicator).unwrap();
        assert_eq!(b.k(), 2);
        assert_eq!(b.eval_t(0.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval_t(1.0).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(b.eval_t(0.5), Err(Error::PointOutOfDomain(_))));
        assert_eq!(b.integrate_u().unwrap(), vec![1.0, 1.0]);

        let b = build_basis(BasisDomain::Treatment(unit()), BasisKind::ShiftedLegendre { degree: 2 }).unwrap();
        assert_eq!(b.k(), 3);
        assert!(matches!(
            build_basis(BasisDomain::Treatment(unit()), BasisKind::Indicator),
            Err(Error::IndicatorOnContinuous)
        ));

        let b = build_basis(BasisDomain::Covariate { dim: 2 }, BasisKind::TensorPolynomial { degrees: vec![1, 1] })
            .unwrap();
        assert_eq!(b.k(), 4);
        assert_eq!(b.eval(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.eval(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn total_degree_order_and_cap() {
        let b = build_basis(BasisDomain::Covariate { dim: 2 }, BasisKind::TotalDegree { degree: 2, max_terms: None })
            .unwrap();
        assert_eq!(b.eval(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        let b = build_basis(BasisDomain::Covariate { dim: 3 }, BasisKind::TotalDegree { degree: 2, max_terms: Some(5) })
            .unwrap();
        assert_eq!(b.k(), 5);
        let s = BasisSpec::default_covariate(2, 1000);
        assert_eq!(s.kind, BasisKind::TotalDegree { degree: 2, max_terms: Some(6) });
        let s = BasisSpec::default_covariate(2, 100);
        assert_eq!(s.kind, BasisKind::TotalDegree { degree: 2, max_terms: Some(4) });
    }

    #[test]
    fn legendre_moments() {
        let raw = build_basis(BasisDomain::Treatment(unit()), BasisKind::TensorPolynomial { degrees: vec![1] }).unwrap();
        let iu = raw.integrate_u().unwrap();
        assert!((iu[0] - 1.0).abs() < 1e-15 && (iu[1] - 0.5).abs() < 1e-15);

        // closed-form Gram of {1, t} on [0,1] is [[1, 1/2], [1/2, 1/3]]
        let g = raw.gram(&Measure::Analytic).unwrap();
        let oracle = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0 / 3.0]);
        assert!((g - oracle).abs().max() < 1e-15);
        let o = raw.orthonormalize(&Measure::Analytic).unwrap();
        assert!(max_abs_dev_from_identity(&o.gram(&Measure::Analytic).unwrap()) < 1e-10);

        let sl = treatment_basis(&BasisSpec::new(BasisKind::ShiftedLegendre { degree: 4 }), &unit()).unwrap();
        let v = sl.eval_t(0.5).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let iu = sl.integrate_u().unwrap();
        assert!((iu[0] - 1.0).abs() < 1e-12);
        assert!(iu[1..].iter().all(|v| v.abs() < 1e-12));
        // already orthonormal: transform equals sqrt(2k+1) scaling
        for k in 0..5 {
            assert!((sl.transform()[(k, k)] - ((2 * k + 1) as f64).sqrt()).abs() < 1e-10);
        }
        let again = sl.orthonormalize(&Measure::Analytic).unwrap();
        assert!((again.transform() - sl.transform()).abs().max() < 1e-10);
    }

    #[test]
    fn singular_gram_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..30).flat_map(|_| { let a: f64 = rng.random(); [a, 2.0 * a] }).collect();
        let b = build_basis(BasisDomain::Covariate { dim: 2 }, BasisKind::TotalDegree { degree: 1, max_terms: None })
            .unwrap();
        assert!(matches!(b.orthonormalize(&Measure::Empirical(&x)), Err(Error::SingularGram { .. })));
        let line = build_basis(BasisDomain::Treatment(TreatmentSpace::Line), BasisKind::TensorPolynomial { degrees: vec![2] })
            .unwrap();
        assert!(line.integrate_u().is_err());
    }

    #[test]
    fn empirical_orthonormalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let spec = BasisSpec::new(BasisKind::TensorPolynomial { degrees: vec![2, 2] });
        let b = covariate_basis(&spec, &x, 2).unwrap();
        assert!(max_abs_dev_from_identity(&b.gram(&Measure::Empirical(&x)).unwrap()) < 1e-8);
        let spec = BasisSpec { standardize: true, ..spec };
        let b = covariate_basis(&spec, &x, 2).unwrap();
        assert!(max_abs_dev_from_identity(&b.gram(&Measure::Empirical(&x)).unwrap()) < 1e-8);
    }

    proptest! {
        #[test]
        fn gram_identity_after_orthonormalization(seed in any::<u64>(), deg in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..50 * 2).map(|_| rng.random::<f64>()).collect();
            let spec = BasisSpec::new(BasisKind::TotalDegree { degree: deg, max_terms: None });
            let b = covariate_basis(&spec, &x, 2).unwrap();
            prop_assert!(max_abs_dev_from_identity(&b.gram(&Measure::Empirical(&x)).unwrap()) < 1e-8);
        }

        #[test]
        fn transforms_compose(a in prop::collection::vec(-2.0f64..2.0, 9), t in 0.0f64..1.0) {
            let b = build_basis(BasisDomain::Treatment(unit()), BasisKind::ShiftedLegendre { degree: 2 }).unwrap();
            let a = DMatrix::from_row_slice(3, 3, &a);
            let composed = b.clone().with_transform(&a).unwrap();
            let direct = &a * DVector::from_vec(b.eval_t(t).unwrap());
            let v = composed.eval_t(t).unwrap();
            for k in 0..3 {
                prop_assert!((v[k] - direct[k]).abs() < 1e-12);
            }
        }
    }
}
