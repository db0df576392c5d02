//! Gauss–Legendre and Gauss–Hermite rules by the Golub–Welsch eigenvalue
//! method, with Newton polishing of the nodes.

use nalgebra::{DMatrix, SymmetricEigen};

pub const DEFAULT_NODES: usize = 64;

/// A rule `∫ g dμ ≈ Σ w_i g(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn jacobi_nodes(n: usize, offdiag: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = offdiag(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(j).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    nodes
}

/// Value and derivative of the degree-`n` Legendre polynomial.
fn legendre_pd(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Orthonormal probabilists' Hermite value and derivative at degree `n`,
/// `h_n = He_n / sqrt(n!)`, which stays bounded for large `n`.
fn hermite_pd(n: usize, x: f64) -> (f64, f64) {
    let (mut h0, mut h1) = (1.0, x);
    for k in 1..n {
        let kf = k as f64;
        let h2 = (x * h1 - kf.sqrt() * h0) / (kf + 1.0).sqrt();
        h0 = h1;
        h1 = h2;
    }
    (h1, (n as f64).sqrt() * h0)
}

impl QuadratureRule {
    /// `n`-point rule for Lebesgue measure on `[lo, hi]`, exact for
    /// polynomials of degree `2n - 1`.
    pub fn gauss_legendre(n: usize, lo: f64, hi: f64) -> Self {
        assert!(n >= 1);
        let mut nodes = jacobi_nodes(n, |k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        });
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            if n > 1 {
                for _ in 0..3 {
                    let (p, d) = legendre_pd(n, *x);
                    *x -= p / d;
                }
                let (_, d) = legendre_pd(n, *x);
                weights.push(2.0 / ((1.0 - *x * *x) * d * d));
            } else {
                weights.push(2.0);
            }
        }
        let (half, mid) = (0.5 * (hi - lo), 0.5 * (hi + lo));
        QuadratureRule {
            nodes: nodes.iter().map(|x| mid + half * x).collect(),
            weights: weights.iter().map(|w| w * half).collect(),
        }
    }

    /// `n`-point rule for the standard normal law, so `Σ w_i g(z_i)`
    /// approximates `E[g(Z)]`.
    pub fn gauss_hermite(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = jacobi_nodes(n, |k| (k as f64).sqrt());
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            if n > 1 {
                for _ in 0..3 {
                    let (h, d) = hermite_pd(n, *x);
                    *x -= h / d;
                }
                let (_, d) = hermite_pd(n, *x);
                // w_i = 1 / (n h_{n-1}(x_i)^2) in orthonormal scaling
                let hm1 = d / (n as f64).sqrt();
                weights.push(1.0 / (n as f64 * hm1 * hm1));
            } else {
                weights.push(1.0);
            }
        }
        let total: f64 = weights.iter().sum();
        QuadratureRule { nodes, weights: weights.iter().map(|w| w / total).collect() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let q = QuadratureRule::gauss_legendre(64, 0.0, 1.0);
        for k in 0..=40 {
            let v = q.integrate(|t| t.powi(k));
            assert!((v - 1.0 / (k as f64 + 1.0)).abs() < 1e-13, "k={k} v={v}");
        }
        let q = QuadratureRule::gauss_legendre(3, -2.0, 5.0);
        assert!((q.integrate(|t| t * t) - (125.0 + 8.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hermite_matches_normal_moments() {
        let q = QuadratureRule::gauss_hermite(64);
        let mut double_fact = 1.0;
        for k in 0..=20 {
            let even = q.integrate(|z| z.powi(2 * k));
            if k > 0 {
                double_fact *= (2 * k - 1) as f64;
            }
            assert!((even - double_fact).abs() < 1e-10 * double_fact, "k={k}");
            assert!(q.integrate(|z| z.powi(2 * k as i32 + 1)).abs() < 1e-8 * double_fact.max(1.0));
        }
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}
