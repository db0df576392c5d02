//! Closed-form expressions for designs and propensities.
//!
//! Variables: `t`, `x1`..`xd` (1-based), and any declared column names.
//! Functions beyond the arithmetic built-ins: `exp`, `ln`, `sqrt`,
//! `expit` (alias `logistic`), `normpdf(z)`. Note that `log(v)` is base 10.

use fasteval::{Compiler, Evaler, Instruction, Parser, Slab};

use crate::error::{Error, Result};

pub struct Expr {
    source: String,
    slab: Slab,
    instr: Instruction,
    names: Vec<String>,
}

impl std::fmt::Debug for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Expr").field(&self.source).finish()
    }
}

pub fn expit(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Expr {
    /// Compiles `source`. `names` are optional aliases for covariate columns,
    /// in covariate order.
    pub fn compile(source: &str, names: &[String]) -> Result<Self> {
        let mut slab = Slab::new();
        let parsed = Parser::new()
            .parse(source, &mut slab.ps)
            .map_err(|e| Error::Expression { expr: source.to_string(), msg: format!("{e:?}") })?;
        let instr = parsed.from(&slab.ps).compile(&slab.ps, &mut slab.cs);
        let expr = Expr { source: source.to_string(), slab, instr, names: names.to_vec() };
        Ok(expr)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates at treatment `t` and covariates `x`; unknown names fail.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        let mut missing: Option<String> = None;
        let names = &self.names;
        let mut ns = |name: &str, args: Vec<f64>| -> Option<f64> {
            let r = lookup(name, &args, t, x, names);
            if r.is_none() && missing.is_none() {
                missing = Some(name.to_string());
            }
            r
        };
        let v = self.instr.eval(&self.slab, &mut ns);
        match v {
            Ok(v) => Ok(v),
            Err(e) => Err(Error::Expression {
                expr: self.source.clone(),
                msg: match missing {
                    Some(n) => format!("unknown name or bad arguments `{n}`"),
                    None => format!("{e:?}"),
                },
            }),
        }
    }
}

fn lookup(name: &str, args: &[f64], t: f64, x: &[f64], names: &[String]) -> Option<f64> {
    match (name, args.len()) {
        ("t", 0) => return Some(t),
        ("exp", 1) => return Some(args[0].exp()),
        ("ln", 1) => return Some(args[0].ln()),
        ("sqrt", 1) => return Some(args[0].sqrt()),
        ("expit" | "logistic", 1) => return Some(expit(args[0])),
        ("normpdf", 1) => {
            return Some((-0.5 * args[0] * args[0]).exp() / (2.0 * std::f64::consts::PI).sqrt())
        }
        _ => {}
    }
    if !args.is_empty() {
        return None;
    }
    if let Some(rest) = name.strip_prefix('x') {
        if let Ok(j) = rest.parse::<usize>() {
            if j >= 1 && j <= x.len() {
                return Some(x[j - 1]);
            }
        }
    }
    names.iter().position(|n| n == name).and_then(|j| x.get(j).copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variables_and_functions() {
        let e = Expr::compile("10 + 5*(x1 - x2) + t*expit(0)", &[]).unwrap();
        assert_eq!(e.eval(2.0, &[0.5, 0.25]).unwrap(), 10.0 + 1.25 + 1.0);
        let e = Expr::compile("exp(ln(3)) + sqrt(16) + edu", &["age".into(), "edu".into()]).unwrap();
        assert!((e.eval(0.0, &[30.0, 12.0]).unwrap() - 19.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_name_is_reported() {
        let e = Expr::compile("x3 + 1", &[]).unwrap();
        let err = e.eval(0.0, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("x3"));
        assert!(Expr::compile("1 +* (", &[]).is_err());
    }

    #[test]
    fn expit_is_stable() {
        assert_eq!(expit(0.0), 0.5);
        assert!(expit(-800.0) >= 0.0 && expit(800.0) == 1.0);
    }
}
