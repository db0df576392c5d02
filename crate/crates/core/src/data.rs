//! Observed samples `(y, t, x)`, CSV ingestion and fold splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Support of the treatment. Discrete spaces use counting measure, the
/// continuous kinds use Lebesgue measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentSpace {
    Discrete { levels: Vec<f64> },
    Interval { lo: f64, hi: f64 },
    Line,
}

impl TreatmentSpace {
    pub fn binary() -> Self {
        TreatmentSpace::Discrete { levels: vec![0.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TreatmentSpace::Discrete { levels } => {
                if levels.len() < 2 {
                    return Err(Error::InvalidTreatmentSpace("need at least two levels".into()));
                }
                if levels.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidTreatmentSpace("levels must be finite".into()));
                }
                if levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidTreatmentSpace(
                        "levels must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            TreatmentSpace::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::InvalidTreatmentSpace(format!(
                        "interval needs finite lo < hi, got [{lo}, {hi}]"
                    )));
                }
                Ok(())
            }
            TreatmentSpace::Line => Ok(()),
        }
    }

    pub fn levels(&self) -> Option<&[f64]> {
        match self {
            TreatmentSpace::Discrete { levels } => Some(levels),
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, TreatmentSpace::Discrete { .. })
    }

    /// Index of the level equal to `t` (up to 1e-9 relative slack).
    pub fn level_index(&self, t: f64) -> Option<usize> {
        let levels = self.levels()?;
        levels.iter().position(|&l| (l - t).abs() <= 1e-9 * l.abs().max(1.0))
    }

    pub fn contains(&self, t: f64) -> bool {
        match self {
            TreatmentSpace::Discrete { .. } => self.level_index(t).is_some(),
            TreatmentSpace::Interval { lo, hi } => t.is_finite() && *lo <= t && t <= *hi,
            TreatmentSpace::Line => t.is_finite(),
        }
    }
}

/// Column names used to pull a [`Dataset`] out of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub y: String,
    pub t: String,
    pub x: Vec<String>,
}

/// An immutable validated sample. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<f64>,
    x: Vec<f64>,
    d: usize,
    space: TreatmentSpace,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, t: Vec<f64>, x: Vec<f64>, d: usize, space: TreatmentSpace) -> Result<Self> {
        let names = (1..=d).map(|j| format!("x{j}")).collect();
        Self::with_names(y, t, x, d, space, names)
    }

    pub fn with_names(
        y: Vec<f64>,
        t: Vec<f64>,
        mut x: Vec<f64>,
        d: usize,
        space: TreatmentSpace,
        names: Vec<String>,
    ) -> Result<Self> {
        space.validate()?;
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyFile);
        }
        if t.len() != n || x.len() != n * d {
            return Err(Error::InvalidData(format!(
                "length mismatch: y has {n}, t has {}, x has {} (expected {})",
                t.len(),
                x.len(),
                n * d
            )));
        }
        if names.len() != d {
            return Err(Error::InvalidData("one name per covariate is required".into()));
        }
        if d == 0 {
            x.clear();
        }
        if let Some(i) = y.iter().chain(&t).position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome or treatment at row {}", i % n)));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite covariate at row {}", i / d)));
        }
        let mut t = t;
        if let TreatmentSpace::Discrete { levels } = &space {
            for (i, ti) in t.iter_mut().enumerate() {
                match space.level_index(*ti) {
                    Some(k) => *ti = levels[k],
                    None => return Err(Error::TreatmentNotInLevels(i)),
                }
            }
        } else if let Some(i) = t.iter().position(|&v| !space.contains(v)) {
            return Err(Error::InvalidData(format!("row {i}: treatment outside the declared interval")));
        }
        Ok(Dataset { y, t, x, d, space, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// Row-major covariate matrix, `n * d` entries.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn space(&self) -> &TreatmentSpace {
        &self.space
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rows at `idx`, in the given order (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            y: idx.iter().map(|&i| self.y[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            x,
            d: self.d,
            space: self.space.clone(),
            names: self.names.clone(),
        }
    }

    /// Writes columns `y, t, <covariate names>`. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string(), "t".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.d + 2);
        for i in 0..self.n() {
            rec.clear();
            rec.push(self.y[i].to_string());
            rec.push(self.t[i].to_string());
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema { y: "y".into(), t: "t".into(), x: self.names.clone() }
    }
}

/// Reads a dataset, selecting columns by header name. Row order is kept.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, space: TreatmentSpace) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let iy = col(&schema.y)?;
    let it = col(&schema.t)?;
    let ix = schema.x.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let (mut y, mut t, mut x) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |j: usize, name: &str| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::NonNumericCell { row, col: name.to_string() })
        };
        y.push(cell(iy, &schema.y)?);
        t.push(cell(it, &schema.t)?);
        for (&j, name) in ix.iter().zip(&schema.x) {
            x.push(cell(j, name)?);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyFile);
    }
    Dataset::with_names(y, t, x, schema.x.len(), space, schema.x.clone())
}

/// Partition of `0..n` into `l` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub l: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.l];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Shuffles `0..n` with a seeded generator and deals the result round-robin.
pub fn split_folds(n: usize, l: usize, seed: u64) -> Result<FoldAssignment> {
    if l < 2 || l > n {
        return Err(Error::BadFoldCount { n, l });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0xF01D]));
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % l;
    }
    Ok(FoldAssignment { fold_of, l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema(x: &[&str]) -> CsvSchema {
        CsvSchema { y: "y".into(), t: "t".into(), x: x.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn loads_small_file() {
        let f = write("y,t,x1\n1,0,0.2\n3,1,0.8\n");
        let d = load_csv(f.path(), &schema(&["x1"]), TreatmentSpace::binary()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.y(), &[1.0, 3.0]);
        assert_eq!(d.t(), &[0.0, 1.0]);
        assert_eq!(d.row(1), &[0.8]);
    }

    #[test]
    fn rejects_bad_files() {
        let f = write("y,t,x1\n1,2,0.2\n");
        assert!(matches!(
            load_csv(f.path(), &schema(&["x1"]), TreatmentSpace::binary()),
            Err(Error::TreatmentNotInLevels(0))
        ));
        let f = write("y,t\n1,0\n");
        assert!(matches!(
            load_csv(f.path(), &schema(&["x1"]), TreatmentSpace::binary()),
            Err(Error::MissingColumn(c)) if c == "x1"
        ));
        let f = write("y,t,x1\n1,0,abc\n");
        assert!(matches!(
            load_csv(f.path(), &schema(&["x1"]), TreatmentSpace::binary()),
            Err(Error::NonNumericCell { row: 0, .. })
        ));
        let f = write("y,t,x1\n");
        assert!(matches!(
            load_csv(f.path(), &schema(&["x1"]), TreatmentSpace::binary()),
            Err(Error::EmptyFile)
        ));
    }

    #[test]
    fn space_validation() {
        assert!(TreatmentSpace::Discrete { levels: vec![1.0, 0.0] }.validate().is_err());
        assert!(TreatmentSpace::Discrete { levels: vec![1.0] }.validate().is_err());
        assert!(TreatmentSpace::Interval { lo: 1.0, hi: 1.0 }.validate().is_err());
        assert!(TreatmentSpace::Interval { lo: 0.0, hi: 1.0 }.validate().is_ok());
    }

    #[test]
    fn fold_examples() {
        let f = split_folds(10, 2, 7).unwrap();
        assert_eq!(f.sizes(), vec![5, 5]);
        let mut all: Vec<usize> = f.members(0).into_iter().chain(f.members(1)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut s = split_folds(7, 3, 1).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 3]);
        assert_eq!(split_folds(7, 3, 1).unwrap(), split_folds(7, 3, 1).unwrap());
        assert!(matches!(split_folds(5, 1, 0), Err(Error::BadFoldCount { .. })));
        assert!(matches!(split_folds(5, 6, 0), Err(Error::BadFoldCount { .. })));
    }

    proptest! {
        #[test]
        fn folds_balanced(n in 2usize..300, l in 2usize..12, seed in any::<u64>()) {
            prop_assume!(l <= n);
            let f = split_folds(n, l, seed).unwrap();
            let s = f.sizes();
            prop_assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            prop_assert_eq!(s.iter().sum::<usize>(), n);
            prop_assert_eq!(f, split_folds(n, l, seed).unwrap());
        }

        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec((any::<f64>(), 0u8..2, any::<f64>(), any::<f64>()), 1..40)
        ) {
            let rows: Vec<_> = rows.into_iter()
                .filter(|r| r.0.is_finite() && r.2.is_finite() && r.3.is_finite())
                .collect();
            prop_assume!(!rows.is_empty());
            let y = rows.iter().map(|r| r.0).collect();
            let t = rows.iter().map(|r| r.1 as f64).collect();
            let x = rows.iter().flat_map(|r| [r.2, r.3]).collect();
            let d = Dataset::new(y, t, x, 2, TreatmentSpace::binary()).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            d.write_csv(f.path()).unwrap();
            let back = load_csv(f.path(), &d.schema(), TreatmentSpace::binary()).unwrap();
            for (a, b) in d.y().iter().zip(back.y()).chain(d.x().iter().zip(back.x())) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(d.t(), back.t());
        }
    }
}
