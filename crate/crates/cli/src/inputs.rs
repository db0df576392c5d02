//! Reading configs and data files, and the run manifest that lets a run
//! be replayed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use effpolicy::data::{CsvSchema, Dataset, TreatmentSpace};
use effpolicy::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;

/// Most distinct treatment values for which `--space auto` picks a
/// discrete space.
const AUTO_LEVELS_MAX: usize = 10;

/// A file consumed by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub sha256: String,
    /// Parsed contents of JSON configs; data files are only hashed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub command: Command,
    pub inputs: BTreeMap<String, InputRecord>,
}

/// Resolves input paths. In replay mode configs come from the manifest
/// and data files must hash to the recorded digest.
#[derive(Default)]
pub struct Inputs {
    recorded: BTreeMap<String, InputRecord>,
    replay: Option<BTreeMap<String, InputRecord>>,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_bytes(path: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidData(format!("cannot read `{path}`: {e}")))
}

/// Deserializes with the failing field path in the message.
pub fn from_value<T: DeserializeOwned>(v: serde_json::Value, what: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{what}: at `{path}`: {}", e.inner()))
    })
}

pub fn parse_json_text(text: &str, what: &str) -> Result<serde_json::Value> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl Inputs {
    pub fn fresh() -> Self {
        Inputs::default()
    }

    pub fn replaying(manifest: &Manifest) -> Self {
        Inputs { recorded: BTreeMap::new(), replay: Some(manifest.inputs.clone()) }
    }

    pub fn into_records(self) -> BTreeMap<String, InputRecord> {
        self.recorded
    }

    /// Reads a JSON config file into `T`.
    pub fn config<T: DeserializeOwned>(&mut self, path: &str) -> Result<T> {
        let value = match &self.replay {
            Some(m) => m
                .get(path)
                .and_then(|r| r.json.clone())
                .ok_or_else(|| Error::Config(format!("manifest has no contents for `{path}`")))?,
            None => {
                let bytes = read_bytes(path)?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Config(format!("`{path}` is not UTF-8 text")))?;
                parse_json_text(&text, path)?
            }
        };
        let canonical = serde_json::to_vec(&value).map_err(|e| Error::Config(e.to_string()))?;
        self.recorded
            .insert(path.to_string(), InputRecord { sha256: digest(&canonical), json: Some(value.clone()) });
        from_value(value, path)
    }

    /// A JSON value given inline (starting with `{`) or as a file path.
    pub fn inline_or_file<T: DeserializeOwned>(&mut self, arg: &str, what: &str) -> Result<T> {
        if arg.trim_start().starts_with('{') {
            from_value(parse_json_text(arg, what)?, what)
        } else {
            self.config(arg)
        }
    }

    /// Reads a data file, checking it against the manifest when replaying.
    pub fn data_bytes(&mut self, path: &str) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        let sha = digest(&bytes);
        if let Some(m) = &self.replay {
            match m.get(path) {
                Some(r) if r.sha256 == sha => {}
                Some(_) => return Err(Error::InvalidData(format!("`{path}` changed since the recorded run"))),
                None => return Err(Error::InvalidData(format!("manifest does not list `{path}`"))),
            }
        }
        self.recorded.insert(path.to_string(), InputRecord { sha256: sha, json: None });
        Ok(bytes)
    }

    /// Loads a dataset with the given schema. Empty `x` selects every
    /// column other than the outcome, treatment and `exclude`.
    pub fn dataset(&mut self, path: &str, schema: &SchemaArgs, exclude: &[&str]) -> Result<Dataset> {
        let bytes = self.data_bytes(path)?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let x = if schema.x.is_empty() {
            headers
                .iter()
                .filter(|h| **h != schema.y && **h != schema.t && !exclude.contains(&h.as_str()))
                .cloned()
                .collect()
        } else {
            schema.x.clone()
        };
        let csv_schema = CsvSchema { y: schema.y.clone(), t: schema.t.clone(), x };
        let loose = effpolicy::data::load_csv(Path::new(path), &csv_schema, TreatmentSpace::Line)?;
        let space = parse_space(&schema.space, loose.t())?;
        Dataset::with_names(
            loose.y().to_vec(),
            loose.t().to_vec(),
            loose.x().to_vec(),
            loose.d(),
            space,
            loose.names().to_vec(),
        )
    }

    /// One numeric column of a data file, in row order.
    pub fn column(&mut self, path: &str, name: &str) -> Result<Vec<f64>> {
        let bytes = self.data_bytes(path)?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
        let j = rdr
            .headers()?
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        rdr.records()
            .enumerate()
            .map(|(row, rec)| {
                let rec = rec?;
                rec.get(j)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::NonNumericCell { row, col: name.to_string() })
            })
            .collect()
    }
}

/// Column selection and treatment space for CSV inputs.
#[derive(Debug, Clone, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct SchemaArgs {
    /// Outcome column.
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Treatment column.
    #[arg(long, default_value = "t")]
    pub t: String,
    /// Covariate columns, comma separated; defaults to all others.
    #[arg(long, value_delimiter = ',')]
    pub x: Vec<String>,
    /// `auto`, `binary`, `discrete:a,b,..`, `interval:lo,hi` or `line`.
    #[arg(long, default_value = "auto")]
    pub space: String,
}

fn parse_numbers(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("`{v}` is not a number"))))
        .collect()
}

/// Parses a `--space` value; `auto` looks at the observed treatments.
pub fn parse_space(spec: &str, t: &[f64]) -> Result<TreatmentSpace> {
    let (head, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let space = match head.trim() {
        "auto" => {
            let mut levels = t.to_vec();
            levels.sort_by(|a, b| a.partial_cmp(b).expect("finite treatments"));
            levels.dedup();
            if levels.len() <= AUTO_LEVELS_MAX {
                TreatmentSpace::Discrete { levels }
            } else {
                TreatmentSpace::Line
            }
        }
        "binary" => TreatmentSpace::binary(),
        "discrete" => TreatmentSpace::Discrete { levels: parse_numbers(rest)? },
        "interval" => match parse_numbers(rest)?.as_slice() {
            [lo, hi] => TreatmentSpace::Interval { lo: *lo, hi: *hi },
            _ => return Err(Error::Config("interval needs `interval:lo,hi`".into())),
        },
        "line" => TreatmentSpace::Line,
        other => return Err(Error::Config(format!("unknown treatment space `{other}`"))),
    };
    space.validate()?;
    Ok(space)
}

/// Parses `--theta 0.1,-2`.
pub fn parse_theta(s: &str) -> Result<Vec<f64>> {
    parse_numbers(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_forms() {
        assert_eq!(parse_space("binary", &[]).unwrap(), TreatmentSpace::binary());
        assert_eq!(
            parse_space("discrete:0,1,2", &[]).unwrap(),
            TreatmentSpace::Discrete { levels: vec![0.0, 1.0, 2.0] }
        );
        assert_eq!(parse_space("interval:-1,1", &[]).unwrap(), TreatmentSpace::Interval { lo: -1.0, hi: 1.0 });
        assert_eq!(parse_space("auto", &[1.0, 0.0, 1.0]).unwrap(), TreatmentSpace::binary());
        let many: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        assert_eq!(parse_space("auto", &many).unwrap(), TreatmentSpace::Line);
        assert!(parse_space("discrete:1,0", &[]).is_err());
        assert!(parse_space("ring", &[]).is_err());
    }

    #[test]
    fn config_error_names_the_field() {
        #[derive(Debug, Deserialize)]
        #[allow(dead_code)]
        struct Inner {
            a: u32,
        }
        #[derive(Debug, Deserialize)]
        #[allow(dead_code)]
        struct Outer {
            inner: Inner,
        }
        let v = parse_json_text(r#"{"inner": {"a": "x"}}"#, "cfg").unwrap();
        let err = from_value::<Outer>(v, "cfg").unwrap_err().to_string();
        assert!(err.contains("inner.a"), "{err}");
    }
}
