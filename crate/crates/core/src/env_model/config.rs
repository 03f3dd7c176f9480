//! TOML model files.
//!
//! ```toml
//! label = "two-state"
//! support_limit = 64          # optional
//!
//! [[state]]
//! weight = 0.5
//! pmf = { 1 = 0.5, 2 = 0.5 }
//!
//! [[state]]
//! weight = 0.5
//! pmf = { 1 = 0.2, 2 = 0.8 }
//! ```
//!
//! A geometric environment replaces the `[[state]]` list:
//!
//! ```toml
//! [geometric]
//! tail_epsilon = 1e-12
//! states = [{ weight = 1.0, b = 0.5 }]
//! ```

use std::path::Path;

use toml::{Table, Value};

use super::{EnvironmentModel, OffspringLaw, DEFAULT_SUPPORT_LIMIT};
use crate::error::{Error, Result};

/// Reads and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<EnvironmentModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_model(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses a model from TOML text.
pub fn parse_model(text: &str) -> Result<EnvironmentModel> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for key in table.keys() {
        if !matches!(key.as_str(), "label" | "support_limit" | "state" | "geometric") {
            return Err(Error::Config(format!("{key}: unknown key")));
        }
    }
    let support_limit = match table.get("support_limit") {
        None => DEFAULT_SUPPORT_LIMIT,
        Some(v) => positive_int(v, "support_limit")?,
    };
    let label = match table.get("label") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::Config("label: expected a string".into())),
    };
    match (table.get("state"), table.get("geometric")) {
        (Some(_), Some(_)) => Err(Error::Config("state and geometric are mutually exclusive".into())),
        (None, None) => Err(Error::Config("missing [[state]] entries or a [geometric] block".into())),
        (Some(states), None) => {
            let model = parse_states(states, support_limit)?;
            Ok(match label {
                Some(l) => EnvironmentModel { label: l, ..model },
                None => model,
            })
        }
        (None, Some(geo)) => {
            let model = parse_geometric(geo, support_limit)?;
            Ok(match label {
                Some(l) => {
                    let full = format!("{l} {}", model.label);
                    EnvironmentModel { label: full, ..model }
                }
                None => model,
            })
        }
    }
}

fn parse_states(value: &Value, support_limit: usize) -> Result<EnvironmentModel> {
    let Value::Array(items) = value else {
        return Err(Error::Config("state: expected an array of tables ([[state]])".into()));
    };
    let mut states = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let key = format!("state[{i}]");
        let Value::Table(t) = item else {
            return Err(Error::Config(format!("{key}: expected a table")));
        };
        for k in t.keys() {
            if k != "weight" && k != "pmf" {
                return Err(Error::Config(format!("{key}.{k}: unknown key")));
            }
        }
        let weight = real(t.get("weight"), &format!("{key}.weight"))?;
        let Some(Value::Table(pmf)) = t.get("pmf") else {
            return Err(Error::Config(format!("{key}.pmf: expected a table of count = probability")));
        };
        let mut pairs = Vec::with_capacity(pmf.len());
        for (count, p) in pmf {
            let path = format!("{key}.pmf.{count}");
            let i: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{path}: offspring count must be a non-negative integer")))?;
            pairs.push((i, real(Some(p), &path)?));
        }
        let law = OffspringLaw::with_context(pairs, support_limit, &key)?;
        states.push((weight, law));
    }
    EnvironmentModel::new("custom", states)
}

fn parse_geometric(value: &Value, support_limit: usize) -> Result<EnvironmentModel> {
    let Value::Table(t) = value else {
        return Err(Error::Config("geometric: expected a table".into()));
    };
    for k in t.keys() {
        if k != "tail_epsilon" && k != "states" {
            return Err(Error::Config(format!("geometric.{k}: unknown key")));
        }
    }
    let eps = real(t.get("tail_epsilon"), "geometric.tail_epsilon")?;
    let Some(Value::Array(items)) = t.get("states") else {
        return Err(Error::Config("geometric.states: expected an array of { weight, b }".into()));
    };
    let mut pairs = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let key = format!("geometric.states[{i}]");
        let Value::Table(s) = item else {
            return Err(Error::Config(format!("{key}: expected a table")));
        };
        pairs.push((real(s.get("weight"), &format!("{key}.weight"))?, real(s.get("b"), &format!("{key}.b"))?));
    }
    EnvironmentModel::geometric(&pairs, eps, support_limit)
}

fn real(value: Option<&Value>, path: &str) -> Result<f64> {
    match value {
        Some(Value::Float(x)) => Ok(*x),
        Some(Value::Integer(i)) => Ok(*i as f64),
        Some(_) => Err(Error::Config(format!("{path}: expected a number"))),
        None => Err(Error::Config(format!("{path}: missing"))),
    }
}

fn positive_int(value: &Value, path: &str) -> Result<usize> {
    match value {
        Value::Integer(i) if *i >= 1 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{path}: expected a positive integer"))),
    }
}
