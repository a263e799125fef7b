//! Experiment configuration: flat `key = value` files with dotted keys, or
//! the equivalent JSON object. Every key has a default; unknown keys are
//! rejected.

use std::collections::BTreeMap;
use std::path::Path;

use bilevel_core::BilevelProblem;
use serde_json::{json, Value as Json};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// One of the built-in problem names.
    Problem,
    Str,
    Float,
    Int,
    Bool,
    /// A float or `none`.
    OptFloat,
    /// Comma-separated floats.
    Floats,
    /// Comma-separated integers or an inclusive range `a..b`.
    Ints,
    /// `random` or comma-separated coordinates.
    Point,
}

#[derive(Debug, Clone, Copy)]
pub struct Param {
    pub key: &'static str,
    pub kind: Kind,
    /// Literal default, or `auto` for a problem-dependent value.
    pub default: &'static str,
    pub doc: &'static str,
}

pub const fn param(key: &'static str, kind: Kind, default: &'static str, doc: &'static str) -> Param {
    Param { key, kind, default, doc }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Float(f64),
    Int(u64),
    Bool(bool),
    None,
    Floats(Vec<f64>),
    Ints(Vec<u64>),
    Random,
}

impl Value {
    pub fn to_json(&self) -> Json {
        match self {
            Value::Str(s) => json!(s),
            Value::Float(f) => json!(f),
            Value::Int(i) => json!(i),
            Value::Bool(b) => json!(b),
            Value::None => Json::Null,
            Value::Floats(v) => json!(v),
            Value::Ints(v) => json!(v),
            Value::Random => json!("random"),
        }
    }
}

/// Key/value pairs as written in the file, before validation.
pub type RawConfig = BTreeMap<String, String>;

pub fn read_raw(path: &Path) -> Result<RawConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_raw(&text)
}

pub fn parse_raw(text: &str) -> Result<RawConfig, CliError> {
    if text.trim_start().starts_with('{') {
        parse_json(text)
    } else {
        parse_key_values(text)
    }
}

fn parse_key_values(text: &str) -> Result<RawConfig, CliError> {
    let mut out = RawConfig::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::Syntax {
            line: lineno + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Syntax { line: lineno + 1, message: "empty key".into() });
        }
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Syntax { line: lineno + 1, message: format!("duplicate key `{key}`") });
        }
    }
    Ok(out)
}

fn parse_json(text: &str) -> Result<RawConfig, CliError> {
    let value: Json = serde_json::from_str(text).map_err(|e| CliError::Syntax { line: e.line(), message: e.to_string() })?;
    let mut out = RawConfig::new();
    flatten("", &value, &mut out)?;
    Ok(out)
}

fn scalar_text(v: &Json) -> Option<String> {
    match v {
        Json::String(s) => Some(s.clone()),
        Json::Number(n) => Some(n.to_string()),
        Json::Bool(b) => Some(b.to_string()),
        Json::Null => Some("none".into()),
        _ => None,
    }
}

fn flatten(prefix: &str, v: &Json, out: &mut RawConfig) -> Result<(), CliError> {
    let bad = |m: &str| CliError::Syntax { line: 0, message: format!("`{prefix}`: {m}") };
    match v {
        Json::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out)?;
            }
        }
        Json::Array(items) => {
            let parts: Option<Vec<String>> = items.iter().map(scalar_text).collect();
            let parts = parts.ok_or_else(|| bad("arrays may only hold scalars"))?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        scalar => {
            if prefix.is_empty() {
                return Err(bad("top level must be an object"));
            }
            out.insert(prefix.to_string(), scalar_text(scalar).expect("scalar"));
        }
    }
    Ok(())
}

fn parse_value(text: &str, kind: Kind) -> Result<Value, String> {
    let float = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    let int = |s: &str| s.trim().parse::<u64>().map_err(|_| format!("`{s}` is not a non-negative integer"));
    let list = |s: &str| s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(float).collect::<Result<Vec<_>, _>>();
    match kind {
        Kind::Problem | Kind::Str => Ok(Value::Str(text.to_string())),
        Kind::Float => float(text).map(Value::Float),
        Kind::Int => int(text).map(Value::Int),
        Kind::Bool => match text {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("`{text}` is not true/false")),
        },
        Kind::OptFloat if text == "none" => Ok(Value::None),
        Kind::OptFloat => float(text).map(Value::Float),
        Kind::Floats => {
            let v = list(text)?;
            if v.is_empty() {
                Err("empty list".into())
            } else {
                Ok(Value::Floats(v))
            }
        }
        Kind::Ints => {
            if let Some((a, b)) = text.split_once("..") {
                let (a, b) = (int(a)?, int(b)?);
                if a > b {
                    return Err(format!("empty range `{text}`"));
                }
                Ok(Value::Ints((a..=b).collect()))
            } else {
                let v = text.split(',').map(str::trim).filter(|p| !p.is_empty()).map(int).collect::<Result<Vec<_>, _>>()?;
                if v.is_empty() {
                    Err("empty list".into())
                } else {
                    Ok(Value::Ints(v))
                }
            }
        }
        Kind::Point if text == "random" => Ok(Value::Random),
        Kind::Point => list(text).map(Value::Floats),
    }
}

/// Fully resolved configuration: every schema key with a typed value.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub experiment: String,
    values: BTreeMap<String, Value>,
}

impl Resolved {
    pub fn to_json(&self) -> Json {
        Json::Object(self.values.iter().map(|(k, v)| (k.clone(), v.to_json())).collect())
    }

    fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("key `{key}` missing from the experiment schema"))
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(s) => s,
            other => panic!("`{key}` is not a string: {other:?}"),
        }
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(f) => *f,
            other => panic!("`{key}` is not a float: {other:?}"),
        }
    }

    pub fn opt_float(&self, key: &str) -> Option<f64> {
        match self.get(key) {
            Value::Float(f) => Some(*f),
            Value::None => None,
            other => panic!("`{key}` is not an optional float: {other:?}"),
        }
    }

    pub fn int(&self, key: &str) -> u64 {
        match self.get(key) {
            Value::Int(i) => *i,
            other => panic!("`{key}` is not an integer: {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(b) => *b,
            other => panic!("`{key}` is not a bool: {other:?}"),
        }
    }

    pub fn floats(&self, key: &str) -> &[f64] {
        match self.get(key) {
            Value::Floats(v) => v,
            other => panic!("`{key}` is not a float list: {other:?}"),
        }
    }

    pub fn ints(&self, key: &str) -> Vec<usize> {
        match self.get(key) {
            Value::Ints(v) => v.iter().map(|i| *i as usize).collect(),
            other => panic!("`{key}` is not an integer list: {other:?}"),
        }
    }

    /// `None` for `random`.
    pub fn point(&self, key: &str) -> Option<&[f64]> {
        match self.get(key) {
            Value::Random => None,
            Value::Floats(v) => Some(v),
            other => panic!("`{key}` is not a point: {other:?}"),
        }
    }
}

/// Validates `raw` against `schema`, filling defaults. `auto` defaults are
/// produced by `auto(key, problem)` once the problem is known.
pub fn resolve(
    experiment: &str,
    raw: &RawConfig,
    schema: &[Param],
    auto: impl Fn(&str, Option<&BilevelProblem>) -> String,
) -> Result<Resolved, CliError> {
    let unknown: Vec<String> = raw.keys().filter(|k| !schema.iter().any(|p| p.key == k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        let mut valid: Vec<String> = schema.iter().map(|p| p.key.to_string()).collect();
        valid.sort();
        return Err(CliError::UnknownKeys { keys: unknown, valid });
    }

    let problem = match schema.iter().find(|p| p.kind == Kind::Problem) {
        Some(p) => {
            let name = raw.get(p.key).map(String::as_str).unwrap_or(p.default);
            Some(bilevel_core::builtin_problem(name).map_err(|e| CliError::InvalidValues { errors: vec![(p.key.to_string(), e.to_string())] })?)
        }
        None => None,
    };

    let mut values = BTreeMap::new();
    let mut errors = Vec::new();
    for p in schema {
        let text = match raw.get(p.key) {
            Some(v) => v.clone(),
            None if p.default == "auto" => auto(p.key, problem.as_ref()),
            None => p.default.to_string(),
        };
        match parse_value(&text, p.kind) {
            Ok(v) => {
                values.insert(p.key.to_string(), v);
            }
            Err(e) => errors.push((p.key.to_string(), e)),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::InvalidValues { errors });
    }
    Ok(Resolved { experiment: experiment.to_string(), values })
}
