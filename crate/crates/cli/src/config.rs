//! Flat dotted-key configuration: a TOML file flattened to `section.key`
//! entries, then overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    entries: BTreeMap<String, Value>,
}

fn to_json(v: &toml::Value) -> Value {
    match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => Value::from(*f),
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Array(a) => Value::Array(a.iter().map(to_json).collect()),
        toml::Value::Table(t) => Value::Object(t.iter().map(|(k, v)| (k.clone(), to_json(v))).collect()),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, to_json(other));
            }
        }
    }
}

/// Parses a flag or `--set` value: TOML scalar/array syntax, else a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(t) => to_json(&t["v"]),
        Err(_) => Value::String(raw.to_string()),
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries);
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    /// Keys under `section.`, with the prefix removed.
    pub fn section(&self, section: &str) -> BTreeMap<String, Value> {
        let prefix = format!("{section}.");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(type_error(key, "a string", v)),
        }
    }

    pub fn uint(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| type_error(key, "a non-negative integer", v)),
        }
    }

    pub fn float(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| type_error(key, "a number", v)),
        }
    }

    pub fn boolean(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_bool().map(Some).ok_or_else(|| type_error(key, "a boolean", v)),
        }
    }

    /// A list of strings; a single string or a comma-separated string also works.
    pub fn strings(&self, key: &str) -> Result<Option<Vec<String>>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect())),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| type_error(key, "a list of strings", v)))
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(v) => Err(type_error(key, "a list of strings", v)),
        }
    }

    /// `seeds` as a list, or the single `seed`; defaults to `[0]`.
    pub fn seeds(&self) -> Result<Vec<u64>, CliError> {
        if let Some(s) = self.uint("seed")? {
            return Ok(vec![s]);
        }
        match self.get("seeds") {
            None => Ok(vec![0]),
            Some(Value::Array(a)) if !a.is_empty() => a
                .iter()
                .map(|v| v.as_u64().ok_or_else(|| type_error("seeds", "a list of non-negative integers", v)))
                .collect(),
            Some(Value::Number(n)) if n.is_u64() => Ok(vec![n.as_u64().unwrap_or_default()]),
            Some(v) => Err(type_error("seeds", "a non-empty list of non-negative integers", v)),
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.string("out")?.unwrap_or_else(|| "safeal-out".into())))
    }

    /// Rejects keys outside the known top-level names and sections.
    pub fn check_keys(&self, top: &[&str], sections: &[&str]) -> Result<(), CliError> {
        for k in self.keys() {
            let known = match k.split_once('.') {
                Some((s, _)) => sections.contains(&s),
                None => top.contains(&k.as_str()),
            };
            if !known {
                return Err(CliError::Validation(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }
}

fn type_error(key: &str, want: &str, got: &Value) -> CliError {
    CliError::Validation(format!("config key {key:?} must be {want}, got {got}"))
}

/// Hex SHA-256 of the canonical (sorted-key) JSON form.
pub fn config_hash(resolved: &Value) -> String {
    let text = serde_json::to_string(resolved).expect("JSON values serialize");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
