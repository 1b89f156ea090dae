//! Flat key=value run configuration with one documented schema per command.
//!
//! Resolution order: built-in defaults, then the optional config file (later
//! lines override earlier ones), then `--set key=value` pairs, then named
//! flags. Unknown keys and unparsable values are rejected up front, before a
//! command touches the filesystem.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use toothrec::occupancy::ConditioningMode;

use crate::error::CliError;

/// One documented configuration key.
pub struct FieldSpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// The full key set of one command.
pub struct Schema {
    pub command: &'static str,
    pub fields: &'static [FieldSpec],
}

impl Schema {
    fn lookup(&self, key: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.key == key)
    }

    /// Merge defaults, an optional config file, and override pairs.
    pub fn resolve(
        &self,
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Resolved, CliError> {
        let mut values: BTreeMap<&'static str, String> =
            self.fields.iter().map(|f| (f.key, f.default.to_string())).collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::usage(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                let spec = self.lookup(key.trim()).ok_or_else(|| self.unknown_key(key.trim()))?;
                values.insert(spec.key, value.trim().to_string());
            }
        }
        for (key, value) in overrides {
            let spec = self.lookup(key).ok_or_else(|| self.unknown_key(key))?;
            values.insert(spec.key, value.clone());
        }
        Ok(Resolved { values })
    }

    fn unknown_key(&self, key: &str) -> CliError {
        let known: Vec<&str> = self.fields.iter().map(|f| f.key).collect();
        CliError::usage(format!(
            "unknown {} config key {key:?}; known keys: {}",
            self.command,
            known.join(", ")
        ))
    }
}

/// A fully merged configuration. Every schema key is present.
pub struct Resolved {
    values: BTreeMap<&'static str, String>,
}

impl Resolved {
    /// Raw string value. The key must belong to the schema that built this.
    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} not in this command's schema"))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.get(key))
    }

    /// Parse a value, naming the key on failure.
    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| CliError::usage(format!("config key {key}: cannot parse value {raw:?}")))
    }

    /// Parse, then enforce a range described by `requirement`.
    pub fn parse_checked<T: FromStr + Display + Copy>(
        &self,
        key: &str,
        requirement: &str,
        ok: impl Fn(T) -> bool,
    ) -> Result<T, CliError> {
        let value = self.parse::<T>(key)?;
        if !ok(value) {
            return Err(CliError::usage(format!(
                "config key {key}: value {value} out of range (must be {requirement})"
            )));
        }
        Ok(value)
    }
}

/// Parse a tooth-class list such as `1-16` or `3,19,25-28` (all distinct).
pub fn parse_class_list(text: &str) -> Result<Vec<u8>, CliError> {
    let bad = |token: &str| {
        CliError::usage(format!(
            "bad tooth class token {token:?} (expected numbers or ranges in 1..=32)"
        ))
    };
    let mut out = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let (lo, hi) = match token.split_once('-') {
            Some((a, b)) => (
                a.trim().parse::<u8>().map_err(|_| bad(token))?,
                b.trim().parse::<u8>().map_err(|_| bad(token))?,
            ),
            None => {
                let v = token.parse::<u8>().map_err(|_| bad(token))?;
                (v, v)
            }
        };
        if lo < 1 || hi > 32 || lo > hi {
            return Err(bad(token));
        }
        for c in lo..=hi {
            if out.contains(&c) {
                return Err(CliError::usage(format!("tooth class {c} listed more than once")));
            }
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("class list is empty".to_string()));
    }
    Ok(out)
}

/// Parse a comma-separated seed list such as `0,1,2`.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>, CliError> {
    let mut out = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let seed = token
            .parse::<u64>()
            .map_err(|_| CliError::usage(format!("bad seed {token:?} in seed list")))?;
        if out.contains(&seed) {
            return Err(CliError::usage(format!("seed {seed} listed more than once")));
        }
        out.push(seed);
    }
    Ok(out)
}

/// Parse a conditioning-mode name: `cx`, `cbn`, or `none`.
pub fn parse_conditioning(text: &str) -> Result<ConditioningMode, CliError> {
    match text {
        "cx" => Ok(ConditioningMode::Cx),
        "cbn" => Ok(ConditioningMode::Cbn),
        "none" => Ok(ConditioningMode::None),
        other => Err(CliError::usage(format!(
            "unknown conditioning mode {other:?} (expected cx, cbn, or none)"
        ))),
    }
}
