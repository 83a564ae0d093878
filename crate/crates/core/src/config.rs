//! Sectioned `key = value` text configuration.
//!
//! ```text
//! # comment
//! [train]
//! lr = 0.001
//! nu = 0.05
//! ```
//!
//! Keys are addressed as `section.key`. Values stay strings until a typed
//! reader asks for them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("bad value for {section}.{key}: `{value}`")]
    BadValue { section: String, key: String, value: String },
    #[error("override must look like section.key=value (got `{0}`)")]
    BadOverride(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KeyValues::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                kv.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            kv.set(&section, k.trim(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn set(&mut self, section: &str, key: &str, value: String) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value);
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn sections(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }

    pub fn keys(&self, section: &str) -> impl Iterator<Item = (&str, &str)> {
        self.sections
            .get(section)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, value) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        let (section, key) = path.trim().rsplit_once('.').ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
        if section.is_empty() || key.is_empty() {
            return Err(ConfigError::BadOverride(spec.into()));
        }
        self.set(section, key, value.trim().to_string());
        Ok(())
    }

    /// Merges `other` on top of `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (s, m) in &other.sections {
            for (k, v) in m {
                self.set(s, k, v.clone());
            }
        }
    }

    pub fn parse_value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                value: v.into(),
            }),
        }
    }

    pub fn read_into<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(v) = self.parse_value(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn read_list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        let Some(raw) = self.get(section, key) else { return Ok(None) };
        let bad = || ConfigError::BadValue { section: section.into(), key: key.into(), value: raw.into() };
        if raw.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        raw.split(',').map(|t| t.trim().parse::<T>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>().map(Some)
    }

    pub fn read_vec3(&self, section: &str, key: &str, slot: &mut Vec3) -> Result<(), ConfigError> {
        if let Some(v) = self.read_list::<f64>(section, key)? {
            if v.len() != 3 {
                return Err(ConfigError::BadValue {
                    section: section.into(),
                    key: key.into(),
                    value: self.get(section, key).unwrap_or_default().into(),
                });
            }
            *slot = [v[0], v[1], v[2]];
        }
        Ok(())
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (section, map) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            if !section.is_empty() {
                writeln!(f, "[{section}]")?;
            }
            for (k, v) in map {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}
