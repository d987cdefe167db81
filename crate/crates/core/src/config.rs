//! Flat `key = value` configuration text.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! are the field names of the config structs. A key nobody claims is an
//! error, so a typo never silently falls back to a default.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A config section that can be written out and read back key by key.
pub trait Section {
    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    /// Applies one setting; `Ok(false)` when the key is not part of this
    /// section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(_, k, _)| k == key) {
            return Err(Error::Config(format!("line {}: key `{key}` given twice", i + 1)));
        }
        out.push((i + 1, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Applies `text` on top of the current values of `sections`.
pub fn apply(text: &str, sections: &mut [&mut dyn Section]) -> Result<()> {
    for (line, key, value) in parse_lines(text)? {
        let mut claimed = false;
        for s in sections.iter_mut() {
            if s.set(&key, &value)? {
                claimed = true;
                break;
            }
        }
        if !claimed {
            return Err(Error::Config(format!("line {line}: unknown config key `{key}`")));
        }
    }
    Ok(())
}

/// Renders sections as config text that [`apply`] reads back exactly.
pub fn render(sections: &[&dyn Section]) -> String {
    let mut out = String::new();
    for s in sections {
        for (k, v) in s.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
    }
    out
}

pub fn value<T>(key: &str, raw: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("bad value `{raw}` for `{key}`: {e}")))
}

/// Comma-separated list of values.
pub fn list<T>(key: &str, raw: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

pub fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}
