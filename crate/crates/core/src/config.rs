//! Flat `key = value` text configuration. Lines starting with `#` and blank
//! lines are ignored; list values are comma-separated.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration section that owns some keys of the flat key space.
pub trait KeyValue {
    /// Apply one setting. Returns `Ok(false)` when the key belongs elsewhere.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every key this section owns with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Parse `key = value` lines in order of appearance.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render<K: AsRef<str>>(entries: &[(K, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k.as_ref());
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Apply `pairs` to `sections` in order; a key no section owns is an error.
pub fn apply(sections: &mut [&mut dyn KeyValue], pairs: &[(String, String)]) -> Result<()> {
    'pairs: for (k, v) in pairs {
        for s in sections.iter_mut() {
            if s.set(k, v)? {
                continue 'pairs;
            }
        }
        return Err(Error::Config(format!("unknown configuration key `{k}`")));
    }
    Ok(())
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

pub fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

pub fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
