//! Flat `key = value` (de)serialization shared by config files and
//! checkpoint metadata.

use std::str::FromStr;

pub trait KeyValue {
    /// Canonical pairs; feeding them back through [`KeyValue::set`]
    /// reproduces the value exactly.
    fn pairs(&self) -> Vec<(&'static str, String)>;

    /// `Ok(false)` when `key` is not one of ours; `Err` carries a type error.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, String>;
}

pub fn parse<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("type error: {key} expects {expected}, got {value:?}"))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("type error: {key} expects a boolean, got {value:?}")),
    }
}

/// `[1, 2, 3]`, `1,2,3` or an empty list (`[]` / empty string).
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']').trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|s| parse(key, s.trim(), "a list of numbers"))
        .collect()
}

pub fn format_list<T: ToString>(values: &[T]) -> String {
    let items: Vec<String> = values.iter().map(ToString::to_string).collect();
    format!("[{}]", items.join(", "))
}

/// Optional float: `none`/`off` clear it.
pub fn parse_opt_f64(key: &str, value: &str) -> Result<Option<f64>, String> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v, "a number or none").map(Some),
    }
}

pub fn format_opt_f64(value: Option<f64>) -> String {
    value.map_or_else(|| "none".to_string(), |v| v.to_string())
}
