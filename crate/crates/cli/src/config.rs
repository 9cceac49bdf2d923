//! Flat key-value configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Dotted keys
//! address nested fields (`encoder.layers = 4`). A value is read as a JSON
//! scalar or array when it parses as one (`3`, `1e-4`, `true`, `null`,
//! `"text"`) and as a bare string otherwise (`kmeans++`).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: Value,
    /// `file:line` or `--set`.
    pub origin: String,
}

pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn parse_pair(text: &str, origin: &str) -> Result<Entry, String> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| format!("{origin}: expected `key = value`, got `{text}`"))?;
    let key = key.trim();
    let valid = !key.is_empty()
        && key
            .split('.')
            .all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
    if !valid {
        return Err(format!("{origin}: invalid key `{key}`"));
    }
    Ok(Entry {
        key: key.to_string(),
        value: parse_value(value),
        origin: origin.to_string(),
    })
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

pub fn parse_text(text: &str, name: &str) -> Result<Vec<Entry>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = strip_comment(line).trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_pair(line, &format!("{name}:{}", n + 1))?);
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<Entry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_text(&text, &path.display().to_string())
}

pub fn parse_overrides(sets: &[String]) -> Result<Vec<Entry>, String> {
    sets.iter().map(|s| parse_pair(s, "--set")).collect()
}

/// The last value given for `key`, if any.
pub fn lookup<'a>(entries: &'a [Entry], key: &str) -> Option<&'a Value> {
    entries.iter().rev().find(|e| e.key == key).map(|e| &e.value)
}

/// Writes each entry into `base`. A key must name an existing field, or a
/// new field of a tagged variant (an object with a `kind` field).
pub fn apply(base: &mut Value, entries: &[Entry]) -> Result<(), String> {
    for e in entries {
        let segs: Vec<&str> = e.key.split('.').collect();
        let (last, parents) = segs.split_last().expect("keys are non-empty");
        let mut node = &mut *base;
        for seg in parents {
            let child = match node {
                Value::Object(m) => m.get_mut(*seg),
                _ => None,
            };
            node = match child {
                Some(c) if c.is_object() => c,
                Some(Value::Null) => {
                    return Err(format!("{}: `{}` is unset here and has no fields to override", e.origin, e.key));
                }
                _ => return Err(format!("{}: unknown key `{}`", e.origin, e.key)),
            };
        }
        let Value::Object(map) = node else {
            return Err(format!("{}: unknown key `{}`", e.origin, e.key));
        };
        if !map.contains_key(*last) && !map.contains_key("kind") {
            return Err(format!("{}: unknown key `{}`", e.origin, e.key));
        }
        map.insert(last.to_string(), e.value.clone());
    }
    Ok(())
}

/// `defaults` with `entries` applied, read back as `T`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, entries: &[Entry]) -> Result<T, String> {
    let mut v = serde_json::to_value(defaults).map_err(|e| e.to_string())?;
    apply(&mut v, entries)?;
    serde_json::from_value(v).map_err(|e| format!("invalid configuration: {e}"))
}

/// Leaf keys of a resolved configuration, in the file format.
pub fn render(value: &Value) -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) if !m.is_empty() || prefix.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            _ => out.push(format!("{prefix} = {v}")),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out.iter().map(|l| format!("{l}\n")).collect()
}
