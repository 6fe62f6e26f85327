//! Run reports: the JSON document every command prints, and a plain-text
//! rendering of it.

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub const REPORT_KEYS: [&str; 6] = [
    "schema_version",
    "command",
    "instance_digest",
    "results",
    "residuals",
    "wall_time_ms",
];

#[derive(Debug, Clone, Serialize)]
pub struct CommandEcho {
    pub name: String,
    pub args: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: CommandEcho,
    /// SHA-256 of the instance file bytes, hex encoded.
    pub instance_digest: Option<String>,
    pub results: Value,
    pub residuals: Value,
    pub wall_time_ms: Option<f64>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A numeric result together with the tolerance it was checked at.
pub fn num(value: f64, tol: f64) -> Value {
    json!({ "value": value, "tol": tol })
}

pub fn nums(values: &[f64], tol: f64) -> Value {
    json!({ "value": values, "tol": tol })
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("command: {}\n", self.command.name);
        if let Some(d) = &self.instance_digest {
            out += &format!("instance: {d}\n");
        }
        flatten("results", &self.results, &mut out);
        flatten("residuals", &self.residuals, &mut out);
        if let Some(t) = self.wall_time_ms {
            out += &format!("wall time: {t:.3} ms\n");
        }
        out
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => Some("null".into()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            let parts: Vec<String> = items.iter().filter_map(scalar).collect();
            Some(format!("[{}]", parts.join(", ")))
        }
        _ => None,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    if let Some(s) = scalar(v) {
        out.push_str(&format!("{prefix}: {s}\n"));
        return;
    }
    match v {
        Value::Object(map) => {
            // {value, tol} pairs print on one line
            if map.len() == 2 && map.contains_key("value") && map.contains_key("tol") {
                if let (Some(a), Some(b)) = (scalar(&map["value"]), scalar(&map["tol"])) {
                    out.push_str(&format!("{prefix}: {a} (tol {b})\n"));
                    return;
                }
            }
            for (k, item) in map {
                flatten(&format!("{prefix}.{k}"), item, out);
            }
        }
        Value::Array(items) => {
            for (k, item) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{k}]"), item, out);
            }
        }
        _ => unreachable!("scalars handled above"),
    }
}

/// Structural check of a parsed report.
pub fn validate_report(v: &Value) -> Result<(), String> {
    let obj: &Map<String, Value> = v.as_object().ok_or("report is not an object")?;
    for key in REPORT_KEYS {
        if !obj.contains_key(key) {
            return Err(format!("missing key `{key}`"));
        }
    }
    if let Some(extra) = obj.keys().find(|k| !REPORT_KEYS.contains(&k.as_str())) {
        return Err(format!("unexpected key `{extra}`"));
    }
    if obj["schema_version"].as_u64() != Some(SCHEMA_VERSION as u64) {
        return Err("unsupported schema_version".into());
    }
    let cmd = obj["command"].as_object().ok_or("`command` is not an object")?;
    if !cmd.get("name").is_some_and(Value::is_string) || !cmd.get("args").is_some_and(Value::is_array) {
        return Err("`command` needs a string `name` and an array `args`".into());
    }
    match &obj["instance_digest"] {
        Value::Null => {}
        Value::String(s) if s.len() == 64 && s.chars().all(|c| c.is_ascii_hexdigit()) => {}
        _ => return Err("`instance_digest` must be null or 64 hex digits".into()),
    }
    if !obj["results"].is_object() || !obj["residuals"].is_object() {
        return Err("`results` and `residuals` must be objects".into());
    }
    if !(obj["wall_time_ms"].is_null() || obj["wall_time_ms"].is_number()) {
        return Err("`wall_time_ms` must be a number or null".into());
    }
    check_tolerances(&obj["residuals"], "residuals")
}

// every residual is reported as {value, tol}
fn check_tolerances(v: &Value, path: &str) -> Result<(), String> {
    match v {
        Value::Object(map) if map.contains_key("value") => {
            if map.get("tol").is_some_and(Value::is_number) {
                Ok(())
            } else {
                Err(format!("{path} has no numeric tol"))
            }
        }
        Value::Object(map) => map.iter().try_for_each(|(k, item)| check_tolerances(item, &format!("{path}.{k}"))),
        Value::Number(_) => Err(format!("{path} is a bare number")),
        _ => Ok(()),
    }
}
