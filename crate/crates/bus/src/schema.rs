//! A small JSON Schema subset: `type` (string or list), `properties`,
//! `required`, `additionalProperties: false`, `enum`, `items`, `minItems`,
//! `maxItems`, `minimum`, `maximum`, `anyOf`, `oneOf`, `allOf` and boolean
//! schemas. Enough to pin down every payload on the bus and the scenario
//! file; the same documents are printed for external clients.

use serde_json::{Map, Value};

/// First validation failure: JSON-pointer-like path and reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

pub fn validate(schema: &Value, value: &Value) -> Result<(), Violation> {
    check(schema, value, "")
}

fn fail<T>(path: &str, message: impl Into<String>) -> Result<T, Violation> {
    Err(Violation {
        path: if path.is_empty() { "/".into() } else { path.into() },
        message: message.into(),
    })
}

fn type_matches(name: &str, value: &Value) -> bool {
    match name {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        "number" => value.as_f64().is_some_and(f64::is_finite),
        "integer" => value.is_u64() || value.is_i64(),
        _ => false,
    }
}

fn check(schema: &Value, value: &Value, path: &str) -> Result<(), Violation> {
    let s = match schema {
        Value::Object(s) => s,
        Value::Bool(false) => return fail(path, "no value is allowed here"),
        _ => return Ok(()),
    };
    if let Some(Value::Array(subs)) = s.get("allOf") {
        for sub in subs {
            check(sub, value, path)?;
        }
    }
    for (key, exactly_one) in [("anyOf", false), ("oneOf", true)] {
        if let Some(Value::Array(subs)) = s.get(key) {
            let mut first_err = None;
            let mut hits = 0;
            for sub in subs {
                match check(sub, value, path) {
                    Ok(()) => hits += 1,
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            if hits == 0 {
                return Err(first_err.unwrap_or(Violation {
                    path: path.to_string(),
                    message: format!("no alternative of `{key}` matches"),
                }));
            }
            if exactly_one && hits > 1 {
                return fail(path, format!("{hits} alternatives of `oneOf` match"));
            }
        }
    }
    if let Some(ty) = s.get("type") {
        let names: Vec<&str> = match ty {
            Value::String(n) => vec![n.as_str()],
            Value::Array(ns) => ns.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        if !names.iter().any(|n| type_matches(n, value)) {
            return fail(path, format!("expected {}", names.join(" or ")));
        }
    }
    if let Some(Value::Array(allowed)) = s.get("enum") {
        if !allowed.contains(value) {
            return fail(path, format!("{value} is not one of {}", Value::Array(allowed.clone())));
        }
    }
    if let Some(x) = value.as_f64() {
        if let Some(min) = s.get("minimum").and_then(Value::as_f64) {
            if x < min {
                return fail(path, format!("{x} is below the minimum {min}"));
            }
        }
        if let Some(max) = s.get("maximum").and_then(Value::as_f64) {
            if x > max {
                return fail(path, format!("{x} is above the maximum {max}"));
            }
        }
    }
    match value {
        Value::Object(obj) => check_object(s, obj, path),
        Value::Array(items) => {
            if let Some(n) = s.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < n {
                    return fail(path, format!("needs at least {n} items"));
                }
            }
            if let Some(n) = s.get("maxItems").and_then(Value::as_u64) {
                if items.len() as u64 > n {
                    return fail(path, format!("allows at most {n} items"));
                }
            }
            if let Some(item_schema) = s.get("items") {
                for (i, item) in items.iter().enumerate() {
                    check(item_schema, item, &format!("{path}/{i}"))?;
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn check_object(s: &Map<String, Value>, obj: &Map<String, Value>, path: &str) -> Result<(), Violation> {
    if let Some(Value::Array(required)) = s.get("required") {
        for key in required.iter().filter_map(Value::as_str) {
            if !obj.contains_key(key) {
                return fail(path, format!("missing required field `{key}`"));
            }
        }
    }
    let props = s.get("properties").and_then(Value::as_object);
    let closed = s.get("additionalProperties") == Some(&Value::Bool(false));
    for (key, v) in obj {
        match props.and_then(|p| p.get(key)) {
            Some(sub) => check(sub, v, &format!("{path}/{key}"))?,
            None if closed => return fail(path, format!("unknown field `{key}`")),
            None => {}
        }
    }
    Ok(())
}
