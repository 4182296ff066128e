//! Canonical JSON: sorted object keys, integers verbatim, floats with six
//! significant digits (trailing zeros kept). Identical values always
//! serialize to identical bytes.

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// `%#.6g`: six significant digits, trailing zeros kept.
pub fn format_sig6(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::Validation(format!("non-finite number {x}")));
    }
    if x == 0.0 {
        return Ok("0.00000".to_string());
    }
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        Ok(format!("{:.*}", decimals, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        Ok(format!("{mantissa}e{sign}{:02}", exp.abs()))
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) -> Result<()> {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                out.push_str(&n.to_string());
            } else {
                out.push_str(&format_sig6(n.as_f64().unwrap_or(f64::NAN))?);
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return Ok(());
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out)?;
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return Ok(());
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k)?);
                out.push_str(": ");
                write_value(&map[k.as_str()], indent + 1, out)?;
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
    Ok(())
}

/// Pretty-printed canonical form, newline-terminated.
pub fn to_canonical_string(v: &Value) -> Result<String> {
    let mut out = String::new();
    write_value(v, 0, &mut out)?;
    out.push('\n');
    Ok(out)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical serialization of any serializable config.
///
/// Floats are hashed through their shortest round-trip form (not the
/// six-digit display form) so distinct configs never collide.
pub fn config_hash<T: serde::Serialize>(cfg: &T) -> Result<String> {
    let v = serde_json::to_value(cfg)?;
    Ok(sha256_hex(sorted_compact(&v).as_bytes()))
}

fn sorted_compact(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), sorted_compact(&map[k.as_str()])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(sorted_compact).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.953).unwrap(), "0.953000");
        assert_eq!(format_sig6(1.0).unwrap(), "1.00000");
        assert_eq!(format_sig6(0.0).unwrap(), "0.00000");
        assert_eq!(format_sig6(123.456).unwrap(), "123.456");
        assert_eq!(format_sig6(-0.5).unwrap(), "-0.500000");
        assert_eq!(format_sig6(1.0e-7).unwrap(), "1.00000e-07");
        assert_eq!(format_sig6(2.5e9).unwrap(), "2.50000e+09");
        assert_eq!(format_sig6(0.0001).unwrap(), "0.000100000");
        assert!(format_sig6(f64::NAN).is_err());
    }

    #[test]
    fn sig6_output_parses_as_json() {
        for x in [0.953, 1e-7, 2.5e9, -3.25, 0.999999, 0.9999996] {
            let s = format_sig6(x).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert!((back - x).abs() <= x.abs() * 1e-5, "{x} -> {s}");
        }
    }

    #[test]
    fn keys_sorted_and_stable() {
        let a = json!({"b": 1, "a": {"z": 0.5, "y": [1, 2.0]}});
        let s = to_canonical_string(&a).unwrap();
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.find("\"y\"").unwrap() < s.find("\"z\"").unwrap());
        assert_eq!(s, to_canonical_string(&a.clone()).unwrap());
        assert!(s.contains("2.00000"));
    }

    #[test]
    fn config_hash_ignores_field_order() {
        let a = json!({"x": 1, "y": 2.5});
        let b = json!({"y": 2.5, "x": 1});
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&json!({"x": 1, "y": 2.6})).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
