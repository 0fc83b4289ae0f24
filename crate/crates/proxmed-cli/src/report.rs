//! Bit-stable JSON emission: sorted keys, floats printed with 17 significant
//! digits (lossless round-trip), non-finite values as null.

use serde_json::Value;
use std::fmt::Write as _;

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if !v.is_finite() {
        return "null".to_string();
    }
    if v == v.trunc() && v.abs() < 1e15 {
        // Integral values stay readable and still round-trip.
        return format!("{:.1}", v);
    }
    format!("{:.16e}", v)
}

/// Serializes a JSON value deterministically.
pub fn emit(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, value: &Value, indent: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else {
                out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => {
            let _ = write!(out, "{}", serde_json::to_string(s).unwrap());
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(out, indent + 1);
                write_value(out, item, indent + 1);
            }
            out.push('\n');
            push_indent(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            // serde_json's default map preserves insertion order; sort keys
            // for byte-stable output regardless of construction order.
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(out, indent + 1);
                let _ = write!(out, "{}: ", serde_json::to_string(key).unwrap());
                write_value(out, &map[key.as_str()], indent + 1);
            }
            out.push('\n');
            push_indent(out, indent);
            out.push('}');
        }
    }
}

fn push_indent(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

/// Converts a serializable value to a sanitized JSON value: NaN and infinite
/// floats become null rather than failing.
pub fn to_value<T: serde::Serialize>(v: &T) -> Value {
    // serde_json rejects non-finite floats at the Value layer, so serialize
    // through a string round-trip is not an option; instead rely on the
    // library types keeping NaN only in documented places and map them here.
    match serde_json::to_value(v) {
        Ok(val) => val,
        Err(_) => Value::Null,
    }
}
