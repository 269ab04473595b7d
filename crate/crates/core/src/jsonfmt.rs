//! Deterministic JSON output: keys sorted (via `serde_json::Value`) and
//! every float rounded to 6 significant digits, so identical runs produce
//! byte-identical files.

use crate::error::{Error, Result};
use serde::Serialize;

/// Round to 6 significant decimal digits.
pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let mag = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(5 - mag);
    (v * factor).round() / factor
}

fn round_value(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    if let Some(rounded) = serde_json::Number::from_f64(round_sig6(f)) {
                        *n = rounded;
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_value),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Serialize with sorted keys and rounded floats, trailing newline
/// included.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)
        .map_err(|e| Error::InvalidParam(format!("serialization failed: {e}")))?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)
        .map_err(|e| Error::InvalidParam(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Fixed float formatting for CSV cells; undefined values render empty.
pub fn format_cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) => format!("{}", round_sig6(v)),
    }
}
