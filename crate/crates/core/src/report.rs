//! Canonical JSON: sorted keys, floats at 12 significant digits.

use serde::Serialize;
use serde_json::Value;

/// Renders `value` as canonical, indented JSON followed by a newline.
pub fn to_canonical_json<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("report values serialize");
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    out
}

pub fn format_float(x: f64) -> String {
    if x == 0.0 {
        // keep -0.0 and 0.0 identical
        return "0.00000000000e0".to_string();
    }
    format!("{x:.11e}")
}

fn indent(level: usize, out: &mut String) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_value(v: &Value, level: usize, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                indent(level + 1, out);
                write_value(item, level + 1, out);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(level, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                indent(level + 1, out);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(&map[*k], level + 1, out);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            indent(level, out);
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_sorted_and_floats_fixed() {
        let mut m = HashMap::new();
        m.insert("zeta", 1.0 / 3.0);
        m.insert("alpha", 2.0);
        let s = to_canonical_json(&m);
        assert_eq!(
            s,
            "{\n  \"alpha\": 2.00000000000e0,\n  \"zeta\": 3.33333333333e-1\n}\n"
        );
    }

    #[test]
    fn integers_stay_integers() {
        #[derive(Serialize)]
        struct X {
            n: u64,
            v: Vec<i32>,
            e: Vec<i32>,
        }
        let s = to_canonical_json(&X {
            n: 7,
            v: vec![-1],
            e: vec![],
        });
        assert_eq!(s, "{\n  \"e\": [],\n  \"n\": 7,\n  \"v\": [\n    -1\n  ]\n}\n");
    }

    #[test]
    fn output_parses_back() {
        let s = to_canonical_json(&vec![1e-300, -0.0, 12345.678]);
        let v: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 12345.678).abs() < 1e-7);
    }
}
