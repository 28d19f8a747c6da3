//! JSON helpers: floats are written with 17 significant digits.

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn f64_list(v: &[f64], out: &mut String) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(*x));
    }
    out.push(']');
}

pub fn ser_f64s<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(S::Error::custom("non-finite float"));
    }
    let mut buf = String::with_capacity(v.len() * 24 + 2);
    f64_list(v, &mut buf);
    RawValue::from_string(buf)
        .map_err(S::Error::custom)?
        .serialize(s)
}

pub fn ser_f64_rows<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    if v.iter().flatten().any(|x| !x.is_finite()) {
        return Err(S::Error::custom("non-finite float"));
    }
    let mut buf = String::from("[");
    for (i, row) in v.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        f64_list(row, &mut buf);
    }
    buf.push(']');
    RawValue::from_string(buf)
        .map_err(S::Error::custom)?
        .serialize(s)
}
