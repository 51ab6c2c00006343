//! Flat `key=value` text records and fixed-precision number formatting.

use super::depth::DepthEvalReport;
use super::normal::NormalEvalReport;
use crate::error::{Error, Result};

/// Six significant digits in the shortest of fixed or exponent notation,
/// with trailing zeros removed.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim(&format!("{v:.decimals$}")).to_string()
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn record(label: &str, keys: &[&str], values: &[f64], n_valid: usize) -> String {
    let mut out = format!("sample={label}");
    for (k, v) in keys.iter().zip(values) {
        if *k == "n_valid" {
            out.push_str(&format!(" n_valid={n_valid}"));
        } else {
            out.push_str(&format!(" {k}={}", fmt_sig(*v)));
        }
    }
    out
}

pub fn depth_record(label: &str, r: &DepthEvalReport) -> String {
    record(label, &DepthEvalReport::KEYS, &r.values(), r.n_valid)
}

pub fn normal_record(label: &str, r: &NormalEvalReport) -> String {
    record(label, &NormalEvalReport::KEYS, &r.values(), r.n_valid)
}

/// Parses a depth record back, ignoring the `sample` field.
pub fn parse_depth_record(line: &str) -> Result<DepthEvalReport> {
    let mut vals = [f64::NAN; 11];
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| Error::Parse { line: 1, msg: format!("bad field {field:?}") })?;
        if k == "sample" {
            continue;
        }
        let pos = DepthEvalReport::KEYS
            .iter()
            .position(|key| *key == k)
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("unknown key {k:?}") })?;
        vals[pos] = v.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad number {v:?}") })?;
    }
    if let Some(i) = vals.iter().position(|v| v.is_nan()) {
        return Err(Error::Parse { line: 1, msg: format!("missing key {}", DepthEvalReport::KEYS[i]) });
    }
    Ok(DepthEvalReport {
        rms: vals[0],
        rms_log: vals[1],
        log10: vals[2],
        a_rel: vals[3],
        s_rel: vals[4],
        d05: vals[5],
        d1: vals[6],
        d2: vals[7],
        d3: vals[8],
        si_log: vals[9],
        n_valid: vals[10] as usize,
    })
}
