//! Parsing of grid shapes and tuning lists given on the command line.

use serde::Serialize;

/// A parsed list kept as one argument value.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

/// Parses `MxN` into `(M, N)`.
pub fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxN, got `{s}`"))?;
    let m = a.trim().parse::<usize>().map_err(|_| format!("bad width in `{s}`"))?;
    let n = b.trim().parse::<usize>().map_err(|_| format!("bad height in `{s}`"))?;
    if m == 0 || n == 0 {
        return Err(format!("grid dimensions must be positive, got `{s}`"));
    }
    Ok((m, n))
}

/// Parses `UxV` extents into positive reals.
pub fn parse_extent(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected UxV, got `{s}`"))?;
    let u = a.trim().parse::<f64>().map_err(|_| format!("bad extent in `{s}`"))?;
    let v = b.trim().parse::<f64>().map_err(|_| format!("bad extent in `{s}`"))?;
    if !(u > 0.0 && v > 0.0 && u.is_finite() && v.is_finite()) {
        return Err(format!("extents must be positive, got `{s}`"));
    }
    Ok((u, v))
}

pub fn real_list(s: &str) -> Result<List<f64>, String> {
    parse_real_list(s).map(List)
}

pub fn usize_list(s: &str) -> Result<List<usize>, String> {
    parse_usize_list(s).map(List)
}

/// Comma-separated items, each a value or an inclusive range `a:b` or
/// `a:b:step`. The result is sorted and deduplicated.
pub fn parse_real_list(s: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}` in `{s}`"));
        match parts.as_slice() {
            [v] => out.push(num(v)?),
            [a, b] | [a, b, _] => {
                let (a, b) = (num(a)?, num(b)?);
                let step = if parts.len() == 3 { num(parts[2])? } else { 1.0 };
                if !(step > 0.0) || b < a {
                    return Err(format!("bad range `{item}`"));
                }
                let count = ((b - a) / step + 1e-9).floor() as usize;
                out.extend((0..=count).map(|k| a + k as f64 * step));
            }
            _ => return Err(format!("bad list item `{item}`")),
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(format!("non-finite value in `{s}`"));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    parse_real_list(s)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("expected non-negative integers, got {v}"))
            }
        })
        .collect()
}
