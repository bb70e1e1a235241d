//! Reading count series from delimited or one-value-per-line text.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::CountSeries;

fn delimiter_of(line: &str) -> Option<char> {
    if line.contains(',') {
        Some(',')
    } else if line.contains('\t') {
        Some('\t')
    } else {
        None
    }
}

fn fields(line: &str, delim: Option<char>) -> Vec<&str> {
    match delim {
        Some(d) => line.split(d).map(str::trim).collect(),
        None => vec![line.trim()],
    }
}

fn parse_count(raw: &str, line: usize) -> Result<u64> {
    let raw = raw.trim().trim_matches('"');
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(v);
    }
    match raw.parse::<f64>() {
        Ok(v) if v < 0.0 => Err(Error::Parse { line, message: format!("negative count {raw:?}") }),
        Ok(v) if v.fract() == 0.0 && v.is_finite() && v <= u64::MAX as f64 => Ok(v as u64),
        _ => Err(Error::Parse { line, message: format!("{raw:?} is not a nonnegative integer") }),
    }
}

/// Parses a series from text.
///
/// The delimiter (comma or tab) is taken from the first nonblank line; that
/// line is a header when any of its fields is non-numeric. `column` selects a
/// field by header name or zero-based index. Without it, a single-column file
/// uses that column, and a multi-column file uses a header field named
/// `count` (any case) if present, otherwise the last column.
pub fn parse_series(text: &str, column: Option<&str>) -> Result<CountSeries> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let Some((first_no, first)) = lines.next() else {
        return Err(Error::Input("series file is empty".into()));
    };
    let delim = delimiter_of(first);
    let head = fields(first, delim);
    let is_header = head.iter().any(|f| f.trim_matches('"').parse::<f64>().is_err());
    let names: Vec<String> = head.iter().map(|f| f.trim_matches('"').to_string()).collect();

    let idx = match column {
        Some(c) => {
            if let Some(k) = is_header.then(|| names.iter().position(|n| n == c)).flatten() {
                k
            } else if let Ok(k) = c.parse::<usize>() {
                if k >= head.len() {
                    return Err(Error::Input(format!("column {k} out of range ({} columns)", head.len())));
                }
                k
            } else {
                return Err(Error::Input(format!("no column named {c:?}")));
            }
        }
        None if head.len() == 1 => 0,
        None => {
            let named = is_header.then(|| names.iter().position(|n| n.eq_ignore_ascii_case("count"))).flatten();
            named.unwrap_or(head.len() - 1)
        }
    };

    let mut values = Vec::new();
    if !is_header {
        values.push(parse_count(head[idx], first_no)?);
    }
    for (no, line) in lines {
        let f = fields(line, delim);
        let raw = f
            .get(idx)
            .ok_or_else(|| Error::Parse { line: no, message: format!("missing column {idx}") })?;
        values.push(parse_count(raw, no)?);
    }
    if values.is_empty() {
        return Err(Error::Input("series file has a header but no values".into()));
    }
    Ok(CountSeries::new(values))
}

pub fn load_series(path: &Path, column: Option<&str>) -> Result<CountSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_series(&text, column)
}
