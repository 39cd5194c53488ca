//! Report envelope, projection files and atomic writes.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use wda_core::traceratio::Projection;

use crate::error::{CliError, CliResult};

pub const TOOL: &str = "wda";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Top-level JSON object written by every subcommand.
#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
    pub result: &'a R,
}

pub fn report_json<C: Serialize, R: Serialize>(command: &str, config: &C, result: &R) -> CliResult<Vec<u8>> {
    let report = Report {
        tool: TOOL,
        version: VERSION,
        command,
        config,
        result,
    };
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::from(e).context(path.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| CliError::from(e.error).context(path.display()))?;
    Ok(())
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

/// Plain-text matrix: a header line `d p`, then `d` rows of `p` values in
/// scientific notation with 17 significant digits.
pub fn format_projection(p: &Projection) -> String {
    let m = p.matrix();
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

pub fn parse_projection(text: &str) -> CliResult<Projection> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::parse("projection file is empty"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::parse(format!("line 1: expected header `d p`, found {header:?}")))?;
    let [d, p] = dims[..] else {
        return Err(CliError::parse(format!(
            "line 1: expected header `d p`, found {header:?}"
        )));
    };
    let mut values = Vec::with_capacity(d * p);
    let mut rows = 0;
    for (i, line) in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::parse(format!("line {}: non-numeric entry", i + 1)))?;
        if row.len() != p {
            return Err(CliError::parse(format!(
                "line {}: expected {p} values, found {}",
                i + 1,
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
    }
    if rows != d {
        return Err(CliError::parse(format!("expected {d} rows, found {rows}")));
    }
    let m = Array2::from_shape_vec((d, p), values).expect("d·p values");
    Ok(Projection::new(m)?)
}

pub fn read_projection(path: &Path) -> CliResult<Projection> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    parse_projection(&text).map_err(|e| e.context(path.display()))
}
