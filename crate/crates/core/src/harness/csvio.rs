//! Minimal CSV writing/reading with exact numeric round-trips.
//!
//! Cells never contain commas (method names are identifiers, numbers use
//! `.` decimals), so no quoting is needed. Full-precision columns format
//! floats with Rust's shortest-round-trip `{}` rendering, which parses back
//! bit-exactly; table columns meant for human eyes use fixed decimals.
//! Each file is written through one buffered writer in a single pass.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Shortest decimal string that parses back to exactly `x`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Megabits per second with two decimals — the table rendering of a bps
/// quantity.
pub fn fmt_mbps(bps: f64) -> String {
    format!("{:.2}", bps / 1e6)
}

/// Writes `header` plus `rows` as comma-separated lines with `\n` endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "CSV row width mismatch");
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`] back into (header, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_owned).collect(),
        None => return Err(Error::Parse(format!("{}: empty CSV", path.display()))),
    };
    let mut rows = Vec::new();
    for line in lines {
        let row: Vec<String> = line.split(',').map(str::to_owned).collect();
        if row.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: row has {} cells, header has {}",
                path.display(),
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Parses a cell produced by [`fmt_f64`] (or any decimal float).
pub fn parse_f64(cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| Error::Parse(format!("expected a float, got `{cell}`")))
}
