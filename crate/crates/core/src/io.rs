//! Artifact formats: `%.17g` CSV numbers and binary grid snapshots.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// Formats like C's `printf("%.17g", x)`, which round-trips every finite f64.
pub fn fmt_g17(x: f64) -> String {
    const P: i32 = 17;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if exp < -4 || exp >= P {
        let mantissa = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes a CSV header and rows of numbers formatted with [`fmt_g17`].
pub fn write_csv<W: Write>(out: &mut W, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|&v| fmt_g17(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Reads back a numeric CSV written by [`write_csv`].
pub fn read_csv<R: BufRead>(input: R) -> io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| bad("empty csv".into()))??;
    let header: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
            .collect::<io::Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(bad(format!("row {} has {} fields, header has {}", i + 1, row.len(), header.len())));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Header line of a grid snapshot file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub field: String,
    pub rows: usize,
    pub cols: usize,
    /// Lower-left corner and spacing of the cell-centred grid.
    pub origin: [f64; 2],
    pub spacing: f64,
    pub t: f64,
    pub normalization: f64,
    pub spec: serde_json::Value,
}

/// One JSON header line, then `rows * cols` little-endian f64 in row-major order.
pub fn write_snapshot<W: Write>(out: &mut W, header: &SnapshotHeader, values: &[f64]) -> io::Result<()> {
    assert_eq!(values.len(), header.rows * header.cols, "snapshot size mismatch");
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(mut input: R) -> io::Result<(SnapshotHeader, Vec<f64>)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: SnapshotHeader = serde_json::from_str(line.trim_end())?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != header.rows * header.cols * 8 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "snapshot payload size mismatch"));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}
