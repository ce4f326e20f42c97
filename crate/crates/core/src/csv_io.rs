//! Long-format CSV: header `row,col,y,x1,...,xp`, one line per cell,
//! 1-based row and column ids.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so a write/read cycle is exact.

use std::io::{Read, Write};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::Family;

fn csv_error(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line: line as usize,
        message: message.into(),
    }
}

fn parse_id(field: &str, name: &str, line: u64) -> Result<usize> {
    let id: usize = field
        .trim()
        .parse()
        .map_err(|_| csv_error(line, format!("{name} id '{field}' is not a positive integer")))?;
    if id == 0 {
        return Err(csv_error(line, format!("{name} ids start at 1")));
    }
    Ok(id)
}

fn parse_value(field: &str, name: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| csv_error(line, format!("{name} value '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(csv_error(line, format!("{name} value '{field}' is not finite")));
    }
    Ok(v)
}

/// Parse a long-format table into a dataset for `family`. The grid size is
/// the largest row and column id seen; every cell must appear exactly once.
pub fn read_long<R: Read>(reader: R, family: Family) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 3 || names[..3] != ["row", "col", "y"] {
        return Err(csv_error(1, format!("header must start with row,col,y; got '{}'", names.join(","))));
    }
    for (k, name) in names[3..].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(csv_error(1, format!("covariate column {} must be named x{}, got '{name}'", k + 4, k + 1)));
        }
    }
    let p = names.len() - 3;
    let mut records: Vec<(usize, usize, f64, Vec<f64>, u64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |pos| pos.line());
            csv_error(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |pos| pos.line());
        if rec.len() != p + 3 {
            return Err(csv_error(line, format!("expected {} fields, found {}", p + 3, rec.len())));
        }
        let row = parse_id(&rec[0], "row", line)?;
        let col = parse_id(&rec[1], "col", line)?;
        let y = parse_value(&rec[2], "y", line)?;
        if !family.accepts(y) {
            return Err(csv_error(line, format!("y = {y} is outside the {} support", family.name())));
        }
        let x = (0..p)
            .map(|k| parse_value(&rec[3 + k], &format!("x{}", k + 1), line))
            .collect::<Result<Vec<_>>>()?;
        records.push((row, col, y, x, line));
    }
    if records.is_empty() {
        return Err(csv_error(1, "no data lines"));
    }
    let m = records.iter().map(|r| r.0).max().expect("nonempty");
    let n = records.iter().map(|r| r.1).max().expect("nonempty");
    let mut seen: Vec<Option<u64>> = vec![None; m * n];
    let mut y = vec![0.0; m * n];
    let mut x = vec![0.0; m * n * p];
    for (row, col, yv, xv, line) in records {
        let idx = (row - 1) * n + (col - 1);
        if let Some(first) = seen[idx] {
            return Err(csv_error(
                line,
                format!("duplicate cell (row={row}, col={col}); first seen on line {first}"),
            ));
        }
        seen[idx] = Some(line);
        y[idx] = yv;
        x[idx * p..(idx + 1) * p].copy_from_slice(&xv);
    }
    if let Some(idx) = seen.iter().position(Option::is_none) {
        let missing = seen.iter().filter(|s| s.is_none()).count();
        return Err(csv_error(
            0,
            format!(
                "grid is {m}x{n} but cell (row={}, col={}) is missing ({missing} missing in total)",
                idx / n + 1,
                idx % n + 1
            ),
        ));
    }
    Dataset::new(m, n, p, y, x, family)
}

pub fn write_long<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string(), "col".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|k| format!("x{k}")));
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(to_io)?;
    for i in 0..data.m() {
        for j in 0..data.n() {
            let mut rec = vec![(i + 1).to_string(), (j + 1).to_string(), data.response(i, j).to_string()];
            rec.extend(data.covariates(i, j).iter().map(f64::to_string));
            w.write_record(&rec).map_err(to_io)?;
        }
    }
    w.flush()?;
    Ok(())
}
