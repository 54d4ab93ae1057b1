//! Plain-text field checkpoints.
//!
//! ```text
//! kfp-field v1 <nx> <nv> <Lx> <Lv> <t>
//! <nv values of row 0>
//! ...
//! <nv values of row nx-1>
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{KfpError, Result};
use crate::solver::{build_grid, GridField};

const MAGIC: &str = "kfp-field";

pub fn write_field(f: &GridField, mut out: impl Write) -> Result<()> {
    let g = &f.grid;
    let mut s = String::with_capacity(g.len() * 25 + 128);
    writeln!(s, "{MAGIC} v1 {} {} {:.16e} {:.16e} {:.16e}", g.nx, g.nv, g.lx, g.lv, f.t).unwrap();
    for i in 0..g.nx {
        let row = &f.values[i * g.nv..(i + 1) * g.nv];
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(' ');
            }
            write!(s, "{v:.16e}").unwrap();
        }
        s.push('\n');
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_field(input: impl BufRead) -> Result<GridField> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| KfpError::Format("empty checkpoint".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&MAGIC) {
        return Err(KfpError::Format(format!("bad magic in header `{header}`")));
    }
    match parts.get(1) {
        Some(&"v1") => {}
        Some(other) => return Err(KfpError::UnsupportedVersion(other.to_string())),
        None => return Err(KfpError::Format("header has no version".into())),
    }
    if parts.len() != 7 {
        return Err(KfpError::Format(format!("header `{header}` must have 7 fields")));
    }
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| KfpError::Format(format!("bad integer `{s}`: {e}")))
    };
    let real = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| KfpError::Format(format!("bad real `{s}`: {e}")))
    };
    let (nx, nv) = (int(parts[2])?, int(parts[3])?);
    let (lx, lv, t) = (real(parts[4])?, real(parts[5])?, real(parts[6])?);
    let grid = build_grid(lx, lv, nx, nv).map_err(|e| KfpError::Format(e.to_string()))?;
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..nx {
        let line = lines
            .next()
            .ok_or_else(|| KfpError::Format(format!("truncated: missing row {i} of {nx}")))??;
        let before = values.len();
        for tok in line.split_whitespace() {
            values.push(real(tok)?);
        }
        if values.len() - before != nv {
            return Err(KfpError::Format(format!(
                "row {i} has {} values, expected {nv}",
                values.len() - before
            )));
        }
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(KfpError::Format("trailing data after the last row".into()));
        }
    }
    GridField::new(grid, values, t).map_err(|e| KfpError::Format(e.to_string()))
}

pub fn save(f: &GridField, path: impl AsRef<std::path::Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_field(f, std::io::BufWriter::new(file))
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<GridField> {
    let file = std::fs::File::open(path)?;
    read_field(std::io::BufReader::new(file))
}
