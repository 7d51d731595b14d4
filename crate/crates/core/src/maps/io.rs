//! Plain-text map files.
//!
//! ```text
//! BTLAB-MAP v1
//! n r h half d
//! mask i1 .. in v1 .. vd      (one line per active node, lexicographic)
//! ```

use std::io::{BufRead, Write};
use std::sync::Arc;

use super::{DiscreteMap, MapError};
use crate::geometry::{HalfBallGrid, NodeKind};

pub const MAGIC: &str = "BTLAB-MAP v1";

pub fn write_map<W: Write>(map: &DiscreteMap, mut w: W) -> Result<(), MapError> {
    let g = map.grid();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{} {} {} {} {}", g.n(), g.r(), g.h(), u8::from(g.half()), map.d())?;
    let mut idx = vec![0i64; g.n()];
    let mut line = String::new();
    for i in 0..g.len() {
        use std::fmt::Write as _;
        line.clear();
        line.push_str(g.kind(i).label());
        g.index_into(i, &mut idx);
        for v in &idx {
            write!(line, " {v}").unwrap();
        }
        for v in map.value(i) {
            write!(line, " {v}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_map<R: BufRead>(r: R) -> Result<DiscreteMap, MapError> {
    let bad = |line: usize, msg: &str| MapError::Format(format!("line {line}: {msg}"));
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| bad(1, "empty file"))??;
    if first.trim_end() != MAGIC {
        return Err(bad(1, "missing BTLAB-MAP v1 header"));
    }
    let header = lines.next().ok_or_else(|| bad(2, "missing grid descriptor"))??;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 5 {
        return Err(bad(2, "expected `n r h half d`"));
    }
    let n: usize = f[0].parse().map_err(|_| bad(2, "bad n"))?;
    let r: f64 = f[1].parse().map_err(|_| bad(2, "bad r"))?;
    let h: f64 = f[2].parse().map_err(|_| bad(2, "bad h"))?;
    let half = match f[3] {
        "1" | "true" => true,
        "0" | "false" => false,
        _ => return Err(bad(2, "bad half flag")),
    };
    let d: usize = f[4].parse().map_err(|_| bad(2, "bad d"))?;
    let grid = Arc::new(HalfBallGrid::new(n, r, h, half)?);
    let mut values = Vec::with_capacity(grid.len() * d);
    let mut idx = vec![0i64; n];
    for node in 0..grid.len() {
        let ln = node + 3;
        let line = lines.next().ok_or_else(|| bad(ln, "unexpected end of file"))??;
        let mut tok = line.split_whitespace();
        let kind = tok
            .next()
            .and_then(NodeKind::from_label)
            .ok_or_else(|| bad(ln, "bad mask"))?;
        grid.index_into(node, &mut idx);
        if kind != grid.kind(node) {
            return Err(bad(ln, "mask disagrees with grid"));
        }
        for &want in &idx {
            let got: i64 = tok
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(ln, "bad index"))?;
            if got != want {
                return Err(bad(ln, "node out of lexicographic order"));
            }
        }
        for _ in 0..d {
            let v: f64 = tok
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(ln, "bad value"))?;
            values.push(v);
        }
        if tok.next().is_some() {
            return Err(bad(ln, "trailing fields"));
        }
    }
    if let Some(extra) = lines.next() {
        if !extra?.trim().is_empty() {
            return Err(bad(grid.len() + 3, "trailing lines"));
        }
    }
    DiscreteMap::new(grid, d, values)
}

pub fn save(map: &DiscreteMap, path: &std::path::Path) -> Result<(), MapError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_map(map, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<DiscreteMap, MapError> {
    let f = std::fs::File::open(path)?;
    read_map(std::io::BufReader::new(f))
}
