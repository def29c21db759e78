//! Plain-text map file format.
//!
//! ```text
//! plume-map 1
//! grid <nx> <ny> <nz>
//! cell_size <dx> <dy> <dz>
//! origin <x0> <y0> <z0>
//! sources <n>
//! source <Q> <u> <H> <X> <Y> <class> <i> <j> <k>
//! ...
//! data
//! <one concentration per line, x-major then y then z>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a
//! save/load cycle is lossless and identical fields give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::plume::{GridSpec, PlumeField, PlumeSource};

pub const MAP_MAGIC: &str = "plume-map";
pub const MAP_VERSION: u32 = 1;

pub fn encode_map(field: &PlumeField) -> String {
    let g = &field.grid;
    let mut out = String::with_capacity(field.concentrations.len() * 24 + 256);
    let _ = writeln!(out, "{MAP_MAGIC} {MAP_VERSION}");
    let _ = writeln!(out, "grid {} {} {}", g.nx, g.ny, g.nz);
    let _ = writeln!(out, "cell_size {} {} {}", g.cell_size[0], g.cell_size[1], g.cell_size[2]);
    let _ = writeln!(out, "origin {} {} {}", g.origin[0], g.origin[1], g.origin[2]);
    let _ = writeln!(out, "sources {}", field.sources.len());
    for (s, c) in field.sources.iter().zip(&field.source_cells) {
        let _ = writeln!(
            out,
            "source {} {} {} {} {} {} {} {} {}",
            s.emission_rate, s.wind_speed, s.stack_height, s.origin_x, s.origin_y, s.stability, c[0], c[1], c[2]
        );
    }
    out.push_str("data\n");
    for v in &field.concentrations {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn save_map(field: &PlumeField, path: &Path) -> Result<()> {
    fs::write(path, encode_map(field))?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<PlumeField> {
    let text = fs::read_to_string(path)?;
    decode_map(&text, path)
}

pub fn decode_map(text: &str, path: &Path) -> Result<PlumeField> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut header = |key: &str, arity: usize| -> Result<(usize, Vec<String>)> {
        let (n, line) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` line")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(n, format!("expected `{key}`")));
        }
        let rest: Vec<String> = parts.map(str::to_owned).collect();
        if rest.len() != arity {
            return Err(err(n, format!("`{key}` takes {arity} values, found {}", rest.len())));
        }
        Ok((n, rest))
    };

    let (n, magic) = header(MAP_MAGIC, 1)?;
    if magic[0] != MAP_VERSION.to_string() {
        return Err(err(n, format!("unsupported map version {}", magic[0])));
    }
    let (n, dims) = header("grid", 3)?;
    let dims = parse_all::<usize>(&dims).map_err(|m| err(n, m))?;
    let (n, cell) = header("cell_size", 3)?;
    let cell = parse_all::<f64>(&cell).map_err(|m| err(n, m))?;
    let (n, origin) = header("origin", 3)?;
    let origin = parse_all::<f64>(&origin).map_err(|m| err(n, m))?;
    let (n, count) = header("sources", 1)?;
    let count = parse_all::<usize>(&count).map_err(|m| err(n, m))?[0];
    let grid = GridSpec {
        nx: dims[0],
        ny: dims[1],
        nz: dims[2],
        cell_size: [cell[0], cell[1], cell[2]],
        origin: [origin[0], origin[1], origin[2]],
    };

    let mut sources = Vec::with_capacity(count);
    let mut source_cells = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, f) = header("source", 9)?;
        let nums = parse_all::<f64>(&f[..5]).map_err(|m| err(n, m))?;
        let stability = f[5].parse().map_err(|e: Error| err(n, e.to_string()))?;
        let idx = parse_all::<usize>(&f[6..]).map_err(|m| err(n, m))?;
        let source = PlumeSource::new(nums[0], nums[1], nums[2], nums[3], nums[4], stability)
            .map_err(|e| err(n, e.to_string()))?;
        sources.push(source);
        source_cells.push([idx[0], idx[1], idx[2]]);
    }
    header("data", 0)?;

    let mut concentrations = Vec::with_capacity(grid.nx * grid.ny * grid.nz);
    for (n, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| err(n, format!("bad concentration {line:?}")))?;
        concentrations.push(v);
    }
    let field = PlumeField {
        grid,
        concentrations,
        sources,
        source_cells,
    };
    field.validate().map_err(|e| err(0, e.to_string()))?;
    Ok(field)
}

fn parse_all<T: std::str::FromStr>(items: &[String]) -> std::result::Result<Vec<T>, String> {
    items
        .iter()
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot parse {s:?}")))
        .collect()
}
