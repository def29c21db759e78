//! Plot-ready CSV exports: field slices, 3-D scatter and smoothed learning curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::METRICS_HEADER;
use crate::plume::{total_concentration, PlumeField};

/// Field evaluated at every `(x, y)` cell center at height `z` meters.
/// Returns rows of `(i, j, x, y, concentration)`.
pub fn z_slice(field: &PlumeField, z: f64) -> Result<Vec<(usize, usize, f64, f64, f64)>> {
    let g = &field.grid;
    let top = g.origin[2] + g.nz as f64 * g.cell_size[2];
    if !(z >= g.origin[2] && z <= top) {
        return Err(Error::domain(format!("height {z} m lies outside the grid's {}–{top} m", g.origin[2])));
    }
    let mut rows = Vec::with_capacity(g.nx * g.ny);
    for i in 0..g.nx {
        for j in 0..g.ny {
            let (x, y) = (g.axis_center(0, i), g.axis_center(1, j));
            rows.push((i, j, x, y, total_concentration(&field.sources, [x, y, z])?));
        }
    }
    Ok(rows)
}

pub fn write_z_slice_csv(field: &PlumeField, z: f64, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "i,j,x,y,z,concentration")?;
    for (i, j, x, y, c) in z_slice(field, z)? {
        writeln!(w, "{i},{j},{x},{y},{z},{c}")?;
    }
    w.flush()?;
    Ok(())
}

/// Every cell of the rasterized field, one row each.
pub fn write_scatter_csv(field: &PlumeField, path: &Path) -> Result<()> {
    let g = &field.grid;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "i,j,k,x,y,z,concentration")?;
    for i in 0..g.nx {
        for j in 0..g.ny {
            for k in 0..g.nz {
                let [x, y, z] = g.cell_center([i, j, k]);
                writeln!(w, "{i},{j},{k},{x},{y},{z},{}", field.at([i, j, k]))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Trailing mean over the last `window` values; the first rows average
/// whatever is available.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::domain("window must be positive"));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

/// Copies a metrics CSV to `out` with a `reward_ma` column appended.
/// Returns the smoothed values.
pub fn export_learning_curve(metrics: &Path, window: usize, out: &Path) -> Result<Vec<f64>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: metrics.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(metrics)
        .map_err(|e| Error::Load(format!("{}: {e}", metrics.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if line == 1 {
            if rec.iter().ne(METRICS_HEADER) {
                return Err(parse_err(1, format!("expected header {}", METRICS_HEADER.join(","))));
            }
            continue;
        }
        if rec.len() != METRICS_HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", METRICS_HEADER.len(), rec.len())));
        }
        let reward: f64 = rec[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("total_reward {:?} is not a number", &rec[3])))?;
        rows.push((rec, reward));
    }
    let rewards: Vec<f64> = rows.iter().map(|(_, r)| *r).collect();
    let smoothed = moving_average(&rewards, window)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out)?));
    let mut header: Vec<&str> = METRICS_HEADER.to_vec();
    header.push("reward_ma");
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(io)?;
    for ((rec, _), ma) in rows.iter().zip(&smoothed) {
        let mut fields: Vec<String> = rec.iter().map(str::to_string).collect();
        fields.push(ma.to_string());
        w.write_record(&fields).map_err(io)?;
    }
    w.flush()?;
    Ok(smoothed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plume::{rasterize_field, GridSpec, PlumeSource, StabilityClass};

    #[test]
    fn moving_average_cases() {
        let r = [-5.0, -3.0, 4.0, 0.0, -10.0];
        assert_eq!(moving_average(&r, 1).unwrap(), r);
        assert_eq!(moving_average(&r, 2).unwrap(), [-5.0, -4.0, 0.5, 2.0, -5.0]);
        assert_eq!(moving_average(&[7.0; 9], 4).unwrap(), [7.0; 9]);
        assert!(moving_average(&r, 0).is_err());
    }

    #[test]
    fn slice_uses_exact_height() {
        let src = PlumeSource::new(10.0, 10.0, 16.0, 62.5, 1062.5, StabilityClass::A).unwrap();
        let field = rasterize_field(&[src], &GridSpec::default()).unwrap();
        let rows = z_slice(&field, 14.0).unwrap();
        assert_eq!(rows.len(), 256);
        for (_, _, x, y, c) in rows {
            assert_eq!(c, total_concentration(&[src], [x, y, 14.0]).unwrap());
        }
        assert!(z_slice(&field, 40.0).is_err());
    }
}
