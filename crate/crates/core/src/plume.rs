//! Closed-form Gaussian plume evaluation and multi-source field synthesis.
//!
//! Coordinates follow the usual plume convention: wind blows along `+x`,
//! `y` is crosswind and `z` is height above ground. A source at
//! `(X, Y, H)` contributes nothing at or upwind of its own `x` position.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pasquill atmospheric stability category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StabilityClass {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl StabilityClass {
    pub const ALL: [StabilityClass; 6] = [
        StabilityClass::A,
        StabilityClass::B,
        StabilityClass::C,
        StabilityClass::D,
        StabilityClass::E,
        StabilityClass::F,
    ];
}

impl fmt::Display for StabilityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StabilityClass::A => "A",
            StabilityClass::B => "B",
            StabilityClass::C => "C",
            StabilityClass::D => "D",
            StabilityClass::E => "E",
            StabilityClass::F => "F",
        };
        f.write_str(s)
    }
}

impl FromStr for StabilityClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(StabilityClass::A),
            "B" => Ok(StabilityClass::B),
            "C" => Ok(StabilityClass::C),
            "D" => Ok(StabilityClass::D),
            "E" => Ok(StabilityClass::E),
            "F" => Ok(StabilityClass::F),
            other => Err(Error::domain(format!("unknown stability class {other:?}"))),
        }
    }
}

/// Briggs rural (open-country) spread parameters `(sigma_y, sigma_z)` in
/// meters at downwind distance `downwind_x` meters.
pub fn dispersion_coefficients(stability: StabilityClass, downwind_x: f64) -> Result<(f64, f64)> {
    if !(downwind_x > 0.0) || !downwind_x.is_finite() {
        return Err(Error::domain(format!(
            "dispersion coefficients need downwind distance > 0, got {downwind_x}"
        )));
    }
    let x = downwind_x;
    let lateral = 1.0 / (1.0 + 0.0001 * x).sqrt();
    let (sigma_y, sigma_z) = match stability {
        StabilityClass::A => (0.22 * x * lateral, 0.20 * x),
        StabilityClass::B => (0.16 * x * lateral, 0.12 * x),
        StabilityClass::C => (0.11 * x * lateral, 0.08 * x / (1.0 + 0.0002 * x).sqrt()),
        StabilityClass::D => (0.08 * x * lateral, 0.06 * x / (1.0 + 0.0015 * x).sqrt()),
        StabilityClass::E => (0.06 * x * lateral, 0.03 * x / (1.0 + 0.0003 * x)),
        StabilityClass::F => (0.04 * x * lateral, 0.016 * x / (1.0 + 0.0003 * x)),
    };
    Ok((sigma_y, sigma_z))
}

/// One continuous point emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlumeSource {
    /// Emission rate Q in g/s.
    pub emission_rate: f64,
    /// Mean wind speed u in m/s.
    pub wind_speed: f64,
    /// Effective stack height H in m.
    pub stack_height: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub stability: StabilityClass,
}

impl PlumeSource {
    pub fn new(
        emission_rate: f64,
        wind_speed: f64,
        stack_height: f64,
        origin_x: f64,
        origin_y: f64,
        stability: StabilityClass,
    ) -> Result<Self> {
        let source = PlumeSource {
            emission_rate,
            wind_speed,
            stack_height,
            origin_x,
            origin_y,
            stability,
        };
        source.validate()?;
        Ok(source)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.emission_rate > 0.0) || !self.emission_rate.is_finite() {
            return Err(Error::domain(format!("emission rate must be > 0, got {}", self.emission_rate)));
        }
        if !(self.wind_speed > 0.0) || !self.wind_speed.is_finite() {
            return Err(Error::domain(format!("wind speed must be > 0, got {}", self.wind_speed)));
        }
        if !(self.stack_height >= 0.0) || !self.stack_height.is_finite() {
            return Err(Error::domain(format!("stack height must be >= 0, got {}", self.stack_height)));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(Error::domain("source origin must be finite"));
        }
        Ok(())
    }
}

/// Concentration (g/m³) from one source at `point = (x, y, z)` in meters.
///
/// Zero at and upwind of the source (`x - X <= 0`).
pub fn single_source_concentration(source: &PlumeSource, point: [f64; 3]) -> Result<f64> {
    source.validate()?;
    let [x, y, z] = point;
    if !x.is_finite() || !y.is_finite() || !z.is_finite() {
        return Err(Error::domain(format!("non-finite probe point {point:?}")));
    }
    if z < 0.0 {
        return Err(Error::domain(format!("probe height must be >= 0, got {z}")));
    }
    let dx = x - source.origin_x;
    if dx <= 0.0 {
        return Ok(0.0);
    }
    let dy = y - source.origin_y;
    let (sy, sz) = dispersion_coefficients(source.stability, dx)?;
    let h = source.stack_height;
    let scale = source.emission_rate / (2.0 * PI * source.wind_speed * sy * sz);
    let lateral = (-(dy * dy) / (2.0 * sy * sy)).exp();
    let direct = (-(z - h) * (z - h) / (2.0 * sz * sz)).exp();
    let reflected = (-(z + h) * (z + h) / (2.0 * sz * sz)).exp();
    Ok(scale * lateral * (direct + reflected))
}

/// Superposed concentration of all `sources` at `point`.
pub fn total_concentration(sources: &[PlumeSource], point: [f64; 3]) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::domain("total concentration needs at least one source"));
    }
    sources
        .iter()
        .try_fold(0.0, |acc, s| Ok(acc + single_source_concentration(s, point)?))
}

/// Regular 3-D cell grid. Cell `(i, j, k)` has its center at
/// `origin + (index + 0.5) * cell_size` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Cell edge length in meters along x, y and z.
    pub cell_size: [f64; 3],
    pub origin: [f64; 3],
}

impl Default for GridSpec {
    /// 16³ cells spanning 0–2000 m along and across the wind and 0–32 m in height.
    fn default() -> Self {
        GridSpec {
            nx: 16,
            ny: 16,
            nz: 16,
            cell_size: [125.0, 125.0, 2.0],
            origin: [0.0, 0.0, 0.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.nz < 2 {
            return Err(Error::domain(format!(
                "grid needs at least 2 cells per axis, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        if self.cell_size.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::domain(format!("cell sizes must be > 0, got {:?}", self.cell_size)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("grid origin must be finite"));
        }
        if self.origin[2] < 0.0 {
            return Err(Error::domain("grid must not extend below ground"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Row-major flat index (x slowest, z fastest).
    pub fn flat_index(&self, cell: [usize; 3]) -> usize {
        (cell[0] * self.ny + cell[1]) * self.nz + cell[2]
    }

    pub fn contains(&self, cell: [usize; 3]) -> bool {
        cell[0] < self.nx && cell[1] < self.ny && cell[2] < self.nz
    }

    pub fn cell_center(&self, cell: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (cell[a] as f64 + 0.5) * self.cell_size[a])
    }

    /// Center coordinate of index `i` along `axis` alone.
    pub fn axis_center(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * self.cell_size[axis]
    }

    /// Nearest cell to a point inside the domain; ties go to the lower index.
    pub fn nearest_cell(&self, point: [f64; 3]) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let rel = (point[a] - self.origin[a]) / self.cell_size[a];
            if !rel.is_finite() || rel < 0.0 || rel > dims[a] as f64 {
                return None;
            }
            // cell centers sit at half-integers of `rel`
            let idx = (rel - 1.0).ceil().max(0.0) as usize;
            cell[a] = idx.min(dims[a] - 1);
        }
        Some(cell)
    }
}

/// Rasterized multi-source concentration field.
#[derive(Debug, Clone, PartialEq)]
pub struct PlumeField {
    pub grid: GridSpec,
    /// Row-major values, see [`GridSpec::flat_index`].
    pub concentrations: Vec<f64>,
    pub sources: Vec<PlumeSource>,
    pub source_cells: Vec<[usize; 3]>,
}

impl PlumeField {
    pub fn at(&self, cell: [usize; 3]) -> f64 {
        self.concentrations[self.grid.flat_index(cell)]
    }

    pub fn max_concentration(&self) -> f64 {
        self.concentrations.iter().copied().fold(0.0, f64::max)
    }

    /// Checks the structural invariants; used after loading from disk.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.concentrations.len() != self.grid.cell_count() {
            return Err(Error::Construction(format!(
                "expected {} concentration values, found {}",
                self.grid.cell_count(),
                self.concentrations.len()
            )));
        }
        if self.concentrations.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Construction("concentrations must be finite and >= 0".into()));
        }
        if self.sources.len() != self.source_cells.len() {
            return Err(Error::Construction("one source cell per source required".into()));
        }
        for s in &self.sources {
            s.validate()?;
        }
        if let Some(c) = self.source_cells.iter().find(|c| !self.grid.contains(**c)) {
            return Err(Error::Construction(format!("source cell {c:?} outside the grid")));
        }
        Ok(())
    }
}

/// Evaluates the superposed field at every cell center.
pub fn rasterize_field(sources: &[PlumeSource], grid: &GridSpec) -> Result<PlumeField> {
    grid.validate()?;
    if sources.is_empty() {
        return Err(Error::Construction("a field needs at least one source".into()));
    }
    let mut source_cells = Vec::with_capacity(sources.len());
    for s in sources {
        s.validate()?;
        let loc = [s.origin_x, s.origin_y, s.stack_height];
        let cell = grid.nearest_cell(loc).ok_or_else(|| {
            Error::Construction(format!("source at {loc:?} lies outside the grid"))
        })?;
        source_cells.push(cell);
    }
    let mut concentrations = vec![0.0; grid.cell_count()];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            for k in 0..grid.nz {
                let cell = [i, j, k];
                concentrations[grid.flat_index(cell)] =
                    total_concentration(sources, grid.cell_center(cell))?;
            }
        }
    }
    Ok(PlumeField {
        grid: *grid,
        concentrations,
        sources: sources.to_vec(),
        source_cells,
    })
}

/// Multiplicative-scale Gaussian sensor noise: `c + N(0, (k|c|)²)`.
pub fn apply_observation_noise<R: Rng + ?Sized>(c: f64, k: f64, rng: &mut R) -> Result<f64> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::domain(format!("noise fraction must lie in [0, 1], got {k}")));
    }
    if !c.is_finite() {
        return Err(Error::domain(format!("non-finite concentration {c}")));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(c + k * c.abs() * z)
}
