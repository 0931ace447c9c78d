//! Georeferenced single-band grids, multi-year compositing and fishnet aggregation.
//!
//! Grids are stored row-major with the top (northernmost) row first, matching
//! the on-disk ASCII layout:
//!
//! ```text
//! ncols 2
//! nrows 2
//! xllcorner 100
//! yllcorner 30
//! cellsize 0.01
//! NODATA_value -9999
//! 0 1
//! 2 3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::EARTH_RADIUS_KM;

/// Fishnet cell identifiers pack `(row, col)` as `row * CELL_COL_LIMIT + col`.
pub const CELL_COL_LIMIT: u64 = 1_000_000;

pub type CellId = u64;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("grid structure: {0}")]
    Structure(String),
    #[error("grids are not aligned: {0}")]
    Alignment(String),
    #[error("{0}")]
    Kind(String),
    #[error("no grids supplied")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
    pub kind: GridKind,
}

impl RasterGrid {
    /// Builds a grid, checking dimensions, cell size and (for categorical
    /// grids) that every valid pixel holds an integer.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
        kind: GridKind,
    ) -> Result<Self, RasterError> {
        if ncols == 0 || nrows == 0 {
            return Err(RasterError::Structure(format!(
                "grid must have at least one row and column, got {ncols}x{nrows}"
            )));
        }
        if !(cellsize > 0.0 && cellsize.is_finite()) {
            return Err(RasterError::Structure(format!(
                "cellsize must be positive, got {cellsize}"
            )));
        }
        if values.len() != ncols * nrows {
            return Err(RasterError::Structure(format!(
                "expected {} values for a {ncols}x{nrows} grid, found {}",
                ncols * nrows,
                values.len()
            )));
        }
        let grid = Self {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            values,
            kind,
        };
        if kind == GridKind::Categorical {
            if let Some(v) = grid
                .values
                .iter()
                .find(|&&v| !grid.is_nodata(v) && v.fract() != 0.0)
            {
                return Err(RasterError::Kind(format!(
                    "categorical grid holds non-integer value {v}"
                )));
            }
        }
        Ok(grid)
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata || v.is_nan()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    /// Longitude/latitude of the centre of pixel `(row, col)`; row 0 is the top row.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let lon = self.xll + (col as f64 + 0.5) * self.cellsize;
        let lat = self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cellsize;
        (lon, lat)
    }

    pub fn same_georeference(&self, other: &RasterGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }

    /// Canonical ASCII rendering: minimal round-trip decimals, LF line endings.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 4 + 128);
        let _ = writeln!(out, "ncols {}", self.ncols);
        let _ = writeln!(out, "nrows {}", self.nrows);
        let _ = writeln!(out, "xllcorner {}", self.xll);
        let _ = writeln!(out, "yllcorner {}", self.yll);
        let _ = writeln!(out, "cellsize {}", self.cellsize);
        let _ = writeln!(out, "NODATA_value {}", self.nodata);
        for row in self.values.chunks(self.ncols) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_ascii(text: &str, kind: GridKind) -> Result<Self, RasterError> {
        const KEYS: [&str; 6] = [
            "ncols",
            "nrows",
            "xllcorner",
            "yllcorner",
            "cellsize",
            "NODATA_value",
        ];
        let mut lines = text.lines().enumerate();
        let mut header = [0.0f64; 6];
        for (slot, key) in KEYS.iter().enumerate() {
            let (idx, line) = lines.next().ok_or(RasterError::Parse {
                line: slot + 1,
                message: format!("missing header line `{key}`"),
            })?;
            let mut parts = line.split_whitespace();
            let found = parts.next().unwrap_or("");
            if !found.eq_ignore_ascii_case(key) {
                return Err(RasterError::Parse {
                    line: idx + 1,
                    message: format!("expected header key `{key}`, found `{found}`"),
                });
            }
            let value = parts.next().ok_or(RasterError::Parse {
                line: idx + 1,
                message: format!("header `{key}` has no value"),
            })?;
            if parts.next().is_some() {
                return Err(RasterError::Parse {
                    line: idx + 1,
                    message: format!("header `{key}` has trailing tokens"),
                });
            }
            header[slot] = value.parse().map_err(|_| RasterError::Parse {
                line: idx + 1,
                message: format!("header `{key}` value `{value}` is not a number"),
            })?;
        }
        let as_count = |v: f64, key: &str| -> Result<usize, RasterError> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(RasterError::Parse {
                    line: if key == "ncols" { 1 } else { 2 },
                    message: format!("`{key}` must be a positive integer, got {v}"),
                })
            }
        };
        let ncols = as_count(header[0], "ncols")?;
        let nrows = as_count(header[1], "nrows")?;

        let mut values = Vec::with_capacity(ncols * nrows);
        let mut body_rows = 0usize;
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            body_rows += 1;
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| RasterError::Parse {
                    line: idx + 1,
                    message: format!("value `{tok}` is not a number"),
                })?;
                values.push(v);
            }
            let n = values.len() - before;
            if n != ncols {
                return Err(RasterError::Structure(format!(
                    "line {}: expected {ncols} values, found {n}",
                    idx + 1
                )));
            }
        }
        if body_rows != nrows {
            return Err(RasterError::Structure(format!(
                "expected {nrows} data rows, found {body_rows}"
            )));
        }
        Self::new(
            ncols, nrows, header[2], header[3], header[4], header[5], values, kind,
        )
    }
}

pub fn load_grid(path: impl AsRef<Path>, kind: GridKind) -> Result<RasterGrid, RasterError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RasterGrid::parse_ascii(&text, kind)
}

pub fn write_grid(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<(), RasterError> {
    let path = path.as_ref();
    fs::write(path, grid.to_ascii()).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Pixelwise mean across co-registered continuous grids. A pixel is nodata in
/// the result when it is nodata in any input.
pub fn multi_year_mean(grids: &[RasterGrid]) -> Result<RasterGrid, RasterError> {
    let first = grids.first().ok_or(RasterError::Empty)?;
    for (i, g) in grids.iter().enumerate() {
        if g.kind != GridKind::Continuous {
            return Err(RasterError::Kind(format!(
                "grid {i} is categorical; only continuous grids can be averaged"
            )));
        }
        if !first.same_georeference(g) {
            return Err(RasterError::Alignment(format!(
                "grid {i} does not share the georeference of grid 0"
            )));
        }
    }
    let n = grids.len() as f64;
    let values = (0..first.values.len())
        .map(|p| {
            let mut sum = 0.0;
            for g in grids {
                let v = g.values[p];
                if g.is_nodata(v) {
                    return first.nodata;
                }
                sum += v;
            }
            sum / n
        })
        .collect();
    Ok(RasterGrid {
        values,
        ..first.clone()
    })
}

/// Regular lon/lat analysis grid. Cell `(row, col)` spans
/// `[origin_lon + col*size, origin_lon + (col+1)*size)` and likewise in latitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FishnetSpec {
    pub cell_size_deg: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
}

impl Default for FishnetSpec {
    fn default() -> Self {
        Self {
            cell_size_deg: 0.05,
            origin_lon: 0.0,
            origin_lat: 0.0,
        }
    }
}

impl FishnetSpec {
    pub fn new(cell_size_deg: f64, origin_lon: f64, origin_lat: f64) -> Result<Self, RasterError> {
        if !(cell_size_deg > 0.0 && cell_size_deg.is_finite()) {
            return Err(RasterError::Structure(format!(
                "fishnet cell size must be positive, got {cell_size_deg}"
            )));
        }
        Ok(Self {
            cell_size_deg,
            origin_lon,
            origin_lat,
        })
    }

    /// Cell containing a point. A point exactly on an edge belongs to the cell
    /// with the larger index. Points west or south of the origin lie outside
    /// the fishnet.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<CellId> {
        let col = ((lon - self.origin_lon) / self.cell_size_deg).floor();
        let row = ((lat - self.origin_lat) / self.cell_size_deg).floor();
        if !(col >= 0.0 && row >= 0.0) || col >= CELL_COL_LIMIT as f64 {
            return None;
        }
        Some(row as u64 * CELL_COL_LIMIT + col as u64)
    }

    pub fn row_col(id: CellId) -> (u64, u64) {
        (id / CELL_COL_LIMIT, id % CELL_COL_LIMIT)
    }

    /// `(lon_min, lat_min, lon_max, lat_max)`.
    pub fn bounds(&self, id: CellId) -> (f64, f64, f64, f64) {
        let (row, col) = Self::row_col(id);
        let lon0 = self.origin_lon + col as f64 * self.cell_size_deg;
        let lat0 = self.origin_lat + row as f64 * self.cell_size_deg;
        (
            lon0,
            lat0,
            lon0 + self.cell_size_deg,
            lat0 + self.cell_size_deg,
        )
    }

    pub fn centroid(&self, id: CellId) -> (f64, f64) {
        let (row, col) = Self::row_col(id);
        (
            self.origin_lon + (col as f64 + 0.5) * self.cell_size_deg,
            self.origin_lat + (row as f64 + 0.5) * self.cell_size_deg,
        )
    }

    /// Exact area of the cell's lon/lat rectangle on a spherical Earth.
    pub fn area_km2(&self, id: CellId) -> f64 {
        let (lon0, lat0, lon1, lat1) = self.bounds(id);
        spherical_rect_area_km2(lon0, lat0, lon1, lat1)
    }
}

pub fn spherical_rect_area_km2(lon0: f64, lat0: f64, lon1: f64, lat1: f64) -> f64 {
    let dlon = (lon1 - lon0).to_radians();
    EARTH_RADIUS_KM * EARTH_RADIUS_KM * dlon * (lat1.to_radians().sin() - lat0.to_radians().sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Sum,
    Mean,
    /// Population standard deviation (divisor n).
    Sd,
    /// Modal value, ties to the smallest category; categorical grids only.
    Mode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStat {
    pub value: f64,
    pub pixels: usize,
    pub area_km2: f64,
}

/// Aggregates pixels into fishnet cells by pixel-centre containment.
/// Nodata pixels are skipped and cells without any valid pixel are absent.
pub fn aggregate_to_cells(
    grid: &RasterGrid,
    fishnet: &FishnetSpec,
    reducer: Reducer,
) -> Result<BTreeMap<CellId, CellStat>, RasterError> {
    if reducer == Reducer::Mode && grid.kind != GridKind::Categorical {
        return Err(RasterError::Kind(
            "mode reducer requires a categorical grid".into(),
        ));
    }
    let mut members: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
    for row in 0..grid.nrows {
        for col in 0..grid.ncols {
            let v = grid.get(row, col);
            if grid.is_nodata(v) {
                continue;
            }
            let (lon, lat) = grid.pixel_center(row, col);
            if let Some(id) = fishnet.cell_of(lon, lat) {
                members.entry(id).or_default().push(v);
            }
        }
    }
    Ok(members
        .into_iter()
        .map(|(id, vals)| {
            let stat = CellStat {
                value: reduce(&vals, reducer),
                pixels: vals.len(),
                area_km2: fishnet.area_km2(id),
            };
            (id, stat)
        })
        .collect())
}

fn reduce(vals: &[f64], reducer: Reducer) -> f64 {
    let n = vals.len() as f64;
    match reducer {
        Reducer::Sum => vals.iter().sum(),
        Reducer::Mean => vals.iter().sum::<f64>() / n,
        Reducer::Sd => {
            let mean = vals.iter().sum::<f64>() / n;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
        Reducer::Mode => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for v in vals {
                *counts.entry(*v as i64).or_default() += 1;
            }
            // BTreeMap iterates ascending, so `>` keeps the smallest id on ties.
            let mut best = (i64::MIN, 0usize);
            for (cat, c) in counts {
                if c > best.1 {
                    best = (cat, c);
                }
            }
            best.0 as f64
        }
    }
}
