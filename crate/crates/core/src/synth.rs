//! Synthetic worlds with planted discontinuities.
//!
//! A world is a lon/lat rectangle split into `strips` latitude bands. Each
//! strip has its own roughly meridian border with the treated province to
//! the east. Pixel brightness is
//!
//! ```text
//! clamp(g(x, y) + delta*T + trend_T(d) + band_offset + noise, 0, 63)
//! ```
//!
//! where `x, y` are degrees from the extent centre, `d` is the signed
//! distance (km) to the strip's border and `trend_T` is a polynomial in `d`
//! chosen per side (no constant term). Covariates are smooth fields plus a
//! configurable jump and pixel noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{self, BorderLocator, BorderPolyline, GeometryError};
use crate::outcomes::{build_cell_table, CellTable, LayerSet, TableError, TableOptions};
use crate::raster::{write_grid, FishnetSpec, GridKind, RasterError, RasterGrid};
use crate::rdd::{bias_corrected_estimate, estimate_at, RddError, RddSample, RddSpec};
use crate::rng::Stream;
use crate::studies::{City, Prefecture, ProvinceRank};

pub const NODATA: f64 = -9999.0;
pub const DN_MAX: f64 = 63.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Rdd(#[from] RddError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extent {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BorderShape {
    Straight,
    Sinusoidal { amplitude_deg: f64, period_deg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BandOrientation {
    /// Bands stacked north to south, each crossing the border.
    Latitude,
    /// Bands side by side west to east.
    Longitude,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DialectBands {
    pub count: usize,
    pub orientation: BandOrientation,
    /// Brightness added inside band `k` (missing entries are 0).
    pub offsets: Vec<f64>,
}

/// One value per covariate layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Covariates {
    pub elevation: f64,
    pub precipitation: f64,
    /// On the log scale.
    pub population: f64,
    pub dist_road: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticWorldConfig {
    pub extent: Extent,
    pub pixel_size: f64,
    pub strips: usize,
    pub border: BorderShape,
    /// Mean longitude of every border; the extent centre when `None`.
    pub border_lon: Option<f64>,
    pub delta: f64,
    /// Coefficients of `g` ordered `1, x, y, x^2, xy, y^2, x^3, ...`.
    pub surface: Vec<f64>,
    /// Coefficients of `d, d^2, ...` west (untreated) of the border.
    pub trend_low: Vec<f64>,
    /// Coefficients of `d, d^2, ...` east (treated) of the border.
    pub trend_high: Vec<f64>,
    pub noise_sd: f64,
    /// West-to-east AR(1) coefficient of the brightness noise; 0 is white.
    pub noise_ar: f64,
    pub covariate_jumps: Covariates,
    pub covariate_noise_sd: Covariates,
    /// Multiplier on the latitude terms of the covariate fields. Zero makes
    /// every covariate constant along a meridian border apart from noise.
    pub covariate_lat_gradient: f64,
    pub dialect_bands: DialectBands,
    pub pop_zero_fraction: f64,
    pub rank_high: i32,
    pub rank_low: i32,
    /// Per-strip `(rank_high, rank_low)`; falls back to the pair above.
    pub border_ranks: Vec<(i32, i32)>,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            extent: Extent {
                lon_min: -0.6,
                lat_min: 0.0,
                lon_max: 0.6,
                lat_max: 1.0,
            },
            pixel_size: 0.01,
            strips: 1,
            border: BorderShape::Straight,
            border_lon: None,
            delta: 2.0,
            surface: vec![30.0],
            trend_low: Vec::new(),
            trend_high: Vec::new(),
            noise_sd: 1.0,
            noise_ar: 0.0,
            covariate_jumps: Covariates::default(),
            covariate_noise_sd: Covariates {
                elevation: 1.0,
                precipitation: 1.0,
                population: 0.1,
                dist_road: 0.1,
            },
            covariate_lat_gradient: 1.0,
            dialect_bands: DialectBands {
                count: 3,
                orientation: BandOrientation::Latitude,
                offsets: Vec::new(),
            },
            pop_zero_fraction: 0.0,
            rank_high: 20,
            rank_low: 10,
            border_ranks: Vec::new(),
            seed: 1,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let e = &self.extent;
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.pixel_size > 0.0) {
            return bad(format!("pixel_size must be positive, got {}", self.pixel_size));
        }
        if !(e.lon_max > e.lon_min && e.lat_max > e.lat_min) {
            return bad("extent is empty".into());
        }
        if self.strips == 0 {
            return bad("need at least one strip".into());
        }
        if !(0.0..=1.0).contains(&self.pop_zero_fraction) {
            return bad(format!(
                "pop_zero_fraction must lie in [0, 1], got {}",
                self.pop_zero_fraction
            ));
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        if !(self.noise_ar > -1.0 && self.noise_ar < 1.0) {
            return bad("noise_ar must lie in (-1, 1)".into());
        }
        if self.dialect_bands.count == 0 {
            return bad("need at least one dialect band".into());
        }
        if let BorderShape::Sinusoidal { period_deg, .. } = self.border {
            if !(period_deg > 0.0) {
                return bad("sinusoid period must be positive".into());
            }
        }
        Ok(())
    }

    fn dims(&self) -> (usize, usize) {
        let e = &self.extent;
        (
            ((e.lon_max - e.lon_min) / self.pixel_size).round() as usize,
            ((e.lat_max - e.lat_min) / self.pixel_size).round() as usize,
        )
    }

    fn centre(&self) -> (f64, f64) {
        let e = &self.extent;
        ((e.lon_min + e.lon_max) / 2.0, (e.lat_min + e.lat_max) / 2.0)
    }

    fn ranks(&self, strip: usize) -> (i32, i32) {
        self.border_ranks
            .get(strip)
            .copied()
            .unwrap_or((self.rank_high, self.rank_low))
    }

    fn strip_height(&self) -> f64 {
        let (_, nrows) = self.dims();
        nrows as f64 * self.pixel_size / self.strips as f64
    }

    /// Border polyline of strip `m`, drawn north to south so east is on the left.
    fn border_polyline(&self, m: usize) -> Result<BorderPolyline, SynthError> {
        let lat0 = self.extent.lat_min + m as f64 * self.strip_height();
        let lat1 = lat0 + self.strip_height();
        let lon = self.border_lon.unwrap_or(self.centre().0);
        let vertices = match self.border {
            BorderShape::Straight => vec![(lon, lat1), (lon, lat0)],
            BorderShape::Sinusoidal {
                amplitude_deg,
                period_deg,
            } => {
                let n = ((lat1 - lat0) / 0.02).ceil().max(1.0) as usize;
                (0..=n)
                    .map(|k| {
                        let lat = lat1 - (lat1 - lat0) * k as f64 / n as f64;
                        let phase = std::f64::consts::TAU * (lat - self.extent.lat_min) / period_deg;
                        (lon + amplitude_deg * phase.sin(), lat)
                    })
                    .collect()
            }
        };
        let (high, low) = self.ranks(m);
        Ok(BorderPolyline::new(
            format!("B{:02}", m + 1),
            vertices,
            (2 * m + 2).to_string(),
            (2 * m + 1).to_string(),
            high,
            low,
        )?)
    }

    fn band(&self, x: f64, y: f64) -> usize {
        let e = &self.extent;
        let bands = &self.dialect_bands;
        let frac = match bands.orientation {
            BandOrientation::Latitude => (y + (e.lat_max - e.lat_min) / 2.0) / (e.lat_max - e.lat_min),
            BandOrientation::Longitude => (x + (e.lon_max - e.lon_min) / 2.0) / (e.lon_max - e.lon_min),
            BandOrientation::Diagonal => {
                let w = e.lon_max - e.lon_min;
                let h = e.lat_max - e.lat_min;
                (x / w + y / h + 1.0) / 2.0
            }
        };
        ((frac * bands.count as f64).floor().max(0.0) as usize).min(bands.count - 1)
    }
}

/// Evaluates `g` with coefficients in graded order `1, x, y, x^2, xy, y^2, ...`.
pub fn surface_value(coef: &[f64], x: f64, y: f64) -> f64 {
    let mut s = 0.0;
    let mut k = 0;
    let mut degree = 0;
    while k < coef.len() {
        for j in 0..=degree {
            if k >= coef.len() {
                break;
            }
            s += coef[k] * x.powi((degree - j) as i32) * y.powi(j as i32);
            k += 1;
        }
        degree += 1;
    }
    s
}

/// Evaluates `c[0] d + c[1] d^2 + ...`.
pub fn trend_value(coef: &[f64], d: f64) -> f64 {
    coef.iter()
        .enumerate()
        .map(|(k, c)| c * d.powi(k as i32 + 1))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldTruth {
    pub delta: f64,
    pub surface: Vec<f64>,
    pub trend_low: Vec<f64>,
    pub trend_high: Vec<f64>,
    pub covariate_jumps: Covariates,
    pub dialect_offsets: Vec<f64>,
    pub seed: u64,
}

impl WorldTruth {
    /// Key/value text, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut s = String::new();
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "surface = [{}]", list(&self.surface));
        let _ = writeln!(s, "trend_low = [{}]", list(&self.trend_low));
        let _ = writeln!(s, "trend_high = [{}]", list(&self.trend_high));
        let j = &self.covariate_jumps;
        let _ = writeln!(s, "jump.elevation = {}", j.elevation);
        let _ = writeln!(s, "jump.precipitation = {}", j.precipitation);
        let _ = writeln!(s, "jump.population = {}", j.population);
        let _ = writeln!(s, "jump.dist_road = {}", j.dist_road);
        let _ = writeln!(s, "dialect_offsets = [{}]", list(&self.dialect_offsets));
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub layers: LayerSet,
    pub borders: Vec<BorderPolyline>,
    /// A point on the treated side of each border.
    pub witnesses: Vec<(f64, f64)>,
    pub truth: WorldTruth,
}

// Independent random streams per layer.
const STREAM_LIGHTS: u64 = 1;
const STREAM_ELEVATION: u64 = 2;
const STREAM_PRECIPITATION: u64 = 3;
const STREAM_POPULATION: u64 = 4;
const STREAM_ROAD: u64 = 5;
const STREAM_POP_ZERO: u64 = 6;

pub fn generate_world(config: &SyntheticWorldConfig) -> Result<World, SynthError> {
    config.validate()?;
    let (ncols, nrows) = config.dims();
    let (cx, cy) = config.centre();
    let e = &config.extent;
    let borders: Vec<BorderPolyline> = (0..config.strips)
        .map(|m| config.border_polyline(m))
        .collect::<Result<_, _>>()?;
    let locators: Vec<BorderLocator> = borders.iter().map(BorderLocator::new).collect();
    let strip_h = config.strip_height();

    // Signed distance to the pixel's own strip border, row-major from the top.
    let npix = ncols * nrows;
    let distance: Vec<f64> = (0..npix)
        .into_par_iter()
        .map(|k| {
            let (r, c) = (k / ncols, k % ncols);
            let lon = e.lon_min + (c as f64 + 0.5) * config.pixel_size;
            let lat = e.lat_min + (nrows - r) as f64 * config.pixel_size - 0.5 * config.pixel_size;
            let m = (((lat - e.lat_min) / strip_h).floor() as usize).min(config.strips - 1);
            let loc = locators[m].locate((lon, lat));
            loc.distance_km
        })
        .collect();

    let mut lights_noise = Stream::new(config.seed, STREAM_LIGHTS);
    let mut elev_noise = Stream::new(config.seed, STREAM_ELEVATION);
    let mut precip_noise = Stream::new(config.seed, STREAM_PRECIPITATION);
    let mut pop_noise = Stream::new(config.seed, STREAM_POPULATION);
    let mut road_noise = Stream::new(config.seed, STREAM_ROAD);
    let mut pop_zero = Stream::new(config.seed, STREAM_POP_ZERO);

    let mut lights = vec![0.0; npix];
    let mut elevation = vec![0.0; npix];
    let mut precipitation = vec![0.0; npix];
    let mut population = vec![0.0; npix];
    let mut dist_road = vec![0.0; npix];
    let mut dialect = vec![0.0; npix];
    let mut province = vec![0.0; npix];

    let rho = config.noise_ar;
    let innovation = (1.0 - rho * rho).sqrt();
    let jumps = &config.covariate_jumps;
    let sds = &config.covariate_noise_sd;
    for r in 0..nrows {
        let mut ar = 0.0;
        for c in 0..ncols {
            let k = r * ncols + c;
            let lon = e.lon_min + (c as f64 + 0.5) * config.pixel_size;
            let lat = e.lat_min + (nrows - r) as f64 * config.pixel_size - 0.5 * config.pixel_size;
            let (x, y) = (lon - cx, lat - cy);
            let d = distance[k];
            let treated = d > 0.0;
            let t = if treated { 1.0 } else { 0.0 };
            let m = (((lat - e.lat_min) / strip_h).floor() as usize).min(config.strips - 1);
            province[k] = (2 * m + if treated { 2 } else { 1 }) as f64;
            let band = config.band(x, y);
            dialect[k] = (band + 1) as f64;

            let z = lights_noise.normal();
            ar = if c == 0 { z } else { rho * ar + innovation * z };
            let trend = if treated {
                trend_value(&config.trend_high, d)
            } else {
                trend_value(&config.trend_low, d)
            };
            let offset = config.dialect_bands.offsets.get(band).copied().unwrap_or(0.0);
            let raw = surface_value(&config.surface, x, y)
                + config.delta * t
                + trend
                + offset
                + config.noise_sd * ar;
            lights[k] = raw.clamp(0.0, DN_MAX);

            let yc = config.covariate_lat_gradient * y;
            elevation[k] = 500.0 + 100.0 * x + 50.0 * yc
                + jumps.elevation * t
                + sds.elevation * elev_noise.normal();
            precipitation[k] = 1000.0 + 80.0 * yc
                + jumps.precipitation * t
                + sds.precipitation * precip_noise.normal();
            let log_pop = 6.0 + 0.2 * x + jumps.population * t + sds.population * pop_noise.normal();
            let zero = pop_zero.uniform() < config.pop_zero_fraction;
            population[k] = if zero { 0.0 } else { log_pop.exp() };
            dist_road[k] = (5.0 + x * x + jumps.dist_road * t + sds.dist_road * road_noise.normal())
                .max(0.0);
        }
    }

    let grid = |values: Vec<f64>, kind: GridKind| {
        RasterGrid::new(
            ncols,
            nrows,
            e.lon_min,
            e.lat_min,
            config.pixel_size,
            NODATA,
            values,
            kind,
        )
    };
    let layers = LayerSet {
        lights: Some(grid(lights, GridKind::Continuous)?),
        population: Some(grid(population, GridKind::Continuous)?),
        elevation: Some(grid(elevation, GridKind::Continuous)?),
        precipitation: Some(grid(precipitation, GridKind::Continuous)?),
        dist_road: Some(grid(dist_road, GridKind::Continuous)?),
        dialect: Some(grid(dialect, GridKind::Categorical)?),
        province: Some(grid(province, GridKind::Categorical)?),
    };
    let witnesses = borders
        .iter()
        .map(|b| {
            let lat = b.vertices.iter().map(|v| v.1).sum::<f64>() / b.vertices.len() as f64;
            let lon = b.vertices.iter().map(|v| v.0).fold(f64::MIN, f64::max);
            (lon + 0.1, lat)
        })
        .collect();
    let mut offsets = config.dialect_bands.offsets.clone();
    offsets.resize(config.dialect_bands.count, 0.0);
    Ok(World {
        layers,
        borders,
        witnesses,
        truth: WorldTruth {
            delta: config.delta,
            surface: config.surface.clone(),
            trend_low: config.trend_low.clone(),
            trend_high: config.trend_high.clone(),
            covariate_jumps: config.covariate_jumps,
            dialect_offsets: offsets,
            seed: config.seed,
        },
    })
}

/// File names written by [`write_world`].
pub const WORLD_GRIDS: [&str; 7] = [
    "lights.asc",
    "population.asc",
    "elevation.asc",
    "precipitation.asc",
    "dist_road.asc",
    "dialect.asc",
    "province.asc",
];

/// Writes the grids, border CSVs and `truth.txt` into `dir`.
pub fn write_world(dir: &Path, world: &World) -> Result<(), SynthError> {
    let l = &world.layers;
    let grids = [
        &l.lights,
        &l.population,
        &l.elevation,
        &l.precipitation,
        &l.dist_road,
        &l.dialect,
        &l.province,
    ];
    for (name, grid) in WORLD_GRIDS.iter().zip(grids) {
        if let Some(g) = grid {
            write_grid(dir.join(name), g)?;
        }
    }
    geometry::write_borders(
        dir.join("borders.csv"),
        dir.join("borders_meta.csv"),
        &world.borders,
        &world.witnesses,
    )?;
    let path = dir.join("truth.txt");
    std::fs::write(&path, world.truth.to_text()).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Generates a world and builds its cell table.
pub fn world_table(
    config: &SyntheticWorldConfig,
    fishnet: &FishnetSpec,
    options: &TableOptions,
) -> Result<(CellTable, WorldTruth), SynthError> {
    let world = generate_world(config)?;
    let table = build_cell_table(&world.layers, &world.borders, fishnet, options)?;
    Ok((table, world.truth))
}

/// Fishnet aligned with the world's lower-left corner.
pub fn aligned_fishnet(config: &SyntheticWorldConfig, cell_size_deg: f64) -> Result<FishnetSpec, SynthError> {
    Ok(FishnetSpec::new(
        cell_size_deg,
        config.extent.lon_min,
        config.extent.lat_min,
    )?)
}

/// The candidate in `h_grid` with the smallest mean squared error of the
/// conventional estimate against `truth.delta` over `replicates`. Ties go to
/// the larger bandwidth; candidates failing on any replicate are skipped.
pub fn brute_force_mse_bandwidth(
    replicates: &[RddSample],
    spec: &RddSpec,
    truth: &WorldTruth,
    h_grid: &[f64],
) -> Option<f64> {
    let conventional = RddSpec {
        bias_correction: false,
        ..spec.clone()
    };
    let mse: Vec<Option<f64>> = h_grid
        .par_iter()
        .map(|&h| {
            let mut sse = 0.0;
            for s in replicates {
                let e = estimate_at(s, &conventional, h, h).ok()?;
                sse += (e.beta_conventional - truth.delta).powi(2);
            }
            Some(sse / replicates.len() as f64)
        })
        .collect();
    let best = mse.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let tol = 1e-12 * best.max(truth.delta * truth.delta).max(1.0);
    h_grid
        .iter()
        .zip(&mse)
        .filter(|(_, m)| m.is_some_and(|m| m <= best + tol))
        .map(|(&h, _)| h)
        .fold(None, |acc: Option<f64>, h| Some(acc.map_or(h, |a| a.max(h))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub reps: usize,
    pub failures: usize,
    /// Share of successful replications whose robust CI covers `delta`.
    pub coverage: f64,
    /// Share of successful replications rejecting zero at `1 - level`.
    pub rejection_rate: f64,
    pub mean_beta: f64,
    pub mean_h: f64,
    /// First failure message per status, for logging.
    pub failure_kinds: BTreeMap<String, usize>,
}

/// Replicates generate -> table -> estimate with seeds `seed + r`.
pub fn monte_carlo_coverage(
    config: &SyntheticWorldConfig,
    fishnet: &FishnetSpec,
    options: &TableOptions,
    spec: &RddSpec,
    reps: usize,
    level: f64,
) -> CoverageSummary {
    let results: Vec<Result<crate::rdd::RddEstimate, String>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let cfg = SyntheticWorldConfig {
                seed: config.seed.wrapping_add(r as u64),
                ..config.clone()
            };
            let (table, _) = world_table(&cfg, fishnet, options).map_err(|e| e.to_string())?;
            let sample = RddSample::from_table(&table, spec).map_err(|e| e.status().to_string())?;
            bias_corrected_estimate(&sample, spec).map_err(|e| e.status().to_string())
        })
        .collect();
    summarize(&results, config.delta, level)
}

fn summarize(
    results: &[Result<crate::rdd::RddEstimate, String>],
    delta: f64,
    level: f64,
) -> CoverageSummary {
    let mut failure_kinds = BTreeMap::new();
    let (mut covered, mut rejected, mut ok) = (0usize, 0usize, 0usize);
    let (mut sum_beta, mut sum_h) = (0.0, 0.0);
    for r in results {
        match r {
            Ok(e) => {
                ok += 1;
                let (lo, hi) = e.ci_robust(level);
                if lo <= delta && delta <= hi {
                    covered += 1;
                }
                if e.p_value_robust < 1.0 - level {
                    rejected += 1;
                }
                sum_beta += e.beta;
                sum_h += e.h;
            }
            Err(kind) => *failure_kinds.entry(kind.clone()).or_insert(0) += 1,
        }
    }
    let share = |k: usize| if ok == 0 { f64::NAN } else { k as f64 / ok as f64 };
    CoverageSummary {
        reps: results.len(),
        failures: results.len() - ok,
        coverage: share(covered),
        rejection_rate: share(rejected),
        mean_beta: if ok == 0 { f64::NAN } else { sum_beta / ok as f64 },
        mean_h: if ok == 0 { f64::NAN } else { sum_h / ok as f64 },
        failure_kinds,
    }
}

/// Survey-style fixtures that accompany a world: cities with five
/// measures, prefectures with employment counts and province ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixtures {
    pub cities: Vec<City>,
    pub prefectures: Vec<Prefecture>,
    pub provinces: Vec<ProvinceRank>,
}

const STREAM_FIXTURES: u64 = 7;

pub fn generate_fixtures(config: &SyntheticWorldConfig, world: &World) -> Fixtures {
    let mut rng = Stream::new(config.seed, STREAM_FIXTURES);
    let mut ranks: BTreeMap<String, i32> = BTreeMap::new();
    for b in &world.borders {
        ranks.insert(b.prov_high.clone(), b.rank_high);
        ranks.insert(b.prov_low.clone(), b.rank_low);
    }
    let provinces: Vec<ProvinceRank> = ranks
        .iter()
        .map(|(p, &r)| ProvinceRank {
            province: p.clone(),
            rank: r,
            gdp_pc: Some(20_000.0 + 1_500.0 * r as f64 + 4_000.0 * rng.normal()),
        })
        .collect();

    let mut cities = Vec::new();
    let mut prefectures = Vec::new();
    for b in &world.borders {
        let lat_lo = b.vertices.iter().map(|v| v.1).fold(f64::MAX, f64::min);
        let lat_hi = b.vertices.iter().map(|v| v.1).fold(f64::MIN, f64::max);
        let lon = b.vertices.iter().map(|v| v.0).sum::<f64>() / b.vertices.len() as f64;
        for (prov, sign) in [(&b.prov_low, -1.0), (&b.prov_high, 1.0)] {
            let effect = rng.normal();
            for k in 0..3 {
                let m: Vec<f64> = (0..crate::studies::MEASURES)
                    .map(|_| 3.0 + effect + 0.5 * rng.normal())
                    .collect();
                cities.push(City {
                    city_id: format!("C{prov}-{}", k + 1),
                    province: prov.clone(),
                    lon: lon + sign * (0.1 + 0.15 * k as f64 + 0.05 * rng.uniform()),
                    lat: lat_lo + (lat_hi - lat_lo) * rng.uniform(),
                    m1: m[0],
                    m2: m[1],
                    m3: m[2],
                    m4: m[3],
                    m5: m[4],
                });
            }
            for k in 0..2 {
                let total = 50_000.0 + (100_000.0 * rng.uniform()).round();
                let rank = ranks[prov.as_str()] as f64;
                let share = (0.2 + 0.01 * rank + 0.03 * rng.normal()).clamp(0.01, 0.99);
                prefectures.push(Prefecture {
                    prefecture_id: format!("P{prov}-{}-{}", b.border_id, k + 1),
                    province: prov.clone(),
                    border_adjacency: b.border_id.clone(),
                    employed_private: (share * total).round(),
                    employed_total: total,
                    autonomous: k == 1 && rng.uniform() < 0.2,
                });
            }
        }
    }
    Fixtures {
        cities,
        prefectures,
        provinces,
    }
}
