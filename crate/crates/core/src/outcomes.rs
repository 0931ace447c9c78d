//! The analysis-ready cell table.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{assign_cells, BorderPolyline};
use crate::raster::{aggregate_to_cells, CellId, CellStat, FishnetSpec, RasterGrid, Reducer};
use crate::EARTH_RADIUS_KM;

/// Offset added to the raw light sum before taking logs.
pub const LUMINOSITY_OFFSET: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("luminosity sum must be non-negative, got {0}")]
    Domain(f64),
    #[error("missing required layer `{0}`")]
    MissingLayer(&'static str),
    #[error("no cells remain after filtering")]
    EmptySample,
    #[error("duplicate record for cell {cell_id} at border {border_id}")]
    Duplicate { cell_id: CellId, border_id: String },
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error("cell table csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn luminosity_transform(lum_sum: f64) -> Result<f64, TableError> {
    if !(lum_sum >= 0.0) {
        return Err(TableError::Domain(lum_sum));
    }
    Ok((lum_sum + LUMINOSITY_OFFSET).ln())
}

pub fn lit_indicator(lum_sum: f64) -> u8 {
    u8::from(lum_sum > 0.0)
}

pub(crate) mod bool01 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: CellId,
    pub border_id: String,
    pub lon: f64,
    pub lat: f64,
    pub distance_km: f64,
    #[serde(with = "bool01")]
    pub treated: bool,
    pub lum_sum: f64,
    pub luminosity: f64,
    pub lit: u8,
    pub lum_pp: f64,
    pub population: f64,
    pub elevation: f64,
    pub precipitation: f64,
    pub dist_road: f64,
    pub log_area: f64,
    pub dialect: i64,
    pub cluster_id: String,
}

impl CellRecord {
    /// Numeric column by name. `log_population` is derived on the fly.
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "lon" => self.lon,
            "lat" => self.lat,
            "distance_km" => self.distance_km,
            "treated" => f64::from(u8::from(self.treated)),
            "lum_sum" => self.lum_sum,
            "luminosity" => self.luminosity,
            "lit" => f64::from(self.lit),
            "lum_pp" => self.lum_pp,
            "population" => self.population,
            "log_population" => self.population.ln(),
            "elevation" => self.elevation,
            "precipitation" => self.precipitation,
            "dist_road" => self.dist_road,
            "log_area" => self.log_area,
            "dialect" => self.dialect as f64,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterStep {
    pub stage: String,
    pub removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub sources: Vec<String>,
    /// Candidate (cell, border) pairs before any filter.
    pub candidates: usize,
    pub filters: Vec<FilterStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub records: Vec<CellRecord>,
    pub provenance: Provenance,
}

impl CellTable {
    /// Sorts into canonical `(border_id, cell_id)` order and rejects duplicates.
    pub fn new(mut records: Vec<CellRecord>, provenance: Provenance) -> Result<Self, TableError> {
        records.sort_by(|a, b| {
            a.border_id
                .cmp(&b.border_id)
                .then(a.cell_id.cmp(&b.cell_id))
        });
        if let Some(w) = records
            .windows(2)
            .find(|w| w[0].border_id == w[1].border_id && w[0].cell_id == w[1].cell_id)
        {
            return Err(TableError::Duplicate {
                cell_id: w[0].cell_id,
                border_id: w[0].border_id.clone(),
            });
        }
        Ok(Self {
            records,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn border_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.border_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Records of one border, provenance dropped.
    pub fn for_border(&self, border_id: &str) -> CellTable {
        CellTable {
            records: self
                .records
                .iter()
                .filter(|r| r.border_id == border_id)
                .cloned()
                .collect(),
            provenance: Provenance::default(),
        }
    }

    /// Fishnet spacing in km, read off the distinct centroid latitudes.
    pub fn cell_spacing_km(&self) -> Option<f64> {
        let mut lats: Vec<f64> = self.records.iter().map(|r| r.lat).collect();
        lats.sort_by(f64::total_cmp);
        let mut gaps: Vec<f64> = lats
            .windows(2)
            .map(|w| w[1] - w[0])
            .filter(|g| *g > 1e-9)
            .collect();
        if gaps.is_empty() {
            return None;
        }
        gaps.sort_by(f64::total_cmp);
        Some(gaps[gaps.len() / 2].to_radians() * EARTH_RADIUS_KM)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, TableError> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let records = rdr
            .deserialize()
            .collect::<Result<Vec<CellRecord>, _>>()?;
        let provenance = Provenance {
            sources: vec![path.display().to_string()],
            candidates: records.len(),
            filters: Vec::new(),
        };
        Self::new(records, provenance)
    }
}

/// How the per-person luminosity variant is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LumPerPerson {
    /// `ln(lum_sum + 0.01) / population`.
    #[default]
    LogOverPopulation,
    /// `ln((lum_sum + 0.01) / population)`.
    LogOfRatio,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableOptions {
    pub max_km: f64,
    pub lum_pp: LumPerPerson,
    pub dialect_min_share: f64,
    pub cluster_bin_deg: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            max_km: crate::geometry::DEFAULT_BUFFER_KM,
            lum_pp: LumPerPerson::default(),
            dialect_min_share: 0.01,
            cluster_bin_deg: 0.5,
        }
    }
}

/// Raster inputs on a common fishnet. `province` is optional; when present,
/// a cell only enters a border's sample if its modal province is the one the
/// side test places it in.
#[derive(Debug, Clone, Default)]
pub struct LayerSet {
    pub lights: Option<RasterGrid>,
    pub population: Option<RasterGrid>,
    pub elevation: Option<RasterGrid>,
    pub precipitation: Option<RasterGrid>,
    pub dist_road: Option<RasterGrid>,
    pub dialect: Option<RasterGrid>,
    pub province: Option<RasterGrid>,
}

fn required<'a>(layer: &'a Option<RasterGrid>, name: &'static str) -> Result<&'a RasterGrid, TableError> {
    layer.as_ref().ok_or(TableError::MissingLayer(name))
}

pub fn build_cell_table(
    layers: &LayerSet,
    borders: &[BorderPolyline],
    fishnet: &FishnetSpec,
    options: &TableOptions,
) -> Result<CellTable, TableError> {
    let lights = aggregate_to_cells(required(&layers.lights, "lights")?, fishnet, Reducer::Sum)?;
    let population = aggregate_to_cells(
        required(&layers.population, "population")?,
        fishnet,
        Reducer::Sum,
    )?;
    let elevation = aggregate_to_cells(
        required(&layers.elevation, "elevation")?,
        fishnet,
        Reducer::Mean,
    )?;
    let precipitation = aggregate_to_cells(
        required(&layers.precipitation, "precipitation")?,
        fishnet,
        Reducer::Sum,
    )?;
    let dist_road = aggregate_to_cells(
        required(&layers.dist_road, "dist_road")?,
        fishnet,
        Reducer::Mean,
    )?;
    let dialect = aggregate_to_cells(required(&layers.dialect, "dialect")?, fishnet, Reducer::Mode)?;
    let province = layers
        .province
        .as_ref()
        .map(|g| aggregate_to_cells(g, fishnet, Reducer::Mode))
        .transpose()?;

    let centroids: BTreeMap<CellId, (f64, f64)> =
        lights.keys().map(|&id| (id, fishnet.centroid(id))).collect();
    let candidates = centroids.len() * borders.len();

    let mut removed: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut rows = Vec::new();
    for border in borders {
        let assigned = assign_cells(&centroids, border, options.max_km);
        *removed.entry("buffer").or_default() += centroids.len() - assigned.len();
        for a in assigned {
            if let Some(prov) = &province {
                let expected = if a.treated {
                    &border.prov_high
                } else {
                    &border.prov_low
                };
                let ok = prov
                    .get(&a.cell_id)
                    .is_some_and(|s| format!("{}", s.value as i64) == *expected);
                if !ok {
                    *removed.entry("province").or_default() += 1;
                    continue;
                }
            }
            let get = |m: &BTreeMap<CellId, CellStat>| m.get(&a.cell_id).map(|s| s.value);
            let (Some(pop), Some(elev), Some(precip), Some(road), Some(group)) = (
                get(&population),
                get(&elevation),
                get(&precipitation),
                get(&dist_road),
                get(&dialect),
            ) else {
                *removed.entry("missing_layer").or_default() += 1;
                continue;
            };
            if !(pop > 0.0) {
                *removed.entry("population").or_default() += 1;
                continue;
            }
            let lum_sum = lights[&a.cell_id].value;
            let luminosity = luminosity_transform(lum_sum)?;
            let lum_pp = match options.lum_pp {
                LumPerPerson::LogOverPopulation => luminosity / pop,
                LumPerPerson::LogOfRatio => ((lum_sum + LUMINOSITY_OFFSET) / pop).ln(),
            };
            let (lon, lat) = centroids[&a.cell_id];
            let bin = (a.along_deg / options.cluster_bin_deg).floor() as i64;
            rows.push(CellRecord {
                cell_id: a.cell_id,
                border_id: border.border_id.clone(),
                lon,
                lat,
                distance_km: a.distance_km,
                treated: a.treated,
                lum_sum,
                luminosity,
                lit: lit_indicator(lum_sum),
                lum_pp,
                population: pop,
                elevation: elev,
                precipitation: precip,
                dist_road: road,
                log_area: lights[&a.cell_id].area_km2.ln(),
                dialect: group as i64,
                cluster_id: format!("{}:{bin}", border.border_id),
            });
        }
    }

    let (rows, dropped) = drop_rare_groups(rows, options.dialect_min_share);
    removed.insert("dialect_share", dropped);
    if rows.is_empty() {
        return Err(TableError::EmptySample);
    }

    let order = ["buffer", "province", "missing_layer", "population", "dialect_share"];
    let provenance = Provenance {
        sources: borders.iter().map(|b| format!("border:{}", b.border_id)).collect(),
        candidates,
        filters: order
            .iter()
            .map(|s| FilterStep {
                stage: (*s).to_string(),
                removed: removed.get(s).copied().unwrap_or(0),
            })
            .collect(),
    };
    CellTable::new(rows, provenance)
}

/// Drops groups covering less than `min_share` of the pooled rows.
fn drop_rare_groups(rows: Vec<CellRecord>, min_share: f64) -> (Vec<CellRecord>, usize) {
    let total = rows.len() as f64;
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for r in &rows {
        *counts.entry(r.dialect).or_default() += 1;
    }
    let keep: BTreeSet<i64> = counts
        .iter()
        .filter(|(_, &c)| c as f64 / total >= min_share)
        .map(|(&g, _)| g)
        .collect();
    let before = rows.len();
    let kept: Vec<_> = rows.into_iter().filter(|r| keep.contains(&r.dialect)).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyRow {
    pub group: i64,
    pub count: u64,
    pub percent: f64,
    pub cumulative: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Percent and cumulative percent per group, rounded to two decimals and
/// sorted by group id. Cumulative shares are taken from cumulative counts.
pub fn frequency_from_counts(counts: &BTreeMap<i64, u64>) -> Vec<FrequencyRow> {
    let n: u64 = counts.values().sum();
    let mut cum = 0u64;
    counts
        .iter()
        .map(|(&group, &count)| {
            cum += count;
            FrequencyRow {
                group,
                count,
                percent: round2(100.0 * count as f64 / n as f64),
                cumulative: round2(100.0 * cum as f64 / n as f64),
            }
        })
        .collect()
}

pub fn dialect_frequency(table: &CellTable) -> Vec<FrequencyRow> {
    let mut counts = BTreeMap::new();
    for r in &table.records {
        *counts.entry(r.dialect).or_default() += 1;
    }
    frequency_from_counts(&counts)
}
