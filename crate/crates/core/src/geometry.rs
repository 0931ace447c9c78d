//! Border polylines and signed great-circle distances from cell centroids.
//!
//! Segments are densified at no more than [`SAMPLE_SPACING_DEG`] and the
//! distance to a border is the haversine minimum over those samples. The sign
//! comes from a 2D cross product in an equirectangular frame centred on the
//! nearest segment: points left of the vertex order are on the treated side.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{CellId, CellStat};
use crate::EARTH_RADIUS_KM;

pub const SAMPLE_SPACING_DEG: f64 = 0.005;
pub const DEFAULT_BUFFER_KM: f64 = 50.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("border {border_id}: {message}")]
    InvalidBorder { border_id: String, message: String },
    #[error("cell {0} has no region value")]
    MissingRegion(CellId),
    #[error("border file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BorderPolyline {
    pub border_id: String,
    pub vertices: Vec<(f64, f64)>,
    pub prov_high: String,
    pub prov_low: String,
    pub rank_high: i32,
    pub rank_low: i32,
}

impl BorderPolyline {
    pub fn new(
        border_id: impl Into<String>,
        vertices: Vec<(f64, f64)>,
        prov_high: impl Into<String>,
        prov_low: impl Into<String>,
        rank_high: i32,
        rank_low: i32,
    ) -> Result<Self, GeometryError> {
        let border = Self {
            border_id: border_id.into(),
            vertices,
            prov_high: prov_high.into(),
            prov_low: prov_low.into(),
            rank_high,
            rank_low,
        };
        border.validate()?;
        Ok(border)
    }

    fn invalid(&self, message: impl Into<String>) -> GeometryError {
        GeometryError::InvalidBorder {
            border_id: self.border_id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.vertices.len() < 2 {
            return Err(self.invalid("needs at least two vertices"));
        }
        if self.vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(self.invalid("non-finite vertex"));
        }
        if self.vertices.windows(2).any(|w| w[0] == w[1]) {
            return Err(self.invalid("consecutive vertices coincide"));
        }
        for r in [self.rank_high, self.rank_low] {
            if !(1..=30).contains(&r) {
                return Err(self.invalid(format!("rank {r} outside 1..=30")));
            }
        }
        if self.rank_high <= self.rank_low {
            return Err(self.invalid(format!(
                "treated side rank {} must exceed {}",
                self.rank_high, self.rank_low
            )));
        }
        Ok(())
    }

    pub fn rank_gap(&self) -> i32 {
        self.rank_high - self.rank_low
    }
}

pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lat2) = (a.1.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.0 - a.0).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    lon: f64,
    lat: f64,
    cos_lat: f64,
    segment: usize,
    along_deg: f64,
}

/// Where a point sits relative to a border.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BorderLocation {
    /// Signed distance in km, positive on the treated side.
    pub distance_km: f64,
    /// Arc length (in degrees of lon/lat) along the polyline to the nearest sample.
    pub along_deg: f64,
    pub segment: usize,
}

/// Densified border, reusable across many distance queries.
#[derive(Debug, Clone)]
pub struct BorderLocator {
    vertices: Vec<(f64, f64)>,
    samples: Vec<Sample>,
}

impl BorderLocator {
    pub fn new(border: &BorderPolyline) -> Self {
        Self::from_vertices(&border.vertices)
    }

    pub fn from_vertices(vertices: &[(f64, f64)]) -> Self {
        let mut samples = Vec::new();
        let mut along = 0.0;
        let nseg = vertices.len() - 1;
        for (s, w) in vertices.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt();
            let n = ((len / SAMPLE_SPACING_DEG).ceil() as usize).max(1);
            let last = if s + 1 == nseg { n } else { n - 1 };
            for k in 0..=last {
                let t = k as f64 / n as f64;
                let (lon, lat) = (a.0 + dx * t, a.1 + dy * t);
                samples.push(Sample {
                    lon,
                    lat,
                    cos_lat: lat.to_radians().cos(),
                    segment: s,
                    along_deg: along + len * t,
                });
            }
            along += len;
        }
        Self {
            vertices: vertices.to_vec(),
            samples,
        }
    }

    pub fn locate(&self, point: (f64, f64)) -> BorderLocation {
        let (plon, plat) = point;
        let plat_r = plat.to_radians();
        let cos_p = plat_r.cos();
        let k = EARTH_RADIUS_KM.to_radians();

        // Equirectangular pre-screen, then exact haversine on the survivors.
        let planar: Vec<f64> = self
            .samples
            .iter()
            .map(|s| {
                let x = (s.lon - plon) * cos_p * k;
                let y = (s.lat - plat) * k;
                (x * x + y * y).sqrt()
            })
            .collect();
        let min_planar = planar.iter().copied().fold(f64::INFINITY, f64::min);
        let cutoff = min_planar * 1.1 + 0.1;

        let mut best = (f64::INFINITY, 0usize);
        for (i, s) in self.samples.iter().enumerate() {
            if planar[i] > cutoff {
                continue;
            }
            let dlat = s.lat.to_radians() - plat_r;
            let dlon = (s.lon - plon).to_radians();
            let h = (dlat / 2.0).sin().powi(2) + cos_p * s.cos_lat * (dlon / 2.0).sin().powi(2);
            let d = 2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin();
            if d < best.0 {
                best = (d, i);
            }
        }
        let nearest = self.samples[best.1];
        if best.0 == 0.0 {
            return BorderLocation {
                distance_km: 0.0,
                along_deg: nearest.along_deg,
                segment: nearest.segment,
            };
        }
        let (side, segment) = self.side_of(point, nearest);
        BorderLocation {
            distance_km: side * best.0,
            along_deg: nearest.along_deg,
            segment,
        }
    }

    /// `+1` left of the vertex order (treated), `-1` otherwise.
    fn side_of(&self, p: (f64, f64), nearest: Sample) -> (f64, usize) {
        let nseg = self.vertices.len() - 1;
        let s = nearest.segment;
        let at_vertex = (nearest.lon, nearest.lat) == self.vertices[s] && s > 0;
        let at_end = (nearest.lon, nearest.lat) == self.vertices[s + 1] && s + 1 < nseg;
        let mut candidates = vec![s];
        if at_vertex {
            candidates.push(s - 1);
        }
        if at_end {
            candidates.push(s + 1);
        }
        if candidates.len() == 1 {
            return (self.cross_sign(p, s), s);
        }
        let mut scored: Vec<(f64, usize)> = candidates
            .iter()
            .map(|&c| (self.planar_segment_distance(p, c), c))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let (d0, c0) = scored[0];
        let (d1, _) = scored[1];
        if (d1 - d0).abs() > 1e-12 * d0.max(1e-12) {
            return (self.cross_sign(p, c0), c0);
        }
        // Equidistant from both segments: use the vertex pseudo-normal.
        let v = self.vertices[if at_vertex { s } else { s + 1 }];
        let cos_v = v.1.to_radians().cos();
        let mut normal = (0.0, 0.0);
        for &(_, c) in &scored {
            let (a, b) = (self.vertices[c], self.vertices[c + 1]);
            let (dx, dy) = ((b.0 - a.0) * cos_v, b.1 - a.1);
            let len = (dx * dx + dy * dy).sqrt();
            normal.0 += -dy / len;
            normal.1 += dx / len;
        }
        let dot = normal.0 * (p.0 - v.0) * cos_v + normal.1 * (p.1 - v.1);
        (if dot > 0.0 { 1.0 } else { -1.0 }, c0)
    }

    fn local_frame(&self, seg: usize) -> ((f64, f64), (f64, f64), f64) {
        let (a, b) = (self.vertices[seg], self.vertices[seg + 1]);
        let cos_m = ((a.1 + b.1) / 2.0).to_radians().cos();
        (a, b, cos_m)
    }

    fn cross_sign(&self, p: (f64, f64), seg: usize) -> f64 {
        let (a, b, c) = self.local_frame(seg);
        let (ux, uy) = ((b.0 - a.0) * c, b.1 - a.1);
        let (vx, vy) = ((p.0 - a.0) * c, p.1 - a.1);
        if ux * vy - uy * vx > 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    fn planar_segment_distance(&self, p: (f64, f64), seg: usize) -> f64 {
        let (a, b, c) = self.local_frame(seg);
        let (ux, uy) = ((b.0 - a.0) * c, b.1 - a.1);
        let (vx, vy) = ((p.0 - a.0) * c, p.1 - a.1);
        let t = ((ux * vx + uy * vy) / (ux * ux + uy * uy)).clamp(0.0, 1.0);
        ((vx - t * ux).powi(2) + (vy - t * uy).powi(2)).sqrt()
    }
}

/// Signed distance in km from `point` to `border`; positive on the treated side.
pub fn signed_distance(point: (f64, f64), border: &BorderPolyline) -> f64 {
    BorderLocator::new(border).locate(point).distance_km
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellAssignment {
    pub cell_id: CellId,
    pub border_id: String,
    pub distance_km: f64,
    pub treated: bool,
    pub along_deg: f64,
}

/// Cells whose centroid lies within `0 < |d| <= max_km` of the border.
pub fn assign_cells(
    centroids: &BTreeMap<CellId, (f64, f64)>,
    border: &BorderPolyline,
    max_km: f64,
) -> Vec<CellAssignment> {
    let locator = BorderLocator::new(border);
    // Cheap rejection of centroids far outside the border's bounding box.
    let margin_lat = max_km / EARTH_RADIUS_KM.to_radians() + 0.01;
    let (mut lon0, mut lat0, mut lon1, mut lat1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &border.vertices {
        lon0 = lon0.min(x);
        lon1 = lon1.max(x);
        lat0 = lat0.min(y);
        lat1 = lat1.max(y);
    }
    let extreme_lat = (lat0 - margin_lat).abs().max((lat1 + margin_lat).abs()).min(89.0);
    let margin_lon = margin_lat / extreme_lat.to_radians().cos();
    centroids
        .iter()
        .filter_map(|(&cell_id, &pt)| {
            if pt.0 < lon0 - margin_lon
                || pt.0 > lon1 + margin_lon
                || pt.1 < lat0 - margin_lat
                || pt.1 > lat1 + margin_lat
            {
                return None;
            }
            let loc = locator.locate(pt);
            let d = loc.distance_km;
            (d != 0.0 && d.abs() <= max_km).then(|| CellAssignment {
                cell_id,
                border_id: border.border_id.clone(),
                distance_km: d,
                treated: d > 0.0,
                along_deg: loc.along_deg,
            })
        })
        .collect()
}

pub fn categorize_cell(
    cell_id: CellId,
    regions: &BTreeMap<CellId, CellStat>,
) -> Result<i64, GeometryError> {
    regions
        .get(&cell_id)
        .map(|s| s.value as i64)
        .ok_or(GeometryError::MissingRegion(cell_id))
}

#[derive(Debug, Serialize, Deserialize)]
struct VertexRow {
    border_id: String,
    seq: u32,
    lon: f64,
    lat: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    border_id: String,
    prov_high: String,
    prov_low: String,
    rank_high: i32,
    rank_low: i32,
    witness_lon: f64,
    witness_lat: f64,
}

/// Reads the vertex and metadata CSVs. Each border's witness point must fall
/// on the treated (left) side of its vertex order.
pub fn read_borders(
    vertices_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
) -> Result<Vec<BorderPolyline>, GeometryError> {
    let mut chains: HashMap<String, Vec<(u32, f64, f64)>> = HashMap::new();
    for row in csv::Reader::from_path(vertices_path)?.deserialize() {
        let row: VertexRow = row?;
        chains
            .entry(row.border_id)
            .or_default()
            .push((row.seq, row.lon, row.lat));
    }
    let mut borders = Vec::new();
    for row in csv::Reader::from_path(metadata_path)?.deserialize() {
        let meta: MetadataRow = row?;
        let mut chain = chains.remove(&meta.border_id).unwrap_or_default();
        chain.sort_by_key(|v| v.0);
        let border = BorderPolyline::new(
            meta.border_id.clone(),
            chain.iter().map(|v| (v.1, v.2)).collect(),
            meta.prov_high,
            meta.prov_low,
            meta.rank_high,
            meta.rank_low,
        )?;
        if signed_distance((meta.witness_lon, meta.witness_lat), &border) <= 0.0 {
            return Err(border.invalid(
                "witness point is not on the treated (left) side of the vertex order",
            ));
        }
        borders.push(border);
    }
    if let Some(orphan) = chains.keys().min() {
        return Err(GeometryError::InvalidBorder {
            border_id: orphan.clone(),
            message: "vertices listed without metadata".into(),
        });
    }
    borders.sort_by(|a, b| a.border_id.cmp(&b.border_id));
    Ok(borders)
}

/// Writes both border CSVs; `witnesses` supplies one treated-side point per border.
pub fn write_borders(
    vertices_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
    borders: &[BorderPolyline],
    witnesses: &[(f64, f64)],
) -> Result<(), GeometryError> {
    let mut vw = csv::Writer::from_path(vertices_path)?;
    let mut mw = csv::Writer::from_path(metadata_path)?;
    for (b, w) in borders.iter().zip(witnesses) {
        for (seq, v) in b.vertices.iter().enumerate() {
            vw.serialize(VertexRow {
                border_id: b.border_id.clone(),
                seq: seq as u32,
                lon: v.0,
                lat: v.1,
            })?;
        }
        mw.serialize(MetadataRow {
            border_id: b.border_id.clone(),
            prov_high: b.prov_high.clone(),
            prov_low: b.prov_low.clone(),
            rank_high: b.rank_high,
            rank_low: b.rank_low,
            witness_lon: w.0,
            witness_lat: w.1,
        })?;
    }
    vw.flush().map_err(csv::Error::from)?;
    mw.flush().map_err(csv::Error::from)?;
    Ok(())
}
