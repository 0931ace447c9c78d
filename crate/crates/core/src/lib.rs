//! Spatial regression discontinuity at administrative borders.
//!
//! The pipeline runs from georeferenced rasters to border-level estimates:
//!
//! * [`raster`] loads ASCII grids, averages years and aggregates pixels into fishnet cells;
//! * [`geometry`] measures signed distances from cell centroids to border polylines;
//! * [`outcomes`] assembles the analysis table (transforms, covariates, filters);
//! * [`rdd`] fits kernel-weighted local polynomials at the cutoff with bias-corrected
//!   robust inference and cross-validated bandwidths;
//! * [`studies`] runs balance, pooled fixed-effect and per-border batteries plus the
//!   city-dyad, private-employment and rank/GDP evidence;
//! * [`synth`] generates worlds with planted effects for validation.

pub mod config;
pub mod geometry;
pub mod linalg;
pub mod outcomes;
pub mod raster;
pub mod rdd;
pub mod rng;
pub mod studies;
pub mod synth;

/// Mean Earth radius (IUGG) used for every spherical distance and area.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;
