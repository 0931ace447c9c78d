//! Study batteries built on the estimator: balance checks, pooled
//! fixed-effect estimates, per-border batteries and the governance evidence
//! (city dyads, private employment shares, rank versus GDP).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::geometry::{haversine_km, BorderPolyline};
use crate::outcomes::CellTable;
use crate::rdd::{bias_corrected_estimate, RddError, RddEstimate, RddSample, RddSpec, ResultRow};

pub const DEFAULT_RANK_GAP: i32 = 7;
pub const DYAD_LIMIT_KM: f64 = 150.0;
pub const MEASURES: usize = 5;

/// Covariates used as balance outcomes and as controls.
pub const DEFAULT_COVARIATES: [&str; 4] = ["elevation", "precipitation", "dist_road", "log_population"];

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> StudyError + '_ {
    move |source| StudyError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn run(sample: Result<RddSample, RddError>, spec: &RddSpec) -> Result<RddEstimate, RddError> {
    bias_corrected_estimate(&sample?, spec)
}

// ---------------------------------------------------------------------------
// Balance and per-border batteries
// ---------------------------------------------------------------------------

/// Each covariate as an outcome, linear and quadratic, at every border in
/// the table. Rows are ordered by border, covariate, then order.
pub fn balance_battery(table: &CellTable, covariates: &[String], base: &RddSpec) -> Vec<ResultRow> {
    let borders = table.border_ids();
    let jobs: Vec<(String, String, usize)> = borders
        .iter()
        .flat_map(|b| {
            covariates
                .iter()
                .flat_map(move |c| [1, 2].map(|p| (b.clone(), c.clone(), p)))
        })
        .collect();
    let tables: BTreeMap<&str, CellTable> = borders
        .iter()
        .map(|b| (b.as_str(), table.for_border(b)))
        .collect();
    jobs.par_iter()
        .map(|(border, cov, p)| {
            let spec = RddSpec {
                outcome: cov.clone(),
                poly_order: *p,
                covariates: Vec::new(),
                fixed_effect: None,
                ..base.clone()
            };
            let t = &tables[border.as_str()];
            let result = run(RddSample::from_table(t, &spec), &spec);
            ResultRow::new(cov, border, *p, t.len(), &result)
        })
        .collect()
}

/// Luminosity and lit, linear and quadratic, with covariates, for each of
/// `borders` (all borders in the table when empty).
pub fn per_border_battery(
    table: &CellTable,
    borders: &[String],
    covariates: &[String],
    base: &RddSpec,
) -> Vec<ResultRow> {
    let ids = if borders.is_empty() {
        table.border_ids()
    } else {
        borders.to_vec()
    };
    let jobs: Vec<(String, &str, usize)> = ids
        .iter()
        .flat_map(|b| {
            ["luminosity", "lit"]
                .into_iter()
                .flat_map(move |o| [1, 2].map(|p| (b.clone(), o, p)))
        })
        .collect();
    let tables: BTreeMap<&str, CellTable> =
        ids.iter().map(|b| (b.as_str(), table.for_border(b))).collect();
    jobs.par_iter()
        .map(|(border, outcome, p)| {
            let spec = RddSpec {
                outcome: outcome.to_string(),
                poly_order: *p,
                covariates: covariates.to_vec(),
                fixed_effect: None,
                ..base.clone()
            };
            let t = &tables[border.as_str()];
            let result = run(RddSample::from_table(t, &spec), &spec);
            ResultRow::new(outcome, border, *p, t.len(), &result)
        })
        .collect()
}

/// One column of the pooled fixed-effect tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledRow {
    pub outcome: String,
    pub p: usize,
    pub beta: Option<f64>,
    pub se_conventional: Option<f64>,
    pub se_robust: Option<f64>,
    pub p_value_robust: Option<f64>,
    pub n_total: usize,
    pub n_left: Option<usize>,
    pub n_right: Option<usize>,
    pub h: Option<f64>,
    pub b: Option<f64>,
    pub kernel: String,
    pub status: String,
}

/// Luminosity, luminosity per person and lit, linear and quadratic, pooled
/// over borders with dialect fixed effects. Passing covariates gives the
/// controlled variant.
pub fn pooled_dialect_fe(table: &CellTable, covariates: &[String], base: &RddSpec) -> Vec<PooledRow> {
    let jobs: Vec<(&str, usize)> = ["luminosity", "lum_pp", "lit"]
        .into_iter()
        .flat_map(|o| [1, 2].map(|p| (o, p)))
        .collect();
    jobs.par_iter()
        .map(|&(outcome, p)| {
            let spec = RddSpec {
                outcome: outcome.into(),
                poly_order: p,
                covariates: covariates.to_vec(),
                fixed_effect: Some("dialect".into()),
                ..base.clone()
            };
            let result = run(RddSample::from_table(table, &spec), &spec);
            let row = ResultRow::new(outcome, "pooled", p, table.len(), &result);
            PooledRow {
                outcome: row.outcome,
                p,
                beta: row.beta,
                se_conventional: row.se_conventional,
                se_robust: row.se_robust,
                p_value_robust: row.p_value_robust,
                n_total: row.n_total,
                n_left: row.n_left,
                n_right: row.n_right,
                h: row.h,
                b: row.b,
                kernel: base.kernel.name().into(),
                status: row.status,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rank gaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RankGapSummary {
    pub retained: Vec<BorderPolyline>,
    pub pairs: usize,
    pub mean_gap: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd_gap: f64,
}

/// Borders whose rank gap is at least `threshold`, with gap moments over all pairs.
pub fn rank_gap_filter(borders: &[BorderPolyline], threshold: i32) -> RankGapSummary {
    let gaps: Vec<f64> = borders.iter().map(|b| b.rank_gap() as f64).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    RankGapSummary {
        retained: borders
            .iter()
            .filter(|b| b.rank_gap() >= threshold)
            .cloned()
            .collect(),
        pairs: borders.len(),
        mean_gap: mean,
        sd_gap: sd,
    }
}

// ---------------------------------------------------------------------------
// City dyads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub city_id: String,
    pub province: String,
    pub lon: f64,
    pub lat: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
}

impl City {
    pub fn measures(&self) -> [f64; MEASURES] {
        [self.m1, self.m2, self.m3, self.m4, self.m5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CityDyad {
    pub city_a: String,
    pub city_b: String,
    pub same_province: bool,
    pub distance_km: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d5: f64,
}

impl CityDyad {
    pub fn abs_diffs(&self) -> [f64; MEASURES] {
        [self.d1, self.d2, self.d3, self.d4, self.d5]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadSummaryRow {
    pub measure: String,
    pub within_mean: Option<f64>,
    pub within_pairs: usize,
    pub across_mean: Option<f64>,
    pub across_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DyadResult {
    pub dyads: Vec<CityDyad>,
    pub summary: Vec<DyadSummaryRow>,
    /// Cities that ended up in no pair.
    pub excluded: Vec<String>,
}

/// Unordered province pairs that share a border.
pub fn province_adjacency(borders: &[BorderPolyline]) -> BTreeSet<(String, String)> {
    borders
        .iter()
        .map(|b| {
            let (x, y) = (b.prov_high.clone(), b.prov_low.clone());
            if x <= y {
                (x, y)
            } else {
                (y, x)
            }
        })
        .collect()
}

/// Pairs each city with its nearest same-province city and its nearest city
/// in a bordering province, both within `limit_km`; distance ties go to the
/// smaller city id.
pub fn dyad_differences(
    cities: &[City],
    adjacency: &BTreeSet<(String, String)>,
    limit_km: f64,
) -> Result<DyadResult, StudyError> {
    if cities.len() < 2 {
        return Err(StudyError::Input("need at least two cities".into()));
    }
    let mut sorted: Vec<&City> = cities.iter().collect();
    sorted.sort_by(|a, b| a.city_id.cmp(&b.city_id));
    if sorted.windows(2).any(|w| w[0].city_id == w[1].city_id) {
        return Err(StudyError::Input("duplicate city id".into()));
    }
    let adjacent = |p: &str, q: &str| {
        let key = if p <= q {
            (p.to_string(), q.to_string())
        } else {
            (q.to_string(), p.to_string())
        };
        adjacency.contains(&key)
    };
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, a) in sorted.iter().enumerate() {
        let mut best_same: Option<(f64, usize)> = None;
        let mut best_across: Option<(f64, usize)> = None;
        for (j, b) in sorted.iter().enumerate() {
            if i == j {
                continue;
            }
            let slot = if a.province == b.province {
                &mut best_same
            } else if adjacent(&a.province, &b.province) {
                &mut best_across
            } else {
                continue;
            };
            let d = haversine_km((a.lon, a.lat), (b.lon, b.lat));
            if d > limit_km {
                continue;
            }
            // Strict comparison keeps the earlier (smaller) id on ties.
            if slot.is_none_or(|(bd, _)| d < bd) {
                *slot = Some((d, j));
            }
        }
        for (d, j) in [best_same, best_across].into_iter().flatten() {
            pairs.insert((i.min(j), i.max(j)), d);
        }
    }
    let dyads: Vec<CityDyad> = pairs
        .iter()
        .map(|(&(i, j), &d)| {
            let (a, b) = (sorted[i], sorted[j]);
            let (ma, mb) = (a.measures(), b.measures());
            let diff = |k: usize| (ma[k] - mb[k]).abs();
            CityDyad {
                city_a: a.city_id.clone(),
                city_b: b.city_id.clone(),
                same_province: a.province == b.province,
                distance_km: d,
                d1: diff(0),
                d2: diff(1),
                d3: diff(2),
                d4: diff(3),
                d5: diff(4),
            }
        })
        .collect();
    let used: BTreeSet<usize> = pairs.keys().flat_map(|&(i, j)| [i, j]).collect();
    let excluded = (0..sorted.len())
        .filter(|i| !used.contains(i))
        .map(|i| sorted[i].city_id.clone())
        .collect();
    let summary = (0..MEASURES)
        .map(|k| {
            let mean_of = |same: bool| {
                let v: Vec<f64> = dyads
                    .iter()
                    .filter(|d| d.same_province == same)
                    .map(|d| d.abs_diffs()[k])
                    .collect();
                let m = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                (m, v.len())
            };
            let (within_mean, within_pairs) = mean_of(true);
            let (across_mean, across_pairs) = mean_of(false);
            DyadSummaryRow {
                measure: format!("m{}", k + 1),
                within_mean,
                within_pairs,
                across_mean,
                across_pairs,
            }
        })
        .collect();
    Ok(DyadResult {
        dyads,
        summary,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Simple regressions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimpleOls {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Heteroskedasticity-robust (HC1) standard error of the slope.
    pub se_slope: f64,
    /// Two-sided p-value of the slope against Student's t with `n - 2` df.
    pub p_value: f64,
    /// NaN when the outcome has no variation.
    pub r_squared: f64,
}

/// OLS of `y` on a constant and `x` in closed form.
pub fn simple_ols(x: &[f64], y: &[f64]) -> Result<SimpleOls, StudyError> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(StudyError::Input(format!(
            "simple regression needs at least 3 paired observations, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(StudyError::Input("regressor has no variation".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let meat: f64 = x.iter().zip(&resid).map(|(a, e)| ((a - mx) * e).powi(2)).sum();
    let se_slope = (nf / (nf - 2.0) * meat).sqrt() / sxx;
    let p_value = if se_slope > 0.0 {
        let t = StudentsT::new(0.0, 1.0, nf - 2.0).expect("valid degrees of freedom");
        2.0 * (1.0 - t.cdf((slope / se_slope).abs()))
    } else if slope == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(SimpleOls {
        n,
        slope,
        intercept,
        se_slope,
        p_value,
        r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prefecture {
    pub prefecture_id: String,
    pub province: String,
    /// Border ids separated by `;`.
    pub border_adjacency: String,
    pub employed_private: f64,
    pub employed_total: f64,
    #[serde(with = "crate::outcomes::bool01")]
    pub autonomous: bool,
}

impl Prefecture {
    pub fn borders(&self) -> impl Iterator<Item = &str> {
        self.border_adjacency
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
    }

    pub fn share_private(&self) -> f64 {
        self.employed_private / self.employed_total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefecturePair {
    pub border_id: String,
    pub pct_private_high: f64,
    pub pct_private_low: f64,
    pub rank_diff: i32,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateResult {
    pub pairs: Vec<PrefecturePair>,
    /// Borders dropped for lacking a usable prefecture on a side.
    pub dropped: Vec<String>,
    pub fit: SimpleOls,
}

/// High-minus-low difference in mean private employment share per border,
/// regressed on the rank difference.
pub fn percent_private_analysis(
    prefectures: &[Prefecture],
    borders: &[BorderPolyline],
) -> Result<PrivateResult, StudyError> {
    if let Some(p) = prefectures.iter().find(|p| !(p.employed_total > 0.0)) {
        return Err(StudyError::Input(format!(
            "prefecture {} has no employment total",
            p.prefecture_id
        )));
    }
    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    let mut sorted: Vec<&BorderPolyline> = borders.iter().collect();
    sorted.sort_by(|a, b| a.border_id.cmp(&b.border_id));
    for b in sorted {
        let side_mean = |prov: &str| {
            let shares: Vec<f64> = prefectures
                .iter()
                .filter(|p| !p.autonomous && p.province == prov && p.borders().any(|x| x == b.border_id))
                .map(Prefecture::share_private)
                .collect();
            (!shares.is_empty()).then(|| shares.iter().sum::<f64>() / shares.len() as f64)
        };
        match (side_mean(&b.prov_high), side_mean(&b.prov_low)) {
            (Some(high), Some(low)) => pairs.push(PrefecturePair {
                border_id: b.border_id.clone(),
                pct_private_high: high,
                pct_private_low: low,
                rank_diff: b.rank_gap(),
                diff: high - low,
            }),
            _ => dropped.push(b.border_id.clone()),
        }
    }
    let x: Vec<f64> = pairs.iter().map(|p| p.rank_diff as f64).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.diff).collect();
    let fit = simple_ols(&x, &y)?;
    Ok(PrivateResult { pairs, dropped, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvinceRank {
    pub province: String,
    pub rank: i32,
    pub gdp_pc: Option<f64>,
}

/// GDP per capita on institutional rank over provinces reporting GDP.
pub fn rank_gdp_regression(provinces: &[ProvinceRank]) -> Result<SimpleOls, StudyError> {
    let mut rows: Vec<(&str, f64, f64)> = provinces
        .iter()
        .filter_map(|p| p.gdp_pc.map(|g| (p.province.as_str(), p.rank as f64, g)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
    simple_ols(&x, &y)
}

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StudyError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

pub fn read_cities(path: &Path) -> Result<Vec<City>, StudyError> {
    read_rows(path)
}

pub fn read_prefectures(path: &Path) -> Result<Vec<Prefecture>, StudyError> {
    read_rows(path)
}

pub fn read_provinces(path: &Path) -> Result<Vec<ProvinceRank>, StudyError> {
    read_rows(path)
}

/// Serializes rows with a header into an in-memory CSV document.
pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Like [`to_csv_string`] but writes the header even when `rows` is empty.
pub fn to_csv_with_header<T: Serialize>(header: &[&str], rows: &[T]) -> Result<String, csv::Error> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        return Ok(String::from_utf8(bytes).expect("csv output is utf-8"));
    }
    to_csv_string(rows)
}
