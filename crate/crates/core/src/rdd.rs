//! Local polynomial regression discontinuity estimation.
//!
//! The estimator fits, by weighted least squares with triangular kernel
//! weights `max(0, 1 - |d|/h)`, the design
//!
//! ```text
//! y ~ 1 + T + d + T*d + ... + d^p + T*d^p + covariates + group dummies
//! ```
//!
//! where `T = 1[d > 0]`. The coefficient on `T` is the discontinuity. Bias
//! correction refits at order `p + 1` with bandwidth `b` and subtracts the
//! implied leading bias; the robust standard error comes from the combined
//! linear representation of the corrected estimator, so it accounts for the
//! noise in the bias estimate as well.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, solve_spd_small};
use crate::outcomes::CellTable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RddError {
    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),
    #[error("multicollinearity in covariates: {0}")]
    Multicollinearity(String),
    #[error("bandwidth selection failed: {0}")]
    BandwidthFailure(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
}

impl RddError {
    /// Status label written to result tables.
    pub fn status(&self) -> &'static str {
        match self {
            RddError::InsufficientObservations(_) => "insufficient_obs",
            RddError::Multicollinearity(_) => "multicollinearity",
            RddError::BandwidthFailure(_) => "bandwidth_failure",
            RddError::InvalidSpec(_) | RddError::UnknownColumn(_) => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernel {
    #[default]
    Triangular,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        "triangular"
    }
}

/// Triangular kernel weight at `u = d / h`.
pub fn kernel_weight(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthMode {
    Manual(f64),
    MseOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    NearestNeighbor { neighbors: usize },
    Cluster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RddSpec {
    pub outcome: String,
    pub poly_order: usize,
    pub kernel: Kernel,
    pub bandwidth: BandwidthMode,
    pub covariates: Vec<String>,
    pub fixed_effect: Option<String>,
    pub variance: VarianceKind,
    pub bias_correction: bool,
    /// `b = bias_ratio * h`.
    pub bias_ratio: f64,
}

impl Default for RddSpec {
    fn default() -> Self {
        Self {
            outcome: "luminosity".into(),
            poly_order: 1,
            kernel: Kernel::Triangular,
            bandwidth: BandwidthMode::MseOptimal,
            covariates: Vec::new(),
            fixed_effect: None,
            variance: VarianceKind::NearestNeighbor { neighbors: 3 },
            bias_correction: true,
            bias_ratio: 1.5,
        }
    }
}

impl RddSpec {
    pub fn new(outcome: impl Into<String>, poly_order: usize) -> Self {
        Self {
            outcome: outcome.into(),
            poly_order,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RddError> {
        if !(1..=4).contains(&self.poly_order) {
            return Err(RddError::InvalidSpec(format!(
                "polynomial order must be 1..=4, got {}",
                self.poly_order
            )));
        }
        if let BandwidthMode::Manual(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(RddError::InvalidSpec(format!("bandwidth must be positive, got {h}")));
            }
        }
        if let VarianceKind::NearestNeighbor { neighbors } = self.variance {
            if neighbors == 0 {
                return Err(RddError::InvalidSpec("need at least one neighbour".into()));
            }
        }
        if !(self.bias_ratio >= 1.0) {
            return Err(RddError::InvalidSpec(format!(
                "bias bandwidth ratio must be >= 1, got {}",
                self.bias_ratio
            )));
        }
        Ok(())
    }
}

/// Estimation input in canonical row order; the row index breaks ties.
#[derive(Debug, Clone, PartialEq)]
pub struct RddSample {
    running: Vec<f64>,
    outcome: Vec<f64>,
    covariate_names: Vec<String>,
    covariates: Vec<Vec<f64>>,
    groups: Option<Vec<i64>>,
    clusters: Vec<usize>,
    spacing_km: Option<f64>,
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), RddError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(RddError::InvalidSpec(format!(
            "column `{name}` has a non-finite value at row {i}"
        ))),
        None => Ok(()),
    }
}

impl RddSample {
    pub fn new(running: Vec<f64>, outcome: Vec<f64>) -> Result<Self, RddError> {
        if running.len() != outcome.len() {
            return Err(RddError::InvalidSpec(
                "running variable and outcome differ in length".into(),
            ));
        }
        check_finite("running", &running)?;
        check_finite("outcome", &outcome)?;
        if running.iter().any(|&d| d == 0.0) {
            return Err(RddError::InvalidSpec(
                "observations exactly at the cutoff have no side".into(),
            ));
        }
        let n = running.len();
        Ok(Self {
            running,
            outcome,
            covariate_names: Vec::new(),
            covariates: Vec::new(),
            groups: None,
            clusters: (0..n).collect(),
            spacing_km: None,
        })
    }

    pub fn with_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, RddError> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(RddError::InvalidSpec(format!("covariate `{name}` has wrong length")));
        }
        check_finite(&name, &values)?;
        self.covariate_names.push(name);
        self.covariates.push(values);
        Ok(self)
    }

    pub fn with_groups(mut self, groups: Vec<i64>) -> Result<Self, RddError> {
        if groups.len() != self.len() {
            return Err(RddError::InvalidSpec("group column has wrong length".into()));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    /// Cluster labels; any hashable ordering works, labels are re-indexed.
    pub fn with_clusters<S: Ord + Clone>(mut self, labels: &[S]) -> Result<Self, RddError> {
        if labels.len() != self.len() {
            return Err(RddError::InvalidSpec("cluster column has wrong length".into()));
        }
        let index: BTreeMap<S, usize> = labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        self.clusters = labels.iter().map(|l| index[l]).collect();
        Ok(self)
    }

    pub fn with_spacing_km(mut self, spacing: f64) -> Self {
        self.spacing_km = (spacing > 0.0).then_some(spacing);
        self
    }

    pub fn from_table(table: &CellTable, spec: &RddSpec) -> Result<Self, RddError> {
        let mut recs: Vec<_> = table.records.iter().collect();
        recs.sort_by(|a, b| a.border_id.cmp(&b.border_id).then(a.cell_id.cmp(&b.cell_id)));
        let column = |name: &str| -> Result<Vec<f64>, RddError> {
            recs.iter()
                .map(|r| r.column(name).ok_or_else(|| RddError::UnknownColumn(name.into())))
                .collect()
        };
        let running = recs.iter().map(|r| r.distance_km).collect();
        let mut sample = Self::new(running, column(&spec.outcome)?)?;
        for c in &spec.covariates {
            sample = sample.with_covariate(c.clone(), column(c)?)?;
        }
        if let Some(fe) = &spec.fixed_effect {
            let groups = match fe.as_str() {
                "dialect" => recs.iter().map(|r| r.dialect).collect(),
                "border_id" => {
                    let ids: BTreeMap<&str, i64> = recs
                        .iter()
                        .map(|r| r.border_id.as_str())
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .zip(0..)
                        .collect();
                    recs.iter().map(|r| ids[r.border_id.as_str()]).collect()
                }
                other => return Err(RddError::UnknownColumn(other.into())),
            };
            sample = sample.with_groups(groups)?;
        }
        let labels: Vec<&str> = recs.iter().map(|r| r.cluster_id.as_str()).collect();
        sample = sample.with_clusters(&labels)?;
        if let Some(s) = table.cell_spacing_km() {
            sample = sample.with_spacing_km(s);
        }
        Ok(sample)
    }

    pub fn len(&self) -> usize {
        self.running.len()
    }

    pub fn is_empty(&self) -> bool {
        self.running.is_empty()
    }

    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    /// Copy of the sample restricted to `keep` rows (in their existing order).
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            running: pick(&self.running),
            outcome: pick(&self.outcome),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.iter().map(|c| pick(c)).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
            clusters: idx.iter().map(|&i| self.clusters[i]).collect(),
            spacing_km: self.spacing_km,
        }
    }

    fn side_counts(&self) -> (usize, usize) {
        let right = self.running.iter().filter(|&&d| d > 0.0).count();
        (self.len() - right, right)
    }

    fn has_adjustment(&self) -> bool {
        !self.covariates.is_empty() || self.groups.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RddEstimate {
    /// Reported discontinuity: bias corrected when correction is on.
    pub beta: f64,
    pub beta_conventional: f64,
    pub se_conventional: f64,
    pub se_robust: f64,
    pub p_value_robust: f64,
    pub h: f64,
    pub b: f64,
    pub n_left: usize,
    pub n_right: usize,
    pub n_total: usize,
    /// Left-side limit at the cutoff (reference group when fixed effects are on).
    pub intercept: f64,
    /// Coefficients on `d, d^2, ...` left of the cutoff.
    pub slopes_left: Vec<f64>,
    /// Coefficients on `d, d^2, ...` right of the cutoff.
    pub slopes_right: Vec<f64>,
}

impl RddEstimate {
    /// Robust confidence interval at the given two-sided level.
    pub fn ci_robust(&self, level: f64) -> (f64, f64) {
        let z = normal_quantile(0.5 + level / 2.0);
        (self.beta - z * self.se_robust, self.beta + z * self.se_robust)
    }
}

fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Two-sided normal p-value for `estimate / se`.
pub fn normal_p_value(estimate: f64, se: f64) -> f64 {
    let z = (estimate / se).abs();
    if z.is_nan() {
        return 1.0;
    }
    if z.is_infinite() {
        return 0.0;
    }
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

// ---------------------------------------------------------------------------
// Design construction and weighted fits
// ---------------------------------------------------------------------------

struct LocalFit {
    rows: Vec<usize>,
    weights: Vec<f64>,
    x: DMatrix<f64>,
    coef: DVector<f64>,
    gram_inv: DMatrix<f64>,
    /// Sample covariate indices kept in the design, in column order.
    covariates: Vec<usize>,
    /// Groups with a dummy column, in column order.
    dummies: Vec<i64>,
    core_cols: usize,
}

impl LocalFit {
    /// Per-row weights `a_i` with `coef[col] = sum_i a_i y_i`.
    fn linear_weights(&self, col: usize) -> Vec<f64> {
        let g = self.gram_inv.column(col);
        (0..self.rows.len())
            .map(|r| self.weights[r] * self.x.row(r).dot(&g.transpose()))
            .collect()
    }

    fn residuals(&self, sample: &RddSample) -> Vec<f64> {
        let fitted = &self.x * &self.coef;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, &i)| sample.outcome[i] - fitted[r])
            .collect()
    }

    /// Contribution of covariates and group effects to sample row `i`.
    fn adjustment(&self, sample: &RddSample, i: usize) -> f64 {
        let mut s = 0.0;
        for (k, &c) in self.covariates.iter().enumerate() {
            s += self.coef[self.core_cols + k] * sample.covariates[c][i];
        }
        if let Some(groups) = &sample.groups {
            if let Ok(pos) = self.dummies.binary_search(&groups[i]) {
                s += self.coef[self.core_cols + self.covariates.len() + pos];
            }
        }
        s
    }
}

fn check_side_support(sample: &RddSample, rows: &[usize], order: usize, h: f64) -> Result<(), RddError> {
    for (label, right) in [("left", false), ("right", true)] {
        let ds: Vec<f64> = rows
            .iter()
            .map(|&i| sample.running[i])
            .filter(|&d| (d > 0.0) == right)
            .collect();
        if ds.len() < order + 2 {
            return Err(RddError::InsufficientObservations(format!(
                "{} {label} of cutoff within bandwidth {h:.4}, need {}",
                ds.len(),
                order + 2
            )));
        }
        let distinct = ds
            .iter()
            .map(|d| d.to_bits())
            .collect::<BTreeSet<_>>()
            .len();
        if distinct < order + 1 {
            return Err(RddError::InsufficientObservations(format!(
                "only {distinct} distinct distances {label} of cutoff within bandwidth {h:.4}"
            )));
        }
    }
    Ok(())
}

fn local_fit(sample: &RddSample, h: f64, order: usize) -> Result<LocalFit, RddError> {
    let rows: Vec<usize> = (0..sample.len())
        .filter(|&i| sample.running[i].abs() < h)
        .collect();
    check_side_support(sample, &rows, order, h)?;
    let weights: Vec<f64> = rows
        .iter()
        .map(|&i| kernel_weight(sample.running[i] / h))
        .collect();

    let covariates: Vec<usize> = (0..sample.covariates.len())
        .filter(|&c| rows.iter().any(|&i| sample.covariates[c][i] != 0.0))
        .collect();
    let dummies: Vec<i64> = match &sample.groups {
        Some(g) => rows
            .iter()
            .map(|&i| g[i])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .skip(1)
            .collect(),
        None => Vec::new(),
    };
    let core_cols = 2 * (order + 1);
    let k = core_cols + covariates.len() + dummies.len();
    let mut x = DMatrix::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        let u = sample.running[i] / h;
        let t = if u > 0.0 { 1.0 } else { 0.0 };
        let mut pow = 1.0;
        for j in 0..=order {
            x[(r, 2 * j)] = pow;
            x[(r, 2 * j + 1)] = t * pow;
            pow *= u;
        }
        for (m, &c) in covariates.iter().enumerate() {
            x[(r, core_cols + m)] = sample.covariates[c][i];
        }
        if let Some(g) = &sample.groups {
            if let Ok(pos) = dummies.binary_search(&g[i]) {
                x[(r, core_cols + covariates.len() + pos)] = 1.0;
            }
        }
    }
    let y: Vec<f64> = rows.iter().map(|&i| sample.outcome[i]).collect();
    let fit = linalg::wls(&x, &y, &weights).map_err(|s| {
        let col = s.column;
        let what = if col < core_cols {
            format!("polynomial term {col}")
        } else if col < core_cols + covariates.len() {
            format!("covariate `{}`", sample.covariate_names[covariates[col - core_cols]])
        } else {
            format!(
                "group dummy {}",
                dummies[col - core_cols - covariates.len()]
            )
        };
        RddError::Multicollinearity(format!("{what} is collinear with earlier columns"))
    })?;
    Ok(LocalFit {
        rows,
        weights,
        x,
        coef: fit.coef,
        gram_inv: fit.gram_inv,
        covariates,
        dummies,
        core_cols,
    })
}

// ---------------------------------------------------------------------------
// Nearest-neighbour variance
// ---------------------------------------------------------------------------

/// Per-observation variance from the `neighbors` nearest same-side points in
/// the running variable: `J/(J+1) * (y_i - mean_nn)^2`. Distance ties go to
/// the lower row index.
pub fn nn_variance(running: &[f64], outcome: &[f64], neighbors: usize) -> Result<Vec<f64>, RddError> {
    let j = neighbors;
    if j == 0 {
        return Err(RddError::InvalidSpec("need at least one neighbour".into()));
    }
    let mut out = vec![0.0; running.len()];
    for right in [false, true] {
        let mut idx: Vec<usize> = (0..running.len())
            .filter(|&i| (running[i] > 0.0) == right)
            .collect();
        if idx.len() <= j {
            return Err(RddError::InsufficientObservations(format!(
                "{} observations {} of cutoff, nearest-neighbour variance needs {}",
                idx.len(),
                if right { "right" } else { "left" },
                j + 1
            )));
        }
        idx.sort_by(|&a, &b| running[a].total_cmp(&running[b]).then(a.cmp(&b)));
        let mut chosen: Vec<(f64, usize)> = Vec::with_capacity(j + 4);
        for pos in 0..idx.len() {
            let i = idx[pos];
            let di = running[i];
            chosen.clear();
            let (mut l, mut r) = (pos, pos + 1);
            let dist = |k: usize| (di - running[idx[k]]).abs();
            loop {
                let dl = if l > 0 { dist(l - 1) } else { f64::INFINITY };
                let dr = if r < idx.len() { dist(r) } else { f64::INFINITY };
                let next = dl.min(dr);
                if next == f64::INFINITY {
                    break;
                }
                if chosen.len() >= j && next > chosen[chosen.len() - 1].0 {
                    break;
                }
                if dl <= dr {
                    l -= 1;
                    chosen.push((dl, idx[l]));
                } else {
                    chosen.push((dr, idx[r]));
                    r += 1;
                }
            }
            chosen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mean = chosen[..j].iter().map(|&(_, k)| outcome[k]).sum::<f64>() / j as f64;
            out[i] = j as f64 / (j as f64 + 1.0) * (outcome[i] - mean).powi(2);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Estimation
// ---------------------------------------------------------------------------

fn cluster_variance(
    weights: &[f64],
    residuals: &[f64],
    clusters: impl Iterator<Item = usize>,
    ncols: usize,
) -> Result<f64, RddError> {
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    for ((w, e), g) in weights.iter().zip(residuals).zip(clusters) {
        *scores.entry(g).or_default() += w * e;
    }
    let g = scores.len() as f64;
    let n = weights.len() as f64;
    if scores.len() < 2 || n <= ncols as f64 {
        return Err(RddError::InsufficientObservations(format!(
            "{} clusters and {} observations cannot support cluster-robust variance",
            scores.len(),
            weights.len()
        )));
    }
    let factor = g / (g - 1.0) * (n - 1.0) / (n - ncols as f64);
    Ok(factor * scores.values().map(|s| s * s).sum::<f64>())
}

/// Rounding scale of `sum_i w_i y_i`: estimates below it are numerically zero.
fn rounding_scale(weights: &[f64], rows: &[usize], sample: &RddSample) -> f64 {
    let s: f64 = weights
        .iter()
        .zip(rows)
        .map(|(w, &i)| (w * sample.outcome[i]).abs())
        .sum();
    NUMERICAL_ZERO * s
}

/// Relative size below which a linear combination counts as cancelled out.
pub const NUMERICAL_ZERO: f64 = 1e-10;

#[allow(clippy::too_many_arguments)]
fn finish(
    sample: &RddSample,
    spec: &RddSpec,
    fit_h: &LocalFit,
    h: f64,
    b: f64,
    beta: f64,
    se_conventional: f64,
    se_robust: f64,
    zero_scale: f64,
) -> RddEstimate {
    let p = spec.poly_order;
    let (mut n_left, mut n_right) = (0, 0);
    for &i in &fit_h.rows {
        if sample.running[i] > 0.0 {
            n_right += 1;
        } else {
            n_left += 1;
        }
    }
    let c = &fit_h.coef;
    let slopes_left = (1..=p).map(|k| c[2 * k] / h.powi(k as i32)).collect();
    let slopes_right = (1..=p)
        .map(|k| (c[2 * k] + c[2 * k + 1]) / h.powi(k as i32))
        .collect();
    RddEstimate {
        beta,
        beta_conventional: c[1],
        se_conventional,
        se_robust,
        // An estimate that cancels to rounding noise is an exact zero.
        p_value_robust: if beta.abs() <= zero_scale {
            1.0
        } else {
            normal_p_value(beta, se_robust)
        },
        h,
        b,
        n_left,
        n_right,
        n_total: sample.len(),
        intercept: c[0],
        slopes_left,
        slopes_right,
    }
}

/// Conventional local polynomial fit at bandwidth `h`. The robust fields
/// repeat the conventional ones and `b = h`.
pub fn local_poly_fit(sample: &RddSample, spec: &RddSpec, h: f64) -> Result<RddEstimate, RddError> {
    spec.validate()?;
    if !(h > 0.0) {
        return Err(RddError::InvalidSpec(format!("bandwidth must be positive, got {h}")));
    }
    let fit = local_fit(sample, h, spec.poly_order)?;
    let a = fit.linear_weights(1);
    let var = match spec.variance {
        VarianceKind::NearestNeighbor { neighbors } => {
            let d: Vec<f64> = fit.rows.iter().map(|&i| sample.running[i]).collect();
            let y: Vec<f64> = fit
                .rows
                .iter()
                .map(|&i| sample.outcome[i] - fit.adjustment(sample, i))
                .collect();
            let s2 = nn_variance(&d, &y, neighbors)?;
            a.iter().zip(&s2).map(|(w, s)| w * w * s).sum::<f64>()
        }
        VarianceKind::Cluster => cluster_variance(
            &a,
            &fit.residuals(sample),
            fit.rows.iter().map(|&i| sample.clusters[i]),
            fit.x.ncols(),
        )?,
    };
    let se = var.sqrt();
    let zero = rounding_scale(&a, &fit.rows, sample);
    Ok(finish(sample, spec, &fit, h, h, fit.coef[1], se, se, zero))
}

/// Estimate at fixed `(h, b)`, bias corrected when the spec asks for it.
pub fn estimate_at(sample: &RddSample, spec: &RddSpec, h: f64, b: f64) -> Result<RddEstimate, RddError> {
    spec.validate()?;
    if !spec.bias_correction {
        return local_poly_fit(sample, spec, h);
    }
    if !(h > 0.0 && b >= h) {
        return Err(RddError::InvalidSpec(format!(
            "need 0 < h <= b, got h = {h}, b = {b}"
        )));
    }
    let p = spec.poly_order;
    let fit_h = local_fit(sample, h, p)?;
    let fit_b = local_fit(sample, b, p + 1)?;

    let a = fit_h.linear_weights(1);
    let beta_conv = fit_h.coef[1];

    // Leading bias: the h-fit's response to the omitted d^(p+1) terms on each side,
    // times their coefficients estimated by the (p+1)-order fit at b.
    let scale = b.powi(p as i32 + 1);
    let curv_cols = [2 * (p + 1), 2 * (p + 1) + 1];
    let theta_hat = [fit_b.coef[curv_cols[0]] / scale, fit_b.coef[curv_cols[1]] / scale];
    let mut c = [0.0; 2];
    for (r, &i) in fit_h.rows.iter().enumerate() {
        let d = sample.running[i];
        let m = d.powi(p as i32 + 1);
        c[0] += a[r] * m;
        if d > 0.0 {
            c[1] += a[r] * m;
        }
    }
    let beta_bc = beta_conv - c[0] * theta_hat[0] - c[1] * theta_hat[1];

    // Combined linear weights over the b-sample, which contains the h-sample.
    let theta_w = [fit_b.linear_weights(curv_cols[0]), fit_b.linear_weights(curv_cols[1])];
    let mut conv_w = vec![0.0; fit_b.rows.len()];
    let mut pos = 0;
    for (r, &i) in fit_h.rows.iter().enumerate() {
        while fit_b.rows[pos] != i {
            pos += 1;
        }
        conv_w[pos] = a[r];
    }
    let robust_w: Vec<f64> = (0..fit_b.rows.len())
        .map(|r| conv_w[r] - (c[0] * theta_w[0][r] + c[1] * theta_w[1][r]) / scale)
        .collect();

    let (var_conv, var_robust) = match spec.variance {
        VarianceKind::NearestNeighbor { neighbors } => {
            let d: Vec<f64> = fit_b.rows.iter().map(|&i| sample.running[i]).collect();
            let y: Vec<f64> = fit_b
                .rows
                .iter()
                .map(|&i| sample.outcome[i] - fit_b.adjustment(sample, i))
                .collect();
            let s2 = nn_variance(&d, &y, neighbors)?;
            let quad = |w: &[f64]| w.iter().zip(&s2).map(|(w, s)| w * w * s).sum::<f64>();
            (quad(&conv_w), quad(&robust_w))
        }
        VarianceKind::Cluster => {
            let conv = cluster_variance(
                &a,
                &fit_h.residuals(sample),
                fit_h.rows.iter().map(|&i| sample.clusters[i]),
                fit_h.x.ncols(),
            )?;
            let rob = cluster_variance(
                &robust_w,
                &fit_b.residuals(sample),
                fit_b.rows.iter().map(|&i| sample.clusters[i]),
                fit_b.x.ncols(),
            )?;
            (conv, rob)
        }
    };
    Ok(finish(
        sample,
        spec,
        &fit_h,
        h,
        b,
        beta_bc,
        var_conv.sqrt(),
        var_robust.sqrt(),
        rounding_scale(&robust_w, &fit_b.rows, sample),
    ))
}

/// Full estimator: selects `(h, b)` when the spec asks for it, then estimates.
pub fn bias_corrected_estimate(sample: &RddSample, spec: &RddSpec) -> Result<RddEstimate, RddError> {
    spec.validate()?;
    let (h, b) = match spec.bandwidth {
        BandwidthMode::Manual(h) => (h, h * spec.bias_ratio),
        BandwidthMode::MseOptimal => select_bandwidth(sample, spec)?,
    };
    estimate_at(sample, spec, h, b)
}

// ---------------------------------------------------------------------------
// Bandwidth selection
// ---------------------------------------------------------------------------

pub const BANDWIDTH_CANDIDATES: usize = 40;
pub const MIN_OBS_PER_SIDE_FOR_SELECTION: usize = 20;

/// Log-spaced candidates from twice the cell spacing up to `max |d|`.
pub fn bandwidth_grid(sample: &RddSample) -> Result<Vec<f64>, RddError> {
    let max = sample.running.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let spacing = match sample.spacing_km {
        Some(s) => s,
        None => median_gap(&sample.running).ok_or_else(|| {
            RddError::BandwidthFailure("running variable has no spread".into())
        })?,
    };
    let lo = 2.0 * spacing;
    if !(lo < max) {
        return Ok(vec![max]);
    }
    let n = BANDWIDTH_CANDIDATES;
    let step = (max / lo).ln() / (n - 1) as f64;
    Ok((0..n)
        .map(|k| if k + 1 == n { max } else { lo * (step * k as f64).exp() })
        .collect())
}

fn median_gap(running: &[f64]) -> Option<f64> {
    let mut a: Vec<f64> = running.iter().map(|d| d.abs()).collect();
    a.sort_by(f64::total_cmp);
    let range = a.last()? - a.first()?;
    let mut gaps: Vec<f64> = a
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g > 1e-9 * range)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    Some(gaps[gaps.len() / 2])
}

/// Compensated running sums, so window sums keep full precision.
struct PrefixSums {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl PrefixSums {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let mut hi = vec![0.0];
        let mut lo = vec![0.0];
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for v in values {
            let t = s + v;
            let bp = t - s;
            c += (s - (t - bp)) + (v - bp);
            s = t;
            hi.push(s);
            lo.push(c);
        }
        Self { hi, lo }
    }

    fn range(&self, a: usize, b: usize) -> f64 {
        (self.hi[b] - self.hi[a]) + (self.lo[b] - self.lo[a])
    }
}

/// One side of the cutoff, sorted by |d|, with power sums for windowed fits.
struct CvSide {
    x: Vec<f64>,
    y: Vec<f64>,
    xpow: Vec<PrefixSums>,
    ypow: Vec<PrefixSums>,
    n_eval: usize,
}

impl CvSide {
    fn new(mut pts: Vec<(f64, usize, f64)>, order: usize) -> Self {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let xpow = (0..=2 * order + 1)
            .map(|r| PrefixSums::new(x.iter().map(|v| v.powi(r as i32))))
            .collect();
        let ypow = (0..=order + 1)
            .map(|r| PrefixSums::new(x.iter().zip(&y).map(|(v, w)| w * v.powi(r as i32))))
            .collect();
        let n_eval = x.len().div_ceil(2);
        Self {
            x,
            y,
            xpow,
            ypow,
            n_eval,
        }
    }

    /// Prediction at point `k` from same-side points strictly farther from the
    /// cutoff and within `h` of it. `None` when the window cannot support the fit.
    fn predict(&self, k: usize, h: f64, order: usize, binom: &[Vec<f64>]) -> Option<f64> {
        let xk = self.x[k];
        let lo = self.x.partition_point(|&v| v <= xk);
        let hi = self.x.partition_point(|&v| v < xk + h);
        if hi <= lo || hi - lo < order + 1 {
            return None;
        }
        let nx = 2 * order + 2;
        let ny = order + 2;
        let raw_x: Vec<f64> = (0..nx).map(|r| self.xpow[r].range(lo, hi)).collect();
        let raw_y: Vec<f64> = (0..ny).map(|r| self.ypow[r].range(lo, hi)).collect();
        // Shift to u = x - xk through the binomial expansion.
        let shift = |raw: &[f64], m: usize| -> f64 {
            let mut s = 0.0;
            let mut pw = 1.0;
            for r in (0..=m).rev() {
                s += binom[m][r] * pw * raw[r];
                pw *= -xk;
            }
            s
        };
        let su: Vec<f64> = (0..nx).map(|m| shift(&raw_x, m)).collect();
        let sy: Vec<f64> = (0..ny).map(|m| shift(&raw_y, m)).collect();
        let n = order + 1;
        let mut a = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = su[i + j] - su[i + j + 1] / h;
            }
            rhs[i] = sy[i] - sy[i + 1] / h;
        }
        solve_spd_small(&mut a, &mut rhs, n, 1e-10).then_some(rhs[0])
    }
}

fn binomials(n: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; n + 1]; n + 1];
    for m in 0..=n {
        c[m][0] = 1.0;
        for r in 1..=m {
            c[m][r] = c[m - 1][r - 1] + if r < m { c[m - 1][r] } else { 0.0 };
        }
    }
    c
}

/// Leave-one-out criterion evaluation shared by selection and diagnostics.
pub struct CrossValidation {
    sides: [CvSide; 2],
    order: usize,
    binom: Vec<Vec<f64>>,
    tie_tol: f64,
}

impl CrossValidation {
    /// Prepares the criterion for `sample` at polynomial order `order`.
    /// With covariates or group effects the outcome is first adjusted using a
    /// pilot fit over the whole sample.
    pub fn new(sample: &RddSample, order: usize) -> Result<Self, RddError> {
        let adjusted: Vec<f64> = if sample.has_adjustment() {
            let max = sample.running.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            let pilot = local_fit(sample, max * 1.01, order)?;
            (0..sample.len())
                .map(|i| sample.outcome[i] - pilot.adjustment(sample, i))
                .collect()
        } else {
            sample.outcome.clone()
        };
        let side = |right: bool| {
            let pts = (0..sample.len())
                .filter(|&i| (sample.running[i] > 0.0) == right)
                .map(|i| (sample.running[i].abs(), i, adjusted[i]))
                .collect();
            CvSide::new(pts, order)
        };
        let n = adjusted.len() as f64;
        let mean = adjusted.iter().sum::<f64>() / n;
        let var = adjusted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let msq = adjusted.iter().map(|v| v * v).sum::<f64>() / n;
        Ok(Self {
            sides: [side(false), side(true)],
            order,
            binom: binomials(2 * order + 2),
            tie_tol: 1e-10 * var.max(msq) + f64::MIN_POSITIVE,
        })
    }

    /// Mean squared prediction error over the inner half of each side, or
    /// `+inf` when any evaluation point lacks a usable window.
    pub fn criterion(&self, h: f64) -> f64 {
        let mut sse = 0.0;
        let mut count = 0usize;
        for side in &self.sides {
            for k in 0..side.n_eval {
                match side.predict(k, h, self.order, &self.binom) {
                    Some(pred) => sse += (side.y[k] - pred).powi(2),
                    None => return f64::INFINITY,
                }
                count += 1;
            }
        }
        sse / count as f64
    }
}

/// Cross-validated bandwidth `h` and bias bandwidth `b = bias_ratio * h`.
/// Candidates within a relative tolerance of the minimum count as ties and
/// the largest of them wins.
pub fn select_bandwidth(sample: &RddSample, spec: &RddSpec) -> Result<(f64, f64), RddError> {
    spec.validate()?;
    let (left, right) = sample.side_counts();
    if left < MIN_OBS_PER_SIDE_FOR_SELECTION || right < MIN_OBS_PER_SIDE_FOR_SELECTION {
        return Err(RddError::InsufficientObservations(format!(
            "bandwidth selection needs {MIN_OBS_PER_SIDE_FOR_SELECTION} per side, have {left} left and {right} right"
        )));
    }
    let grid = bandwidth_grid(sample)?;
    let cv = CrossValidation::new(sample, spec.poly_order)?;
    let scores: Vec<f64> = grid.iter().map(|&h| cv.criterion(h)).collect();
    let h = choose_bandwidth(&grid, &scores, cv.tie_tol)
        .ok_or_else(|| RddError::BandwidthFailure("criterion is not finite for any candidate".into()))?;
    Ok((h, h * spec.bias_ratio))
}

/// Largest candidate whose score is within `tol` of the smallest finite score.
pub fn choose_bandwidth(grid: &[f64], scores: &[f64], tol: f64) -> Option<f64> {
    let min = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    grid.iter()
        .zip(scores)
        .filter(|(_, &s)| s.is_finite() && s <= min + tol)
        .map(|(&h, _)| h)
        .fold(None, |acc: Option<f64>, h| Some(acc.map_or(h, |a| a.max(h))))
}

// ---------------------------------------------------------------------------
// RD plot data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotBin {
    pub side: &'static str,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub center: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFit {
    pub side: &'static str,
    pub order: usize,
    /// Coefficients on `1, d, d^2, ...`; `None` if the side cannot support the order.
    pub coefficients: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdPlot {
    pub bins: Vec<PlotBin>,
    pub fits: Vec<PlotFit>,
}

/// Evenly spaced bin means over `[-range, 0)` and `(0, range]` and global
/// polynomial fits per side.
pub fn rd_plot_data(
    running: &[f64],
    outcome: &[f64],
    orders: &[usize],
    bins_per_side: usize,
    range_km: f64,
) -> RdPlot {
    let width = range_km / bins_per_side as f64;
    let mut sums = vec![(0usize, 0.0f64); 2 * bins_per_side];
    for (&d, &y) in running.iter().zip(outcome) {
        if d == 0.0 || d.abs() > range_km {
            continue;
        }
        let slot = if d > 0.0 {
            let k = ((d / width).ceil() as usize).clamp(1, bins_per_side) - 1;
            bins_per_side + k
        } else {
            ((d + range_km) / width).floor().min(bins_per_side as f64 - 1.0) as usize
        };
        sums[slot].0 += 1;
        sums[slot].1 += y;
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(s, &(count, total))| {
            let (side, k, lower) = if s < bins_per_side {
                ("left", s, -range_km + s as f64 * width)
            } else {
                let k = s - bins_per_side;
                ("right", k, k as f64 * width)
            };
            PlotBin {
                side,
                bin: k,
                lower,
                upper: lower + width,
                center: lower + width / 2.0,
                count,
                mean: (count > 0).then(|| total / count as f64),
            }
        })
        .collect();

    let mut fits = Vec::new();
    for (side, right) in [("left", false), ("right", true)] {
        let pts: Vec<(f64, f64)> = running
            .iter()
            .zip(outcome)
            .filter(|(&d, _)| d != 0.0 && (d > 0.0) == right && d.abs() <= range_km)
            .map(|(&d, &y)| (d, y))
            .collect();
        for &order in orders {
            fits.push(PlotFit {
                side,
                order,
                coefficients: global_poly(&pts, order, range_km),
            });
        }
    }
    RdPlot { bins, fits }
}

fn global_poly(pts: &[(f64, f64)], order: usize, scale: f64) -> Option<Vec<f64>> {
    if pts.len() <= order {
        return None;
    }
    let x = DMatrix::from_fn(pts.len(), order + 1, |i, j| (pts[i].0 / scale).powi(j as i32));
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let fit = linalg::ols(&x, &y).ok()?;
    Some(
        (0..=order)
            .map(|j| fit.coef[j] / scale.powi(j as i32))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

/// One line of a results table; estimate fields are empty on failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub outcome: String,
    pub border_id: String,
    pub p: usize,
    pub beta: Option<f64>,
    pub se_conventional: Option<f64>,
    pub se_robust: Option<f64>,
    pub p_value_robust: Option<f64>,
    pub h: Option<f64>,
    pub b: Option<f64>,
    pub n_left: Option<usize>,
    pub n_right: Option<usize>,
    pub n_total: usize,
    pub status: String,
}

impl ResultRow {
    pub fn new(
        outcome: &str,
        border_id: &str,
        p: usize,
        n_total: usize,
        result: &Result<RddEstimate, RddError>,
    ) -> Self {
        let est = result.as_ref().ok();
        Self {
            outcome: outcome.to_string(),
            border_id: border_id.to_string(),
            p,
            beta: est.map(|e| e.beta),
            se_conventional: est.map(|e| e.se_conventional),
            se_robust: est.map(|e| e.se_robust),
            p_value_robust: est.map(|e| e.p_value_robust),
            h: est.map(|e| e.h),
            b: est.map(|e| e.b),
            n_left: est.map(|e| e.n_left),
            n_right: est.map(|e| e.n_right),
            n_total,
            status: match result {
                Ok(_) => "ok".into(),
                Err(e) => e.status().into(),
            },
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}
