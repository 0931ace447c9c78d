//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment, nesting is expressed with dotted
//! keys (`rdd.bandwidth = 20`). Relative paths resolve against the directory
//! holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::outcomes::{LumPerPerson, TableOptions};
use crate::raster::FishnetSpec;
use crate::rdd::{BandwidthMode, RddSpec, VarianceKind};
use crate::synth::{
    BandOrientation, BorderShape, Covariates, DialectBands, Extent, SyntheticWorldConfig,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("`{key}` points to {path}, which does not exist")]
    MissingPath { key: String, path: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Keys accepted in a run configuration; `*` matches any suffix.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "threads",
    "output_dir",
    "world.*",
    "grids.*",
    "borders.vertices",
    "borders.metadata",
    "fishnet.cell_size",
    "fishnet.origin_lon",
    "fishnet.origin_lat",
    "table.path",
    "table.max_km",
    "table.lum_pp",
    "table.dialect_min_share",
    "table.cluster_bin_deg",
    "rdd.bandwidth",
    "rdd.variance",
    "rdd.nn_neighbors",
    "rdd.bias_correction",
    "rdd.bias_ratio",
    "rdd.covariates",
    "studies.rank_gap_threshold",
    "studies.balance_covariates",
    "rdplot.outcomes",
    "rdplot.orders",
    "rdplot.bins",
    "rdplot.range_km",
    "rdplot.border",
    "dyads.cities",
    "dyads.limit_km",
    "private.prefectures",
    "rankgdp.provinces",
];

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("invalid key `{key}`"),
                });
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        let cfg = Self {
            entries,
            base_dir: PathBuf::from("."),
        };
        cfg.check_known()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    fn check_known(&self) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            let known = KNOWN_KEYS.iter().any(|k| match k.strip_suffix('*') {
                Some(prefix) => key.starts_with(prefix),
                None => key == k,
            });
            if !known {
                return Err(ConfigError::Unknown(key.clone()));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.into(),
                    message: format!("`{v}`: {e}"),
                })
            })
            .transpose()
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Comma-separated list; empty when the key is absent or blank.
    pub fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn parsed_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.list(key)
            .iter()
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.into(),
                    message: format!("`{v}`: {e}"),
                })
            })
            .collect()
    }

    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Optional path key, resolved but not checked.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.resolve(v))
    }

    /// Required path key that must exist on disk.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf, ConfigError> {
        let p = self.path(key).ok_or_else(|| ConfigError::Missing(key.into()))?;
        if !p.exists() {
            return Err(ConfigError::MissingPath {
                key: key.into(),
                path: p.display().to_string(),
            });
        }
        Ok(p)
    }

    /// Every comma-separated entry of `key` resolved and checked.
    pub fn existing_paths(&self, key: &str) -> Result<Vec<PathBuf>, ConfigError> {
        let items = self.list(key);
        if items.is_empty() {
            return Err(ConfigError::Missing(key.into()));
        }
        items
            .iter()
            .map(|v| {
                let p = self.resolve(v);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(ConfigError::MissingPath {
                        key: key.into(),
                        path: p.display().to_string(),
                    })
                }
            })
            .collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.path("output_dir").unwrap_or_else(|| self.resolve("out"))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.parsed_or("seed", 1)
    }

    pub fn threads(&self) -> Result<Option<usize>, ConfigError> {
        self.parsed("threads")
    }

    fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn fishnet(&self) -> Result<FishnetSpec, ConfigError> {
        let d = FishnetSpec::default();
        FishnetSpec::new(
            self.parsed_or("fishnet.cell_size", d.cell_size_deg)?,
            self.parsed_or("fishnet.origin_lon", d.origin_lon)?,
            self.parsed_or("fishnet.origin_lat", d.origin_lat)?,
        )
        .map_err(|e| Self::invalid("fishnet.cell_size", e.to_string()))
    }

    pub fn table_options(&self) -> Result<TableOptions, ConfigError> {
        let d = TableOptions::default();
        let lum_pp = match self.get("table.lum_pp") {
            None | Some("log_over_population") => LumPerPerson::LogOverPopulation,
            Some("log_of_ratio") => LumPerPerson::LogOfRatio,
            Some(other) => {
                return Err(Self::invalid(
                    "table.lum_pp",
                    format!("`{other}` is not log_over_population or log_of_ratio"),
                ))
            }
        };
        let options = TableOptions {
            max_km: self.parsed_or("table.max_km", d.max_km)?,
            lum_pp,
            dialect_min_share: self.parsed_or("table.dialect_min_share", d.dialect_min_share)?,
            cluster_bin_deg: self.parsed_or("table.cluster_bin_deg", d.cluster_bin_deg)?,
        };
        if !(options.max_km > 0.0) {
            return Err(Self::invalid("table.max_km", "must be positive"));
        }
        if !(options.cluster_bin_deg > 0.0) {
            return Err(Self::invalid("table.cluster_bin_deg", "must be positive"));
        }
        Ok(options)
    }

    /// Base estimator settings; outcome and order are set per study.
    pub fn rdd_spec(&self) -> Result<RddSpec, ConfigError> {
        let d = RddSpec::default();
        let bandwidth = match self.get("rdd.bandwidth") {
            None | Some("mse_optimal") => BandwidthMode::MseOptimal,
            Some(v) => BandwidthMode::Manual(v.parse::<f64>().map_err(|_| {
                Self::invalid("rdd.bandwidth", format!("`{v}` is neither mse_optimal nor a number"))
            })?),
        };
        let variance = match self.get("rdd.variance") {
            None | Some("nn") => VarianceKind::NearestNeighbor {
                neighbors: self.parsed_or("rdd.nn_neighbors", 3)?,
            },
            Some("cluster") => VarianceKind::Cluster,
            Some(v) => return Err(Self::invalid("rdd.variance", format!("`{v}` is not nn or cluster"))),
        };
        let spec = RddSpec {
            bandwidth,
            variance,
            bias_correction: self.parsed_or("rdd.bias_correction", d.bias_correction)?,
            bias_ratio: self.parsed_or("rdd.bias_ratio", d.bias_ratio)?,
            ..d
        };
        spec.validate()
            .map_err(|e| Self::invalid("rdd", e.to_string()))?;
        Ok(spec)
    }

    /// Controls for covariate-adjusted runs.
    pub fn covariates(&self) -> Vec<String> {
        match self.get("rdd.covariates") {
            Some(_) => self.list("rdd.covariates"),
            None => crate::studies::DEFAULT_COVARIATES.map(String::from).to_vec(),
        }
    }

    pub fn world(&self) -> Result<SyntheticWorldConfig, ConfigError> {
        let d = SyntheticWorldConfig::default();
        let f = |k: &str, v: f64| self.parsed_or(&format!("world.{k}"), v);
        let border = match self.get("world.border") {
            None | Some("straight") => BorderShape::Straight,
            Some("sinusoidal") => BorderShape::Sinusoidal {
                amplitude_deg: f("border_amplitude", 0.05)?,
                period_deg: f("border_period", 0.5)?,
            },
            Some(v) => return Err(Self::invalid("world.border", format!("`{v}` is not straight or sinusoidal"))),
        };
        let orientation = match self.get("world.dialect_orientation") {
            None | Some("latitude") => BandOrientation::Latitude,
            Some("longitude") => BandOrientation::Longitude,
            Some("diagonal") => BandOrientation::Diagonal,
            Some(v) => {
                return Err(Self::invalid(
                    "world.dialect_orientation",
                    format!("`{v}` is not latitude, longitude or diagonal"),
                ))
            }
        };
        let list_or = |k: &str, v: &[f64]| -> Result<Vec<f64>, ConfigError> {
            let key = format!("world.{k}");
            if self.get(&key).is_some() {
                self.parsed_list(&key)
            } else {
                Ok(v.to_vec())
            }
        };
        let cov = |prefix: &str, base: &Covariates| -> Result<Covariates, ConfigError> {
            Ok(Covariates {
                elevation: f(&format!("{prefix}.elevation"), base.elevation)?,
                precipitation: f(&format!("{prefix}.precipitation"), base.precipitation)?,
                population: f(&format!("{prefix}.population"), base.population)?,
                dist_road: f(&format!("{prefix}.dist_road"), base.dist_road)?,
            })
        };
        let border_ranks = self
            .list("world.border_ranks")
            .iter()
            .map(|pair| {
                let (h, l) = pair.split_once(':').ok_or_else(|| {
                    Self::invalid("world.border_ranks", format!("`{pair}` is not high:low"))
                })?;
                let parse = |s: &str| {
                    s.trim().parse::<i32>().map_err(|e| {
                        Self::invalid("world.border_ranks", format!("`{s}`: {e}"))
                    })
                };
                Ok((parse(h)?, parse(l)?))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let cfg = SyntheticWorldConfig {
            extent: Extent {
                lon_min: f("lon_min", d.extent.lon_min)?,
                lat_min: f("lat_min", d.extent.lat_min)?,
                lon_max: f("lon_max", d.extent.lon_max)?,
                lat_max: f("lat_max", d.extent.lat_max)?,
            },
            pixel_size: f("pixel_size", d.pixel_size)?,
            strips: self.parsed_or("world.strips", d.strips)?,
            border,
            border_lon: self.parsed("world.border_lon")?,
            delta: f("delta", d.delta)?,
            surface: list_or("surface", &d.surface)?,
            trend_low: list_or("trend_low", &d.trend_low)?,
            trend_high: list_or("trend_high", &d.trend_high)?,
            noise_sd: f("noise_sd", d.noise_sd)?,
            noise_ar: f("noise_ar", d.noise_ar)?,
            covariate_jumps: cov("jump", &d.covariate_jumps)?,
            covariate_noise_sd: cov("covariate_sd", &d.covariate_noise_sd)?,
            covariate_lat_gradient: f("covariate_lat_gradient", d.covariate_lat_gradient)?,
            dialect_bands: DialectBands {
                count: self.parsed_or("world.dialect_bands", d.dialect_bands.count)?,
                orientation,
                offsets: list_or("dialect_offsets", &d.dialect_bands.offsets)?,
            },
            pop_zero_fraction: f("pop_zero_fraction", d.pop_zero_fraction)?,
            rank_high: self.parsed_or("world.rank_high", d.rank_high)?,
            rank_low: self.parsed_or("world.rank_low", d.rank_low)?,
            border_ranks,
            seed: self.seed()?,
        };
        cfg.validate()
            .map_err(|e| Self::invalid("world", e.to_string()))?;
        Ok(cfg)
    }
}
