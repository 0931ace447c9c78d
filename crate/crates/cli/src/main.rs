use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use border_rdd::config::Config;
use border_rdd::geometry::{read_borders, BorderPolyline};
use border_rdd::outcomes::{build_cell_table, dialect_frequency, CellTable, LayerSet};
use border_rdd::raster::{load_grid, multi_year_mean, GridKind};
use border_rdd::rdd::{rd_plot_data, RddSample, RddSpec};
use border_rdd::studies::{self, to_csv_string, to_csv_with_header, DEFAULT_RANK_GAP, DYAD_LIMIT_KM};
use border_rdd::synth;

#[derive(Parser)]
#[command(name = "border-rdd", version, about = "Spatial regression discontinuity at administrative borders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; overrides the `threads` key and BORDER_RDD_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic world and companion fixtures.
    Simulate,
    /// Build the cell table from grids and borders.
    Table,
    /// Pooled dialect fixed-effect estimates, with and without controls.
    Estimate,
    /// Covariate balance at each retained border.
    Balance,
    /// Luminosity and lit at each retained border.
    Battery,
    /// Binned means and global polynomial fits for plotting.
    Rdplot,
    /// Within- versus across-province city differences.
    Dyads,
    /// Private employment share differences against rank gaps.
    Private,
    /// Province GDP per capita against rank.
    Rankgdp,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().context("--config <path> is required")?;
    let cfg = Config::load(path).with_context(|| format!("loading {}", path.display()))?;
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match cfg.threads()? {
            Some(n) => Some(n),
            None => std::env::var("BORDER_RDD_THREADS")
                .ok()
                .map(|v| v.parse::<usize>().context("BORDER_RDD_THREADS is not a count"))
                .transpose()?,
        },
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    pool.install(|| match cli.command {
        Command::Simulate => simulate(&cfg, &out),
        Command::Table => table(&cfg, &out),
        Command::Estimate => estimate(&cfg, &out),
        Command::Balance => balance(&cfg, &out),
        Command::Battery => battery(&cfg, &out),
        Command::Rdplot => rdplot(&cfg, &out),
        Command::Dyads => dyads(&cfg, &out),
        Command::Private => private(&cfg, &out),
        Command::Rankgdp => rankgdp(&cfg, &out),
    })
}

/// Writes through a sibling temp file, then renames over the target.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    write(&tmp)?;
    std::fs::rename(&tmp, path).with_context(|| format!("moving output into {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |tmp| {
        std::fs::write(tmp, text).with_context(|| format!("writing {}", tmp.display()))
    })
}

fn simulate(cfg: &Config, out: &Path) -> Result<()> {
    let world_cfg = cfg.world()?;
    let world = synth::generate_world(&world_cfg).context("generating world")?;
    let staging = out.join(".simulate.tmp");
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    synth::write_world(&staging, &world).context("writing world")?;
    let fx = synth::generate_fixtures(&world_cfg, &world);
    std::fs::write(staging.join("cities.csv"), to_csv_string(&fx.cities)?)?;
    std::fs::write(staging.join("prefectures.csv"), to_csv_string(&fx.prefectures)?)?;
    std::fs::write(staging.join("provinces.csv"), to_csv_string(&fx.provinces)?)?;
    let mut names: Vec<_> = std::fs::read_dir(&staging)?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for name in names {
        std::fs::rename(staging.join(&name), out.join(&name))?;
    }
    std::fs::remove_dir(&staging)?;
    println!("simulate: wrote world to {}", out.display());
    Ok(())
}

fn borders(cfg: &Config) -> Result<Vec<BorderPolyline>> {
    let v = cfg.existing_path("borders.vertices")?;
    let m = cfg.existing_path("borders.metadata")?;
    read_borders(&v, &m).context("reading borders")
}

fn grid(cfg: &Config, key: &str, kind: GridKind, required: bool) -> Result<Option<border_rdd::raster::RasterGrid>> {
    if cfg.get(key).is_none() && !required {
        return Ok(None);
    }
    let p = cfg.existing_path(key)?;
    Ok(Some(load_grid(&p, kind).with_context(|| format!("{key}: {}", p.display()))?))
}

fn table(cfg: &Config, out: &Path) -> Result<()> {
    let lights: Vec<_> = cfg
        .existing_paths("grids.lights")?
        .iter()
        .map(|p| load_grid(p, GridKind::Continuous).with_context(|| format!("grids.lights: {}", p.display())))
        .collect::<Result<_>>()?;
    let layers = LayerSet {
        lights: Some(multi_year_mean(&lights).context("grids.lights")?),
        population: grid(cfg, "grids.population", GridKind::Continuous, true)?,
        elevation: grid(cfg, "grids.elevation", GridKind::Continuous, true)?,
        precipitation: grid(cfg, "grids.precipitation", GridKind::Continuous, true)?,
        dist_road: grid(cfg, "grids.dist_road", GridKind::Continuous, true)?,
        dialect: grid(cfg, "grids.dialect", GridKind::Categorical, true)?,
        province: grid(cfg, "grids.province", GridKind::Categorical, false)?,
    };
    let borders = borders(cfg)?;
    let table = build_cell_table(&layers, &borders, &cfg.fishnet()?, &cfg.table_options()?)
        .context("building cell table")?;
    let path = table_path(cfg, out);
    write_atomic(&path, |tmp| Ok(table.write_csv(tmp)?))?;
    write_text(&out.join("filters.csv"), &to_csv_string(&table.provenance.filters)?)?;
    write_text(&out.join("dialect_frequency.csv"), &to_csv_string(&dialect_frequency(&table))?)?;
    println!("table: {} cells -> {}", table.len(), path.display());
    Ok(())
}

fn table_path(cfg: &Config, out: &Path) -> PathBuf {
    cfg.path("table.path").unwrap_or_else(|| out.join("cells.csv"))
}

fn load_table(cfg: &Config, out: &Path) -> Result<CellTable> {
    let path = table_path(cfg, out);
    if !path.exists() {
        bail!("table.path: {} does not exist (run `table` first)", path.display());
    }
    CellTable::read_csv(&path).with_context(|| format!("reading {}", path.display()))
}

fn estimate(cfg: &Config, out: &Path) -> Result<()> {
    let table = load_table(cfg, out)?;
    let spec = cfg.rdd_spec()?;
    let plain = studies::pooled_dialect_fe(&table, &[], &spec);
    let controlled = studies::pooled_dialect_fe(&table, &cfg.covariates(), &spec);
    write_text(&out.join("pooled.csv"), &to_csv_string(&plain)?)?;
    write_text(&out.join("pooled_covariates.csv"), &to_csv_string(&controlled)?)?;
    println!("estimate: {} pooled rows", plain.len() + controlled.len());
    Ok(())
}

/// Border ids retained by the rank-gap filter, plus the per-border gap log.
fn retained_borders(cfg: &Config, out: &Path) -> Result<Vec<String>> {
    let borders = borders(cfg)?;
    let threshold: i32 = cfg.parsed_or("studies.rank_gap_threshold", DEFAULT_RANK_GAP)?;
    if threshold < 1 {
        bail!("studies.rank_gap_threshold must be at least 1");
    }
    let summary = studies::rank_gap_filter(&borders, threshold);
    let keep: Vec<String> = summary.retained.iter().map(|b| b.border_id.clone()).collect();
    let mut text = String::from("border_id,rank_high,rank_low,gap,retained\n");
    for b in &borders {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            b.border_id,
            b.rank_high,
            b.rank_low,
            b.rank_gap(),
            u8::from(keep.contains(&b.border_id))
        ));
    }
    write_text(&out.join("rank_gaps.csv"), &text)?;
    Ok(keep)
}

fn restrict(table: &CellTable, keep: &[String]) -> CellTable {
    let records = table
        .records
        .iter()
        .filter(|r| keep.contains(&r.border_id))
        .cloned()
        .collect();
    CellTable {
        records,
        provenance: table.provenance.clone(),
    }
}

fn balance(cfg: &Config, out: &Path) -> Result<()> {
    let table = load_table(cfg, out)?;
    let keep = retained_borders(cfg, out)?;
    let covs = match cfg.get("studies.balance_covariates") {
        Some(_) => cfg.list("studies.balance_covariates"),
        None => studies::DEFAULT_COVARIATES.map(String::from).to_vec(),
    };
    let rows = studies::balance_battery(&restrict(&table, &keep), &covs, &cfg.rdd_spec()?);
    write_text(&out.join("balance.csv"), &to_csv_with_header(RESULT_HEADER, &rows)?)?;
    println!("balance: {} rows", rows.len());
    Ok(())
}

const RESULT_HEADER: &[&str] = &[
    "outcome",
    "border_id",
    "p",
    "beta",
    "se_conventional",
    "se_robust",
    "p_value_robust",
    "h",
    "b",
    "n_left",
    "n_right",
    "n_total",
    "status",
];

fn battery(cfg: &Config, out: &Path) -> Result<()> {
    let table = load_table(cfg, out)?;
    let keep = retained_borders(cfg, out)?;
    let present = table.border_ids();
    let keep: Vec<String> = keep.into_iter().filter(|b| present.contains(b)).collect();
    let rows = if keep.is_empty() {
        Vec::new()
    } else {
        studies::per_border_battery(&table, &keep, &cfg.covariates(), &cfg.rdd_spec()?)
    };
    write_text(&out.join("battery.csv"), &to_csv_with_header(RESULT_HEADER, &rows)?)?;
    println!("battery: {} rows", rows.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct BinRow<'a> {
    outcome: &'a str,
    side: &'a str,
    bin: usize,
    lower: f64,
    upper: f64,
    center: f64,
    count: usize,
    mean: Option<f64>,
}

#[derive(serde::Serialize)]
struct FitRow<'a> {
    outcome: &'a str,
    side: &'a str,
    order: usize,
    term: usize,
    coefficient: Option<f64>,
}

fn rdplot(cfg: &Config, out: &Path) -> Result<()> {
    let mut table = load_table(cfg, out)?;
    if let Some(b) = cfg.get("rdplot.border") {
        table = table.for_border(b);
        if table.is_empty() {
            bail!("rdplot.border: no cells for border `{b}`");
        }
    }
    let outcomes = match cfg.get("rdplot.outcomes") {
        Some(_) => cfg.list("rdplot.outcomes"),
        None => vec!["luminosity".into(), "lit".into()],
    };
    let orders: Vec<usize> = match cfg.get("rdplot.orders") {
        Some(_) => cfg.parsed_list("rdplot.orders")?,
        None => vec![1, 2, 3, 4],
    };
    if orders.iter().any(|o| !(1..=4).contains(o)) {
        bail!("rdplot.orders: orders must lie in 1..=4");
    }
    let bins: usize = cfg.parsed_or("rdplot.bins", 20)?;
    let range: f64 = cfg.parsed_or("rdplot.range_km", cfg.table_options()?.max_km)?;
    let mut bin_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut plots = Vec::new();
    for o in &outcomes {
        let spec = RddSpec::new(o.clone(), 1);
        let sample = RddSample::from_table(&table, &spec).with_context(|| format!("rdplot.outcomes: {o}"))?;
        plots.push((o.as_str(), rd_plot_data(sample.running(), sample.outcome(), &orders, bins, range)));
    }
    for (o, plot) in &plots {
        for b in &plot.bins {
            bin_rows.push(BinRow {
                outcome: o,
                side: b.side,
                bin: b.bin,
                lower: b.lower,
                upper: b.upper,
                center: b.center,
                count: b.count,
                mean: b.mean,
            });
        }
        for f in &plot.fits {
            for term in 0..=f.order {
                fit_rows.push(FitRow {
                    outcome: o,
                    side: f.side,
                    order: f.order,
                    term,
                    coefficient: f.coefficients.as_ref().map(|c| c[term]),
                });
            }
        }
    }
    write_text(&out.join("rdplot_bins.csv"), &to_csv_string(&bin_rows)?)?;
    write_text(&out.join("rdplot_fits.csv"), &to_csv_string(&fit_rows)?)?;
    println!("rdplot: {} bins, {} coefficients", bin_rows.len(), fit_rows.len());
    Ok(())
}

fn dyads(cfg: &Config, out: &Path) -> Result<()> {
    let cities = studies::read_cities(&cfg.existing_path("dyads.cities")?)?;
    let adjacency = studies::province_adjacency(&borders(cfg)?);
    let limit: f64 = cfg.parsed_or("dyads.limit_km", DYAD_LIMIT_KM)?;
    let r = studies::dyad_differences(&cities, &adjacency, limit)?;
    for c in &r.excluded {
        eprintln!("dyads: city {c} has no qualifying neighbour, excluded");
    }
    write_text(&out.join("dyads.csv"), &to_csv_string(&r.dyads)?)?;
    write_text(&out.join("dyads_summary.csv"), &to_csv_string(&r.summary)?)?;
    println!("dyads: {} pairs", r.dyads.len());
    Ok(())
}

fn private(cfg: &Config, out: &Path) -> Result<()> {
    let prefectures = studies::read_prefectures(&cfg.existing_path("private.prefectures")?)?;
    let r = studies::percent_private_analysis(&prefectures, &borders(cfg)?)?;
    for b in &r.dropped {
        eprintln!("private: border {b} lacks a non-autonomous prefecture on a side, dropped");
    }
    write_text(&out.join("private.csv"), &to_csv_string(&r.pairs)?)?;
    write_text(&out.join("private_summary.csv"), &to_csv_string(&[r.fit])?)?;
    println!("private: {} borders", r.pairs.len());
    Ok(())
}

fn rankgdp(cfg: &Config, out: &Path) -> Result<()> {
    let provinces = studies::read_provinces(&cfg.existing_path("rankgdp.provinces")?)?;
    let fit = studies::rank_gdp_regression(&provinces)?;
    println!("rankgdp: slope {:.4}, r2 {:.4}", fit.slope, fit.r_squared);
    write_text(&out.join("rankgdp.csv"), &to_csv_string(&[fit])?)?;
    Ok(())
}
