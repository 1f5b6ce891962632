//! Artifact output: row tables, summaries and the run manifest.
//!
//! CSV layout in the output directory:
//!
//! - `params.csv`: `run_id,method,module,param_name,value`
//! - `fits.csv`: `run_id,method,module,fit,iterations,converged,wall_ms`
//! - `summary.csv`: `method,module,subset,statistic,value`
//! - `manifest.json`: config echo, master seed, per-run seeds, versions
//!
//! With the JSON format the three tables go to `results.json` instead.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::run::{run_seed, FitRow, ParamRow, ResultTable};
use crate::summary::{SummaryRow, SummaryStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub run_seeds: Vec<u64>,
    pub format: Format,
    pub files: Vec<String>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub neb_bench: String,
    pub neb_core: String,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, format: Format, files: Vec<String>) -> Self {
        Self {
            config: config.clone(),
            master_seed: config.seed,
            run_seeds: (0..config.runs).map(|k| run_seed(config, k)).collect(),
            format,
            files,
            versions: Versions {
                neb_bench: env!("CARGO_PKG_VERSION").into(),
                neb_core: neb_core::VERSION.into(),
            },
        }
    }
}

#[derive(Serialize)]
struct JsonResults<'a> {
    params: &'a [ParamRow],
    fits: &'a [FitRow],
    summary: &'a [SummaryRow],
}

/// Writes the artifacts into directory `out` (created if missing) and
/// returns the written paths, manifest last.
pub fn emit(config: &ExperimentConfig, table: &ResultTable, stats: &SummaryStats, format: Format, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            written.push(write_csv(&out.join("params.csv"), &table.params)?);
            written.push(write_csv(&out.join("fits.csv"), &table.fits)?);
            written.push(write_csv(&out.join("summary.csv"), &stats.rows)?);
        }
        Format::Json => {
            let path = out.join("results.json");
            write_json(
                &path,
                &JsonResults {
                    params: &table.params,
                    fits: &table.fits,
                    summary: &stats.rows,
                },
            )?;
            written.push(path);
        }
    }
    let files = written
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let manifest = out.join("manifest.json");
    write_json(&manifest, &Manifest::new(config, format, files))?;
    written.push(manifest);
    Ok(written)
}

/// Row types with a fixed CSV column order.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for ParamRow {
    const HEADER: &'static [&'static str] = &["run_id", "method", "module", "param_name", "value"];
}

impl CsvRow for FitRow {
    const HEADER: &'static [&'static str] = &["run_id", "method", "module", "fit", "iterations", "converged", "wall_ms"];
}

impl CsvRow for SummaryRow {
    const HEADER: &'static [&'static str] = &["method", "module", "subset", "statistic", "value"];
}

/// Writes rows with a header line, also when `rows` is empty.
pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let context = || format!("writing {}", path.display());
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    w.write_record(T::HEADER).with_context(context)?;
    for r in rows {
        w.serialize(r).with_context(context)?;
    }
    w.flush().with_context(context)?;
    Ok(path.to_path_buf())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Reads `params.csv` and `fits.csv` back from an output directory.
pub fn read_table(out: &Path) -> Result<ResultTable> {
    Ok(ResultTable {
        params: read_csv(&out.join("params.csv"))?,
        fits: read_csv(&out.join("fits.csv"))?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).with_context(|| format!("writing {}", path.display()))
}
