use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Parser;
use neb_bench::config::{ExperimentConfig, Method, PRESETS};
use neb_bench::summary::Subset;
use neb_bench::{emit, run_monte_carlo, summarize, Format};

/// Monte Carlo comparison of module estimators on simulated networks.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// Experiment config (TOML), or a `manifest.json` from an earlier run.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment: closed_loop, closed_loop_alt, example_network.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of Monte Carlo runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the method list.
    #[arg(long, value_enum, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => {
            let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
            bail!("pass --config FILE or --preset NAME ({})", names.join(", "));
        }
    };
    if let Some(runs) = cli.runs {
        config.runs = runs;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(methods) = cli.methods {
        config.methods = methods;
    }
    config.validate()?;

    eprintln!(
        "{}: {} runs, N = {}, n = {}, methods {}",
        config.name,
        config.runs,
        config.samples,
        config.n,
        config.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")
    );
    let table = run_monte_carlo(&config)?;
    let stats = summarize(&table, config.samples);
    let written = emit(&config, &table, &stats, cli.format, &cli.out)?;

    println!("{:<10} {:<6} {:>9} {:>9} {:>9}  negative", "method", "module", "fit_mean", "fit_med", "runs");
    for method in &config.methods {
        for module in config.module_labels() {
            let get = |s: &str| stats.get(*method, &module, Subset::All, s).unwrap_or(f64::NAN);
            println!(
                "{:<10} {:<6} {:>9.4} {:>9.4} {:>9}  {}",
                method.as_str(),
                module,
                get("fit_mean"),
                get("fit_median"),
                get("runs"),
                get("negative_fit_runs")
            );
        }
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
