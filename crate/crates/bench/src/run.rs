//! Monte Carlo sweep: one simulated dataset per run, every requested method
//! on the same data.

use std::time::Instant;

use anyhow::Result;
use neb_core::baselines::{fit_metric, smpe, two_stage, SmpeOptions, SmpeState, TwoStageConfig, TwoStageEstimate};
use neb_core::neb::{neb_identify, NebEstimate, NebOptions, NebStructure, NetworkData};
use neb_core::nebx::{nebx_identify_after, NebxOptions};
use neb_core::network::simulate;
use neb_core::rng::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};

/// `run_id,method,module,param_name,value`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub run_id: usize,
    pub method: Method,
    pub module: String,
    pub param_name: String,
    pub value: f64,
}

/// `run_id,method,module,fit,iterations,converged,wall_ms`. A failed
/// method leaves `fit` NaN with `converged = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub run_id: usize,
    pub method: Method,
    pub module: String,
    pub fit: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub params: Vec<ParamRow>,
    pub fits: Vec<FitRow>,
}

impl ResultTable {
    pub fn sort(&mut self) {
        self.params.sort_by(|a, b| (a.run_id, a.method, &a.module).cmp(&(b.run_id, b.method, &b.module)));
        self.fits.sort_by(|a, b| (a.run_id, a.method, &a.module).cmp(&(b.run_id, b.method, &b.module)));
    }

    /// Copy with every wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.fits.iter_mut().for_each(|r| r.wall_ms = 0.0);
        out
    }
}

pub fn run_seed(config: &ExperimentConfig, run: usize) -> u64 {
    derive_seed(config.seed, run as u64)
}

/// Runs every Monte Carlo run on the rayon pool; rows come back sorted by
/// run, method and module.
pub fn run_monte_carlo(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let per_run: Vec<ResultTable> = (0..config.runs)
        .into_par_iter()
        .map(|k| run_once(config, k))
        .collect::<Result<_>>()?;
    let mut table = ResultTable::default();
    for t in per_run {
        table.params.extend(t.params);
        table.fits.extend(t.fits);
    }
    table.sort();
    Ok(table)
}

struct Outcome {
    thetas: Vec<Vec<f64>>,
    iterations: usize,
    converged: bool,
}

/// One run. Simulation errors abort the sweep; estimator errors become
/// non-converged rows.
pub fn run_once(config: &ExperimentConfig, run: usize) -> Result<ResultTable> {
    let seed = run_seed(config, run);
    let net = config.network_model()?;
    let ds = simulate(&net, config.samples, seed)?;
    let t = &config.target;
    let data = NetworkData::from_dataset(
        &ds,
        t.node - 1,
        &t.inputs.iter().map(|i| i - 1).collect::<Vec<_>>(),
        &t.references.iter().map(|l| l - 1).collect::<Vec<_>>(),
        t.downstream.map(|x| x - 1),
    )?;
    let p = t.inputs.len();
    let structure = NebStructure::new(config.n, vec![config.parametrization(); p])?;
    let opts = &config.options;
    let truth = config.true_responses()?;
    let labels = config.module_labels();
    let names = config.param_names();

    // Shared by SMPE (initialization) and NEBX (initialization).
    let mut ts_cache: Option<neb_core::Result<TwoStageEstimate<f64>>> = None;
    let mut neb_cache: Option<neb_core::Result<NebEstimate<f64>>> = None;
    let mut two_stage_est = || {
        ts_cache
            .get_or_insert_with(|| {
                two_stage(
                    &data,
                    &TwoStageConfig {
                        n: config.n,
                        modules: structure.modules.clone(),
                    },
                    seed,
                )
            })
            .clone()
    };
    let neb_options = NebOptions {
        tol: opts.tol,
        max_iter: opts.neb_max_iter,
        seed,
    };

    let mut table = ResultTable::default();
    let mut methods = config.methods.clone();
    methods.sort();
    for method in methods {
        let start = Instant::now();
        let outcome: neb_core::Result<Outcome> = match method {
            Method::TwoStage => two_stage_est().map(|e| Outcome {
                thetas: e.thetas,
                iterations: 0,
                converged: true,
            }),
            Method::Smpe => two_stage_est().and_then(|ts| {
                let res = smpe(
                    &data,
                    &structure.modules,
                    config.n,
                    &SmpeState::from_two_stage(&ts),
                    &SmpeOptions {
                        tol: opts.tol,
                        max_iter: opts.smpe_max_iter,
                    },
                )?;
                Ok(Outcome {
                    thetas: res.state.thetas,
                    iterations: res.iterations,
                    converged: res.converged,
                })
            }),
            Method::Neb => {
                let est = neb_identify(&data, &structure, &neb_options);
                let out = est.as_ref().map(|e| Outcome {
                    thetas: e.eta.thetas.clone(),
                    iterations: e.iterations,
                    converged: e.converged,
                });
                let out = out.map_err(|e| e.clone());
                neb_cache = Some(est);
                out
            }
            Method::Nebx => {
                let neb = neb_cache
                    .take()
                    .unwrap_or_else(|| neb_identify(&data, &structure, &neb_options));
                // NEB time is not charged to NEBX when NEB ran first.
                neb.and_then(|neb| {
                    let est = nebx_identify_after(
                        &data,
                        &structure,
                        neb,
                        &NebxOptions {
                            tol: opts.tol,
                            max_iter: opts.nebx_max_iter,
                            m: opts.m,
                            m0: opts.m0,
                            seed,
                            neb: neb_options,
                            track_objective: false,
                        },
                    )?;
                    Ok(Outcome {
                        thetas: est.estimate.eta.thetas,
                        iterations: est.estimate.iterations,
                        converged: est.estimate.converged,
                    })
                })
            }
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        match outcome {
            Ok(o) => {
                for (i, label) in labels.iter().enumerate() {
                    let g_hat = structure.modules[i].impulse(&o.thetas[i], config.samples);
                    let fit = g_hat
                        .and_then(|g| fit_metric(&truth[i], &g))
                        .unwrap_or(f64::NAN);
                    table.fits.push(FitRow {
                        run_id: run,
                        method,
                        module: label.clone(),
                        fit,
                        iterations: o.iterations,
                        converged: o.converged,
                        wall_ms,
                    });
                    for (name, &value) in names.iter().zip(&o.thetas[i]) {
                        table.params.push(ParamRow {
                            run_id: run,
                            method,
                            module: label.clone(),
                            param_name: name.clone(),
                            value,
                        });
                    }
                }
            }
            Err(e) => {
                eprintln!("run {run}: {method} failed: {e}");
                for label in &labels {
                    table.fits.push(FitRow {
                        run_id: run,
                        method,
                        module: label.clone(),
                        fit: f64::NAN,
                        iterations: 0,
                        converged: false,
                        wall_ms,
                    });
                }
            }
        }
    }
    table.sort();
    Ok(table)
}
