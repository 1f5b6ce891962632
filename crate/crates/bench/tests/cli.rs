use std::process::Command;

use neb_bench::config::{ExperimentConfig, Method, NoiseSpec};
use neb_bench::emit::{read_csv, read_table};
use neb_bench::run::ResultTable;
use neb_bench::summary::SummaryRow;
use neb_bench::{emit, run_monte_carlo, summarize, Format, Manifest};

fn small_closed_loop(methods: Vec<Method>, runs: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("closed_loop").unwrap();
    c.runs = runs;
    c.methods = methods;
    c.options.neb_max_iter = 20;
    c
}

#[test]
fn noise_free_two_stage_is_exact() {
    let mut c = small_closed_loop(vec![Method::TwoStage], 1);
    c.network.noise = NoiseSpec::Variances(vec![0.0, 0.0]);
    let table = run_monte_carlo(&c).unwrap();
    assert_eq!(table.fits.len(), 1);
    assert!((table.fits[0].fit - 1.0).abs() < 1e-6, "{:?}", table.fits[0]);
    assert_eq!(table.params.len(), 4);
}

#[test]
fn sweep_is_deterministic() {
    let c = small_closed_loop(vec![Method::TwoStage, Method::Smpe, Method::Neb], 3);
    let a = run_monte_carlo(&c).unwrap();
    let b = run_monte_carlo(&c).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    let runs: Vec<usize> = a.fits.iter().map(|r| r.run_id).collect();
    assert!(runs.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(a.fits.len(), 9);
}

#[test]
fn emit_round_trips() {
    let c = small_closed_loop(vec![Method::TwoStage, Method::Smpe], 2);
    let table = run_monte_carlo(&c).unwrap();
    let stats = summarize(&table, c.samples);
    let dir = tempfile::tempdir().unwrap();
    emit(&c, &table, &stats, Format::Csv, dir.path()).unwrap();
    assert_eq!(read_table(dir.path()).unwrap(), table);
    let summary: Vec<SummaryRow> = read_csv(&dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, stats.rows);

    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.master_seed, c.seed);
    assert_eq!(manifest.run_seeds.len(), 2);
    assert_eq!(ExperimentConfig::load(&dir.path().join("manifest.json")).unwrap(), c);
}

#[test]
fn empty_table_has_headers() {
    let c = small_closed_loop(vec![Method::TwoStage], 1);
    let table = ResultTable::default();
    let dir = tempfile::tempdir().unwrap();
    emit(&c, &table, &summarize(&table, 200), Format::Csv, dir.path()).unwrap();
    let fits = std::fs::read_to_string(dir.path().join("fits.csv")).unwrap();
    assert_eq!(fits, "run_id,method,module,fit,iterations,converged,wall_ms\n");
    let params = std::fs::read_to_string(dir.path().join("params.csv")).unwrap();
    assert_eq!(params, "run_id,method,module,param_name,value\n");
    assert_eq!(read_table(dir.path()).unwrap(), table);
}

#[test]
fn emit_reports_path_on_io_error() {
    let c = small_closed_loop(vec![Method::TwoStage], 1);
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let err = emit(&c, &ResultTable::default(), &Default::default(), Format::Csv, &blocker).unwrap_err();
    assert!(format!("{err:#}").contains("file"));
}

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neb-bench"))
}

#[test]
fn cli_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bench()
        .args(["--preset", "closed_loop", "--runs", "2", "--seed", "9", "--methods", "two_stage,smpe", "--format", "csv", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let manifest = ExperimentConfig::load(&out.join("manifest.json")).unwrap();
    assert_eq!((manifest.runs, manifest.seed), (2, 9));
    assert_eq!(manifest.methods, [Method::TwoStage, Method::Smpe]);
    let table = read_table(&out).unwrap();
    assert_eq!(table.fits.len(), 4);

    // Rerunning from the manifest reproduces every row except timing.
    let again = dir.path().join("again");
    let status = bench().arg("--config").arg(out.join("manifest.json")).arg("--out").arg(&again).output().unwrap();
    assert!(status.status.success());
    assert_eq!(read_table(&again).unwrap().without_timing(), table.without_timing());
}

#[test]
fn cli_json_format_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let status = bench()
        .args(["--preset", "closed_loop", "--runs", "1", "--methods", "two_stage", "--format", "json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success());
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["fits"].as_array().unwrap().len(), 1);

    let bad = bench().args(["--preset", "missing"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown preset"));
    assert!(!bench().output().unwrap().status.success());
}

#[test]
fn custom_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let text = include_str!("../presets/closed_loop.toml")
        .replace("runs = 100", "runs = 1")
        .replace(r#"methods = ["two_stage", "smpe", "neb"]"#, r#"methods = ["two_stage"]"#);
    std::fs::write(&path, text).unwrap();
    let out = dir.path().join("o");
    let status = bench().arg("--config").arg(&path).arg("--out").arg(&out).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert_eq!(read_table(&out).unwrap().fits.len(), 1);
}
