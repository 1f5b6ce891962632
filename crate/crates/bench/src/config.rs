//! Experiment configuration: TOML schema, presets and validation.
//!
//! Node numbers in configuration files are one-based (`w1`, `w2`, ...);
//! module labels follow the `G{to}{from}` convention.

use std::fmt;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use neb_core::lti::RationalTf;
use neb_core::network::{NetworkModel, NoiseLevel, DEFAULT_STABILITY_HORIZON};
use neb_core::param::ModuleParametrization;
use serde::{Deserialize, Serialize};

pub const PRESETS: [(&str, &str); 3] = [
    ("closed_loop", include_str!("../presets/closed_loop.toml")),
    ("closed_loop_alt", include_str!("../presets/closed_loop_alt.toml")),
    ("example_network", include_str!("../presets/example_network.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[value(name = "two_stage")]
    TwoStage,
    Smpe,
    Neb,
    Nebx,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TwoStage => "two_stage",
            Method::Smpe => "smpe",
            Method::Neb => "neb",
            Method::Nebx => "nebx",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "two_stage" => Method::TwoStage,
            "smpe" => Method::Smpe,
            "neb" => Method::Neb,
            "nebx" => Method::Nebx,
            other => bail!("unknown method `{other}`"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Data length `N`.
    pub samples: usize,
    /// Sensitivity FIR length.
    pub n: usize,
    pub runs: usize,
    /// Master seed; run `k` uses `derive_seed(seed, k)`.
    pub seed: u64,
    pub methods: Vec<Method>,
    pub network: NetworkSpec,
    pub target: TargetSpec,
    #[serde(default)]
    pub options: MethodOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: usize,
    pub references: Vec<usize>,
    pub noise: NoiseSpec,
    pub modules: Vec<ModuleSpec>,
}

/// Per-node measurement noise. `ratios` are noise-to-signal power ratios
/// `var(e_k) / var(w_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Ratios(Vec<f64>),
    Variances(Vec<f64>),
}

/// `G = (direct + num[0] q⁻¹ + ...) / (1 + den[0] q⁻¹ + ...)` from node
/// `from` into node `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub to: usize,
    pub from: usize,
    #[serde(default)]
    pub direct: f64,
    pub num: Vec<f64>,
    #[serde(default)]
    pub den: Vec<f64>,
}

impl ModuleSpec {
    pub fn transfer_function(&self) -> RationalTf<f64> {
        RationalTf::with_direct(self.direct, self.num.clone(), self.den.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub node: usize,
    pub inputs: Vec<usize>,
    pub references: Vec<usize>,
    #[serde(default)]
    pub downstream: Option<usize>,
    /// Numerator and denominator orders of the estimated modules.
    #[serde(default = "default_order")]
    pub nb: usize,
    #[serde(default = "default_order")]
    pub na: usize,
}

fn default_order() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodOptions {
    pub tol: f64,
    pub neb_max_iter: usize,
    pub smpe_max_iter: usize,
    pub nebx_max_iter: usize,
    /// Retained Gibbs samples per NEBX iteration.
    pub m: usize,
    /// Gibbs burn-in.
    pub m0: usize,
}

impl Default for MethodOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            neb_max_iter: 300,
            smpe_max_iter: 5000,
            nebx_max_iter: 50,
            m: 500,
            m0: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .with_context(|| {
                let names: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                format!("unknown preset `{name}` (available: {})", names.join(", "))
            })?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("invalid experiment config")?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML config, or the `config` echo of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Echo {
                config: ExperimentConfig,
            }
            let echo: Echo = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            echo.config.validate()?;
            Ok(echo.config)
        } else {
            Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.runs >= 1, "runs must be at least 1");
        ensure!(self.samples >= 1 && self.n >= 1, "samples and n must be positive");
        ensure!(!self.methods.is_empty(), "methods must not be empty");
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        ensure!(methods.len() == self.methods.len(), "methods listed twice");
        ensure!(
            !self.methods.contains(&Method::Nebx) || self.target.downstream.is_some(),
            "nebx needs a downstream node in [target]"
        );
        let nodes = self.network.nodes;
        let t = &self.target;
        let in_range = |k: usize| (1..=nodes).contains(&k);
        ensure!(
            t.inputs.iter().chain(&t.references).chain(&self.network.references).chain(t.downstream.iter()).all(|&k| in_range(k))
                && in_range(t.node),
            "node index outside 1..={nodes}"
        );
        ensure!(!t.inputs.is_empty() && !t.references.is_empty(), "target needs inputs and references");
        for &i in &t.inputs {
            ensure!(self.module(t.node, i).is_some(), "no module G{}{} for target input w{i}", t.node, i);
        }
        for m in &self.network.modules {
            let tf = m.transfer_function();
            ensure!(tf.is_stable(), "module G{}{} is unstable (pole radius {})", m.to, m.from, tf.pole_radius());
        }
        if let Some(x) = t.downstream {
            let into: Vec<_> = self.network.modules.iter().filter(|m| m.to == x).collect();
            ensure!(
                into.len() == 1 && into[0].from == t.node,
                "downstream w{x} must be driven by the target node only"
            );
        }
        let network = self.network_model()?;
        network
            .check_stable(DEFAULT_STABILITY_HORIZON)
            .context("network is not stable")?;
        Ok(())
    }

    pub fn module(&self, to: usize, from: usize) -> Option<&ModuleSpec> {
        self.network.modules.iter().find(|m| m.to == to && m.from == from)
    }

    pub fn network_model(&self) -> Result<NetworkModel<f64>> {
        let noise = match &self.network.noise {
            NoiseSpec::Ratios(v) => v.iter().map(|&x| NoiseLevel::Ratio(x)).collect(),
            NoiseSpec::Variances(v) => v.iter().map(|&x| NoiseLevel::Variance(x)).collect(),
        };
        let modules = self
            .network
            .modules
            .iter()
            .map(|m| ((m.to - 1, m.from - 1), m.transfer_function()));
        let refs = self.network.references.iter().map(|&l| l - 1).collect();
        Ok(NetworkModel::new(self.network.nodes, modules, refs, noise)?)
    }

    pub fn parametrization(&self) -> ModuleParametrization<f64> {
        ModuleParametrization::Rational {
            nb: self.target.nb,
            na: self.target.na,
        }
    }

    /// `G{node}{input}` per target input.
    pub fn module_labels(&self) -> Vec<String> {
        self.target.inputs.iter().map(|i| format!("G{}{}", self.target.node, i)).collect()
    }

    /// `b1..b_nb, a1..a_na`.
    pub fn param_names(&self) -> Vec<String> {
        (1..=self.target.nb)
            .map(|k| format!("b{k}"))
            .chain((1..=self.target.na).map(|k| format!("a{k}")))
            .collect()
    }

    /// Lag-zero impulse responses of the true target modules, length `N`.
    pub fn true_responses(&self) -> Result<Vec<Vec<f64>>> {
        self.target
            .inputs
            .iter()
            .map(|&i| {
                let m = self.module(self.target.node, i).expect("validated");
                Ok(m.transfer_function().impulse_response_lag0(self.samples)?.as_slice().to_vec())
            })
            .collect()
    }

    /// True `[b, a]` per target module when its orders match the model.
    pub fn true_thetas(&self) -> Vec<Option<Vec<f64>>> {
        self.target
            .inputs
            .iter()
            .map(|&i| {
                let m = self.module(self.target.node, i).expect("validated");
                (m.direct == 0.0 && m.num.len() == self.target.nb && m.den.len() == self.target.na)
                    .then(|| m.num.iter().chain(&m.den).copied().collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load_and_validate() {
        for (name, _) in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            assert_eq!(c.name, name);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn closed_loop_preset_encodes_controller() {
        let c = ExperimentConfig::preset("closed_loop").unwrap();
        let ctrl = c.module(1, 2).unwrap();
        assert_eq!((ctrl.direct, ctrl.num.as_slice(), ctrl.den.as_slice()), (0.8, &[0.4, -0.5][..], &[0.5, 0.2][..]));
        assert_eq!(c.true_thetas(), vec![Some(vec![0.2, 0.3, 0.4, 0.5])]);
        let alt = ExperimentConfig::preset("closed_loop_alt").unwrap();
        assert_eq!(alt.true_thetas(), vec![Some(vec![0.4, 0.5, -0.4, 0.3])]);
    }

    #[test]
    fn example_network_targets() {
        let c = ExperimentConfig::preset("example_network").unwrap();
        assert_eq!(c.module_labels(), ["G31", "G32"]);
        assert_eq!(
            c.true_thetas(),
            vec![Some(vec![0.2, 0.3, 0.4, 0.5]), Some(vec![0.4, 0.5, 0.5, 0.15])]
        );
        assert_eq!(c.param_names(), ["b1", "b2", "a1", "a2"]);
    }

    #[test]
    fn unstable_module_rejected() {
        let text = include_str!("../presets/closed_loop.toml").replace("den = [0.4, 0.5]", "den = [0.4, 1.5]");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(format!("{err:#}").contains("unstable"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}\nbogus = 1\n", include_str!("../presets/closed_loop.toml"));
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn nebx_requires_downstream() {
        let text = include_str!("../presets/closed_loop.toml").replace(r#""neb"]"#, r#""neb", "nebx"]"#);
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
