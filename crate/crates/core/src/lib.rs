//! Empirical-Bayes identification of modules embedded in dynamic networks.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod baselines;
pub mod error;
pub mod kernel;
pub mod lti;
pub mod neb;
pub mod nebx;
pub mod network;
pub mod optim;
pub mod param;
pub mod posterior;
pub mod rng;
pub mod scalar;

pub use error::{NebError, Result};
pub use scalar::Scalar;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type RationalTf = lti::RationalTf<f64>;
pub type ImpulseResponse = lti::ImpulseResponse<f64>;
pub type KernelMatrix = kernel::KernelMatrix<f64>;
pub type NetworkModel = network::NetworkModel<f64>;
pub type Dataset = network::Dataset<f64>;
pub type NoiseLevel = network::NoiseLevel<f64>;
pub type SensitivitySet = network::SensitivitySet<f64>;
pub type ScaledKernel = kernel::ScaledKernel<f64>;
pub type ModuleParametrization = param::ModuleParametrization<f64>;
pub type HyperParameterVector = posterior::HyperParameterVector<f64>;
pub type GaussianPosterior = posterior::GaussianPosterior<f64>;
pub type NetworkData = neb::NetworkData<f64>;
pub type NebStructure = neb::NebStructure<f64>;
pub type NebEstimate = neb::NebEstimate<f64>;
pub type NebxEstimate = nebx::NebxEstimate<f64>;
pub type NebxModel<'a> = nebx::NebxModel<'a, f64>;
pub type GibbsStats = nebx::GibbsStats<f64>;
pub type TwoStageEstimate = baselines::TwoStageEstimate<f64>;
pub type SmpeState = baselines::SmpeState<f64>;
pub type SmpeResult = baselines::SmpeResult<f64>;
