//! Modular Bayesian inverse uncertainty quantification: GP emulators for a
//! forward code and its model discrepancy, adaptive Metropolis-Hastings
//! calibration, sensitivity analysis and forward propagation.

pub mod calibration;
pub mod domain;
pub mod forward_uq;
pub mod gp;
pub mod linalg;
pub mod mcmc;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod sensitivity;
pub mod synthbench;

pub type MatrixF64 = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type DesignF64 = sampler::Design<f64>;
pub type DesignF32 = sampler::Design<f32>;
pub type GpModelF64 = gp::GpModel<f64>;
pub type GpModelF32 = gp::GpModel<f32>;
pub type PosteriorChainF64 = mcmc::PosteriorChain<f64>;
pub type PosteriorChainF32 = mcmc::PosteriorChain<f32>;
pub type SobolResultF64 = sensitivity::SobolResult<f64>;
pub type SobolResultF32 = sensitivity::SobolResult<f32>;
