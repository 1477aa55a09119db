//! Discrete-conditioned continuous autoregressive generation.
//!
//! A causal prior generates discrete codebook tokens; a masked bidirectional
//! transformer conditioned on those tokens produces a latent per masked
//! position, and a small diffusion head turns each latent into a continuous
//! token. Everything trains and evaluates on synthetic mixtures of disjoint
//! Gaussian (or annular) modes.
//!
//! The numeric core is generic over [`Real`] (`f32` / `f64`); the aliases
//! below fix the `f64` instantiation used for training and evaluation.

pub mod backbone;
pub mod diffhead;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod prior;
pub mod synthdata;
pub mod tokenizers;

pub use numerics::{Graph, NumericsError, Real, Rng, Tensor, Var};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type PriorModel64 = prior::PriorModel<f64>;
pub type DisConModel64 = backbone::DisConModel<f64>;
pub type DiffHead64 = diffhead::DiffHead<f64>;
pub type NoiseSchedule64 = diffhead::NoiseSchedule<f64>;
pub type GaussianMoments64 = eval::GaussianMoments<f64>;
pub type Codebook64 = tokenizers::Codebook<f64>;
pub type Normalizer64 = tokenizers::Normalizer<f64>;
pub type Tokenizers64 = tokenizers::Tokenizers<f64>;
