//! Structured prediction energy networks trained end to end through
//! unrolled gradient-based inference.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide a
//! small reverse-mode engine, [`energy`] defines the energy functions,
//! [`minimizer`] unrolls gradient-based minimization of an energy, and
//! [`trainer`] learns energy parameters by differentiating through that
//! unrolled run. [`tasks`] holds the synthetic benchmarks and [`config`]
//! the experiment configuration used by the command-line tool.

pub mod autodiff;
pub mod config;
mod conv;
pub mod energy;
pub mod error;
pub mod minimizer;
pub mod params;
pub mod spnt;
pub mod tasks;
pub mod tensor;
pub mod tiny;
pub mod trainer;

/// Random number generator used everywhere a seed is accepted.
pub type SpenRng = rand_chacha::ChaCha8Rng;

pub use config::{parse_config, ExperimentConfig};
pub use energy::{EnergyModel, EnergySpec, Space};
pub use error::{Result, SpenError};
pub use minimizer::{Rule, Spen, Trajectory, UnrollConfig};
pub use params::{ParamGrads, ParamSet};
pub use tensor::Tensor;
pub use trainer::{
    backprop_unroll, train, BackpropConfig, Example, IterateLoss, LossConfig, LossWeights,
    MemoryMode, TrainConfig,
};
