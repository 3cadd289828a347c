//! Imitation learning on multimodal demonstrations.
//!
//! Four policy heads share one observation trunk: an independent
//! per-dimension head, an autoregressive head trained with teacher forcing,
//! a conditional GAN, and a variational head with a categorical latent.
//! Seeded simulators and scripted stochastic experts provide demonstrations;
//! [`train`] fits the heads and measures how well each reproduces the
//! expert's joint action distribution.

pub mod autodiff;
pub mod config;
pub mod envsim;
mod error;
pub mod expert;
pub mod heads;
pub mod train;

pub use autodiff::{RngStream, Tensor};
pub use config::{parse_config, Config, ConfigValue};
pub use envsim::{Action, ActionSpace, EnvConfig, EnvState, Environment, Observation, StepOutcome, Task};
pub use error::{Error, Result};
pub use expert::{Dataset, Demonstration, ExpertConfig};
pub use heads::{HeadKind, LossReport, PolicyModel};
pub use train::{EvalReport, ProbeSpec, TrainConfig, TrainingLog};
