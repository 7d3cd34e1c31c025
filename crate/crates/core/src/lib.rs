//! Model predictive path-following control (MPFC) for a differential-drive
//! robot, and its approximation by a small int8-quantized neural network.
//!
//! The crate is organised bottom-up:
//!
//! - [`path`]: the ellipse reference path, flatness-based feedforward inputs
//!   and the tangential/normal error decomposition.
//! - [`dynamics`]: the augmented unicycle model and its RK4 discretization.
//! - [`ocp`]: the discrete optimal control problem, its adjoint gradient and
//!   a projected quasi-Newton solver; [`ocp::MpfcController`] is the receding
//!   horizon feedback.
//! - [`dataset`]: corridor sampling around the path and MPFC labeling.
//! - [`mlp`]: float network, training with Adam, model files.
//! - [`quant`]: post-training int8 quantization and the integer kernel.
//! - [`controllers`]: the four controller variants behind one trait.
//! - [`sim`]: closed-loop simulation, metrics, timing and CSV export.

pub mod config;
pub mod controllers;
pub mod dataset;
pub mod dynamics;
mod error;
pub mod mlp;
pub mod ocp;
pub mod path;
pub mod quant;
pub mod sim;

pub use config::PipelineConfig;
pub use controllers::{Controller, ControllerKind, PGains};
pub use dataset::{CorridorConfig, NormStats, TrainingSet};
pub use dynamics::{ExtendedInput, ExtendedState};
pub use error::{Error, Result};
pub use mlp::{MlpArchitecture, MlpParams, TrainConfig};
pub use ocp::{InputBox, InputSequence, MpfcController, OcpConfig};
pub use path::{Ellipse, PathError, PathParametrization, PathPoint};
pub use quant::{QuantParams, QuantizedMlp};
pub use sim::{Metrics, SimConfig, SimTrace};
