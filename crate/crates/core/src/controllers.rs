//! Runtime controllers behind one interface.
//!
//! Every variant maps the augmented state `z` to a command `w` inside the
//! input box. Only MPFC keeps memory between calls (its warm start).

use std::fmt;
use std::str::FromStr;

use crate::dynamics::{ExtendedInput, ExtendedState};
use crate::mlp::MlpParams;
use crate::ocp::{InputBox, MpfcController};
use crate::path::{error_components, PathParametrization};
use crate::quant::QuantizedMlp;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Mpfc,
    Dnn,
    Qdnn,
    QdnnP,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [Self::Mpfc, Self::Dnn, Self::Qdnn, Self::QdnnP];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mpfc => "mpfc",
            Self::Dnn => "dnn",
            Self::Qdnn => "qdnn",
            Self::QdnnP => "qdnn-p",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown controller {s:?}, expected mpfc, dnn, qdnn or qdnn-p")))
    }
}

pub trait Controller {
    fn kind(&self) -> ControllerKind;

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput;

    /// Forget internal memory. Stateless controllers do nothing.
    fn reset(&mut self) {}
}

impl<P: PathParametrization> Controller for MpfcController<P> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Mpfc
    }

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        MpfcController::step(self, z)
    }

    fn reset(&mut self) {
        MpfcController::reset(self)
    }
}

/// Proportional gains of the error compensator.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PGains {
    /// Tangential error to forward speed, (m/s)/m.
    pub p_t: f64,
    /// Normal error to yaw rate, (rad/s)/m.
    pub p_n: f64,
}

impl PGains {
    pub fn new(p_t: f64, p_n: f64) -> Result<Self> {
        if !(p_t.is_finite() && p_n.is_finite()) {
            return Err(Error::InvalidConfig(format!("gains must be finite, got ({p_t}, {p_n})")));
        }
        Ok(Self { p_t, p_n })
    }

    /// The tuning grid `{±0.1, ±0.5, ±1, ±2, ±5}²`.
    pub fn search_grid() -> Vec<PGains> {
        let levels = [0.1, 0.5, 1.0, 2.0, 5.0];
        let signed: Vec<f64> = levels.iter().flat_map(|&g| [-g, g]).collect();
        signed
            .iter()
            .flat_map(|&p_t| signed.iter().map(move |&p_n| PGains { p_t, p_n }))
            .collect()
    }
}

impl fmt::Display for PGains {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.p_t, self.p_n)
    }
}

impl FromStr for PGains {
    type Err = Error;

    /// Parses `P_t,P_n`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("gains must be `P_t,P_n`, got {s:?}"));
        let (a, b) = s.split_once(',').ok_or_else(bad)?;
        let p_t = a.trim().parse().map_err(|_| bad())?;
        let p_n = b.trim().parse().map_err(|_| bad())?;
        Self::new(p_t, p_n)
    }
}

/// `w^P = (P_t e_t, P_n e_n, 0)`.
pub fn p_compensation<P: PathParametrization + ?Sized>(path: &P, z: &ExtendedState, gains: PGains) -> ExtendedInput {
    let e = error_components(path, z.position(), z.theta);
    ExtendedInput::new(gains.p_t * e.e_t, gains.p_n * e.e_n, 0.0)
}

fn network_command(stats: &crate::dataset::NormStats, output: &[f64], input_box: &InputBox) -> ExtendedInput {
    input_box.clamp(&stats.denormalize_input(&[output[0], output[1], output[2]]))
}

/// Float network feedback.
#[derive(Debug, Clone)]
pub struct DnnController {
    pub model: MlpParams,
    pub input_box: InputBox,
}

impl DnnController {
    pub fn new(model: MlpParams, input_box: InputBox) -> Result<Self> {
        model.validate()?;
        model.arch.validate_controller()?;
        Ok(Self { model, input_box })
    }
}

impl Controller for DnnController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Dnn
    }

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        let x = self.model.stats.normalize_state(z);
        network_command(&self.model.stats, &self.model.forward(&x), &self.input_box)
    }
}

/// Quantized network feedback: normalize, quantize, integer forward,
/// dequantize, denormalize, clamp.
#[derive(Debug, Clone)]
pub struct QdnnController {
    pub model: QuantizedMlp,
    pub input_box: InputBox,
}

impl QdnnController {
    pub fn new(model: QuantizedMlp, input_box: InputBox) -> Result<Self> {
        model.validate()?;
        model.arch.validate_controller()?;
        Ok(Self { model, input_box })
    }

    /// Unclamped network command.
    pub fn raw(&self, z: &ExtendedState) -> ExtendedInput {
        let x = self.model.stats.normalize_state(z);
        self.model.stats.denormalize_input(&<[f64; 3]>::try_from(self.model.forward(&x)).expect("3 outputs"))
    }
}

impl Controller for QdnnController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Qdnn
    }

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        self.input_box.clamp(&self.raw(z))
    }
}

/// Quantized network plus proportional error compensation; the sum is
/// clamped to the box.
#[derive(Debug, Clone)]
pub struct QdnnPController<P> {
    pub qdnn: QdnnController,
    pub path: P,
    pub gains: PGains,
}

impl<P: PathParametrization> QdnnPController<P> {
    pub fn new(model: QuantizedMlp, input_box: InputBox, path: P, gains: PGains) -> Result<Self> {
        Ok(Self {
            qdnn: QdnnController::new(model, input_box)?,
            path,
            gains,
        })
    }
}

impl<P: PathParametrization> Controller for QdnnPController<P> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::QdnnP
    }

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        let w = self.qdnn.raw(z) + p_compensation(&self.path, z, self.gains);
        self.qdnn.input_box.clamp(&w)
    }
}

/// Open-loop flatness feedforward at constant path speed, sampled at the
/// step midpoint and not clamped. A model-exact reference for tests and
/// sanity runs.
#[derive(Debug, Clone)]
pub struct FeedforwardController<P> {
    pub path: P,
    pub v: f64,
    pub dt: f64,
}

impl<P: PathParametrization> Controller for FeedforwardController<P> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Mpfc
    }

    fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        let (s, omega) = self.path.reference_inputs(z.theta + 0.5 * self.v * self.dt, self.v);
        ExtendedInput::new(s, omega, self.v)
    }
}
