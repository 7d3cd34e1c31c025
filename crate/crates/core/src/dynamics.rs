//! Augmented unicycle model `ż = f(z, w)` and its RK4 discretization.
//!
//! The same integrator serves as the OCP prediction model and as the
//! simulation plant.

use crate::{Error, Result};

/// Robot pose plus the path parameter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtendedState {
    pub qx: f64,
    pub qy: f64,
    pub phi: f64,
    pub theta: f64,
}

impl ExtendedState {
    pub const fn new(qx: f64, qy: f64, phi: f64, theta: f64) -> Self {
        Self { qx, qy, phi, theta }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.qx, self.qy, self.phi, self.theta]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.qx, self.qy]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// Forward speed `s` (m/s), yaw rate `ω` (rad/s) and path speed `v` (1/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtendedInput {
    pub s: f64,
    pub omega: f64,
    pub v: f64,
}

impl ExtendedInput {
    pub const fn new(s: f64, omega: f64, v: f64) -> Self {
        Self { s, omega, v }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.omega, self.v]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

impl std::ops::Add for ExtendedInput {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.s + rhs.s, self.omega + rhs.omega, self.v + rhs.v)
    }
}

/// `ż = (s cos φ, s sin φ, ω, v)`.
pub fn dynamics(z: &ExtendedState, w: &ExtendedInput) -> [f64; 4] {
    let (sin, cos) = z.phi.sin_cos();
    [w.s * cos, w.s * sin, w.omega, w.v]
}

/// One classical Runge–Kutta step with `w` held constant over `dt`.
pub fn rk4_step(z: &ExtendedState, w: &ExtendedInput, dt: f64) -> ExtendedState {
    let x0 = z.to_array();
    let at = |k: &[f64; 4], h: f64| {
        ExtendedState::from_array([x0[0] + h * k[0], x0[1] + h * k[1], x0[2] + h * k[2], x0[3] + h * k[3]])
    };
    let k1 = dynamics(z, w);
    let k2 = dynamics(&at(&k1, 0.5 * dt), w);
    let k3 = dynamics(&at(&k2, 0.5 * dt), w);
    let k4 = dynamics(&at(&k3, dt), w);
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    ExtendedState::from_array(out)
}

/// Partial derivatives of [`rk4_step`] with respect to state and input.
///
/// Because `φ̇ = ω` is constant over a step, the RK4 stages evaluate the
/// heading at `φ`, `φ + ω h/2` (twice) and `φ + ω h`, which gives
/// `q⁺ = q + (h s / 6)(u(φ) + 4 u(φ + ωh/2) + u(φ + ωh))` with
/// `u = (cos, sin)`. Only the `φ` column of the state Jacobian and the
/// first three input columns are non-trivial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepJacobian {
    /// `∂(q_x⁺, q_y⁺)/∂φ`; the rest of `∂z⁺/∂z` is the identity.
    pub dq_dphi: [f64; 2],
    /// `∂(q_x⁺, q_y⁺)/∂s`.
    pub dq_ds: [f64; 2],
    /// `∂(q_x⁺, q_y⁺)/∂ω`.
    pub dq_domega: [f64; 2],
    /// `∂φ⁺/∂ω = ∂θ⁺/∂v = dt`.
    pub dt: f64,
}

pub fn rk4_jacobian(z: &ExtendedState, w: &ExtendedInput, dt: f64) -> StepJacobian {
    let h = dt;
    let (s0, c0) = z.phi.sin_cos();
    let (sm, cm) = (z.phi + 0.5 * h * w.omega).sin_cos();
    let (se, ce) = (z.phi + h * w.omega).sin_cos();
    let k = h / 6.0;
    StepJacobian {
        dq_dphi: [k * w.s * (-s0 - 4.0 * sm - se), k * w.s * (c0 + 4.0 * cm + ce)],
        dq_ds: [k * (c0 + 4.0 * cm + ce), k * (s0 + 4.0 * sm + se)],
        dq_domega: [k * w.s * (-2.0 * h * sm - h * se), k * w.s * (2.0 * h * cm + h * ce)],
        dt: h,
    }
}

/// Roll `z0` forward through `inputs`; returns `inputs.len() + 1` states.
pub fn simulate_open_loop(z0: &ExtendedState, inputs: &[ExtendedInput], dt: f64) -> Result<Vec<ExtendedState>> {
    if inputs.is_empty() {
        return Err(Error::Domain("open-loop simulation needs at least one input".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*z0);
    let mut z = *z0;
    for w in inputs {
        z = rk4_step(&z, w, dt);
        states.push(z);
    }
    Ok(states)
}
