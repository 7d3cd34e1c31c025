//! Reference path parametrization and path-relative error.
//!
//! A path is a planar curve `θ ↦ (p_x(θ), p_y(θ))` plus the heading of its
//! tangent. The feedforward inputs that keep the unicycle exactly on the
//! path follow from differential flatness:
//!
//! ```text
//! s_r = v · |p'(θ)|
//! ω_r = v · (p_x' p_y'' − p_y' p_x'') / |p'(θ)|²
//! ```

use std::f64::consts::{PI, TAU};

use crate::{Error, Result};

/// First, second and third derivatives of the path position with respect to θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathDerivatives {
    pub dx: f64,
    pub dy: f64,
    pub ddx: f64,
    pub ddy: f64,
    pub dddx: f64,
    pub dddy: f64,
}

impl PathDerivatives {
    /// `|p'(θ)|`, the path-point speed per unit path speed.
    pub fn speed_factor(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    /// `dp_φ/dθ`, the heading rate per unit path speed.
    pub fn heading_rate(&self) -> f64 {
        (self.dx * self.ddy - self.dy * self.ddx) / (self.dx * self.dx + self.dy * self.dy)
    }

    /// `d|p'|/dθ`.
    pub fn speed_factor_rate(&self) -> f64 {
        (self.dx * self.ddx + self.dy * self.ddy) / self.speed_factor()
    }

    /// `d²p_φ/dθ²`.
    pub fn heading_rate_rate(&self) -> f64 {
        let num = self.dx * self.ddy - self.dy * self.ddx;
        let den = self.dx * self.dx + self.dy * self.dy;
        let dnum = self.dx * self.dddy - self.dy * self.dddx;
        let dden = 2.0 * (self.dx * self.ddx + self.dy * self.ddy);
        (dnum * den - num * dden) / (den * den)
    }
}

/// A point on the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub position: [f64; 2],
    /// Tangent heading, continuous (unwrapped) in θ.
    pub heading: f64,
    pub theta: f64,
}

/// Robot position error expressed in the path frame at `p(θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathError {
    /// Tangential component `e_t`, m.
    pub e_t: f64,
    /// Normal component `e_n`, m.
    pub e_n: f64,
}

/// A twice (or more) differentiable planar path.
///
/// Implementors supply position, derivatives up to third order and a
/// heading that is continuous in θ; everything else is derived.
pub trait PathParametrization: Send + Sync {
    fn position(&self, theta: f64) -> [f64; 2];

    fn derivatives(&self, theta: f64) -> PathDerivatives;

    /// Continuous tangent heading `p_φ(θ)`.
    fn heading(&self, theta: f64) -> f64;

    /// Checked evaluation of `p(θ)`.
    fn eval(&self, theta: f64) -> Result<PathPoint> {
        check_theta(theta)?;
        Ok(PathPoint {
            position: self.position(theta),
            heading: self.heading(theta),
            theta,
        })
    }

    /// Flatness-based feedforward `(s_r, ω_r)` for path speed `v`.
    fn reference_inputs(&self, theta: f64, v: f64) -> (f64, f64) {
        let d = self.derivatives(theta);
        (v * d.speed_factor(), v * d.heading_rate())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("path parameter must be finite, got {theta}")))
    }
}

/// Axis-aligned ellipse `p(θ) = (a cos θ, b sin θ)`, traversed counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub semi_axis_x: f64,
    pub semi_axis_y: f64,
}

impl Default for Ellipse {
    fn default() -> Self {
        Self {
            semi_axis_x: 0.1,
            semi_axis_y: 2.0,
        }
    }
}

impl Ellipse {
    pub fn new(semi_axis_x: f64, semi_axis_y: f64) -> Result<Self> {
        if !(semi_axis_x > 0.0 && semi_axis_y > 0.0 && semi_axis_x.is_finite() && semi_axis_y.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ellipse semi-axes must be positive and finite, got ({semi_axis_x}, {semi_axis_y})"
            )));
        }
        Ok(Self {
            semi_axis_x,
            semi_axis_y,
        })
    }

    /// Checked form of [`PathParametrization::derivatives`] returning
    /// `(p_x', p_y', p_x'', p_y'')`.
    pub fn path_derivatives(&self, theta: f64) -> Result<(f64, f64, f64, f64)> {
        check_theta(theta)?;
        let d = self.derivatives(theta);
        Ok((d.dx, d.dy, d.ddx, d.ddy))
    }
}

impl PathParametrization for Ellipse {
    fn position(&self, theta: f64) -> [f64; 2] {
        let (sin, cos) = theta.sin_cos();
        [self.semi_axis_x * cos, self.semi_axis_y * sin]
    }

    fn derivatives(&self, theta: f64) -> PathDerivatives {
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (self.semi_axis_x, self.semi_axis_y);
        PathDerivatives {
            dx: -a * sin,
            dy: b * cos,
            ddx: -a * cos,
            ddy: -b * sin,
            dddx: a * sin,
            dddy: -b * cos,
        }
    }

    fn heading(&self, theta: f64) -> f64 {
        // The tangent (-a sinθ, b cosθ) lies in the same quadrant as
        // (-sinθ, cosθ), whose continuous angle is θ + π/2; the two differ
        // by less than π/2, so rounding to that branch unwraps exactly.
        let d = self.derivatives(theta);
        let raw = d.dy.atan2(d.dx);
        let proxy = theta + PI / 2.0;
        raw + TAU * ((proxy - raw) / TAU).round()
    }
}

/// Unit tangent and left normal of a heading.
pub fn path_frame(heading: f64) -> ([f64; 2], [f64; 2]) {
    let (sin, cos) = heading.sin_cos();
    ([cos, sin], [-sin, cos])
}

/// Decompose `q − p_xy(θ)` along the path tangent and normal at `θ`.
pub fn error_components<P: PathParametrization + ?Sized>(path: &P, q: [f64; 2], theta: f64) -> PathError {
    let p = path.position(theta);
    let (t, n) = path_frame(path.heading(theta));
    let e = [q[0] - p[0], q[1] - p[1]];
    PathError {
        e_t: e[0] * t[0] + e[1] * t[1],
        e_n: e[0] * n[0] + e[1] * n[1],
    }
}

/// Euclidean distance between `q` and `p_xy(θ)`.
pub fn cartesian_error<P: PathParametrization + ?Sized>(path: &P, q: [f64; 2], theta: f64) -> f64 {
    let p = path.position(theta);
    (q[0] - p[0]).hypot(q[1] - p[1])
}

/// Shift `angle` by a multiple of 2π into `(−π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = angle - TAU * (angle / TAU).round();
    if wrapped <= -PI {
        wrapped + TAU
    } else if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}
