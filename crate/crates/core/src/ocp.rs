//! Discrete-time MPFC optimal control problem and its solver.
//!
//! Over a horizon of `N` steps of length `δ` the cost
//!
//! ```text
//! J(w) = Σ_{k=0}^{N-1} ℓ(z_k, w_k) δ,    z_{k+1} = rk4(z_k, w_k, δ)
//! ℓ(z, w) = ‖[ξ − p(θ); θ]‖²_Q + ‖[u − u_r(θ, v); v − v_ref]‖²_R
//! ```
//!
//! is minimized over input sequences inside the box `𝒲`. The gradient is
//! accumulated backwards through the exact RK4 Jacobians. The solver is a
//! projected L-BFGS method: inputs near an active bound take a diagonally
//! scaled gradient step (Gauss–Newton curvature at the initial guess), the
//! free inputs take the quasi-Newton step, and an Armijo backtracking search
//! runs along the projection arc. Projection onto the box stays a
//! componentwise clamp.

use crate::dynamics::{rk4_jacobian, rk4_step, ExtendedInput, ExtendedState};
use crate::path::{wrap_angle, PathParametrization};
use crate::{Error, Result};

/// Componentwise bounds on [`ExtendedInput`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputBox {
    pub lo: ExtendedInput,
    pub hi: ExtendedInput,
}

impl Default for InputBox {
    fn default() -> Self {
        Self {
            lo: ExtendedInput::new(-0.26, -0.455, 0.0),
            hi: ExtendedInput::new(0.26, 0.455, 0.15),
        }
    }
}

impl InputBox {
    pub fn clamp(&self, w: &ExtendedInput) -> ExtendedInput {
        ExtendedInput::new(
            w.s.clamp(self.lo.s, self.hi.s),
            w.omega.clamp(self.lo.omega, self.hi.omega),
            w.v.clamp(self.lo.v, self.hi.v),
        )
    }

    pub fn contains(&self, w: &ExtendedInput) -> bool {
        let (lo, hi, x) = (self.lo.to_array(), self.hi.to_array(), w.to_array());
        (0..3).all(|i| lo[i] <= x[i] && x[i] <= hi[i])
    }

    fn lo_hi(&self, component: usize) -> (f64, f64) {
        (self.lo.to_array()[component], self.hi.to_array()[component])
    }
}

/// Optional quadratic penalty keeping predicted states inside a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePenalty {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
    pub weight: f64,
}

impl StatePenalty {
    fn cost(&self, z: &[f64; 4]) -> f64 {
        (0..4)
            .map(|i| {
                let over = (z[i] - self.hi[i]).max(0.0) + (self.lo[i] - z[i]).max(0.0);
                self.weight * over * over
            })
            .sum()
    }

    fn grad(&self, z: &[f64; 4], g: &mut [f64; 4]) {
        for i in 0..4 {
            g[i] += 2.0 * self.weight * ((z[i] - self.hi[i]).max(0.0) - (self.lo[i] - z[i]).max(0.0));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iters_cold: usize,
    pub max_iters_warm: usize,
    /// Stop when the scaled projected step `‖w − P(w − D⁻¹∇J)‖∞` drops below this.
    pub grad_tol: f64,
    pub armijo_sigma: f64,
    pub armijo_beta: f64,
    pub max_backtracks: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iters_cold: 400,
            max_iters_warm: 60,
            grad_tol: 1e-6,
            armijo_sigma: 1e-4,
            armijo_beta: 0.5,
            max_backtracks: 40,
        }
    }
}

/// Horizon, weights and bounds of the MPFC problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of `Q` for `(q_x, q_y, φ, θ)` residuals.
    pub q: [f64; 4],
    /// Diagonal of `R` for `(s, ω, v)` residuals.
    pub r: [f64; 3],
    pub input_box: InputBox,
    pub v_ref: f64,
    pub state_penalty: Option<StatePenalty>,
    pub solver: SolverSettings,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            dt: 0.01,
            q: [2e5, 2e5, 1e5, 0.0],
            r: [1e1, 5e3, 1e5],
            input_box: InputBox::default(),
            v_ref: 0.15,
            state_penalty: None,
            solver: SolverSettings::default(),
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.horizon == 0 {
            return bad("horizon must be at least one step".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.q.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
            return bad(format!("Q weights must be non-negative, got {:?}", self.q));
        }
        if self.r.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad(format!("R weights must be positive, got {:?}", self.r));
        }
        let (lo, hi) = (self.input_box.lo.to_array(), self.input_box.hi.to_array());
        if (0..3).any(|i| !(lo[i] <= hi[i])) {
            return bad(format!("input box is empty: {lo:?} > {hi:?}"));
        }
        if lo[2] != 0.0 {
            return bad(format!("path speed lower bound must be 0, got {}", lo[2]));
        }
        if !(self.v_ref >= 0.0 && self.v_ref.is_finite()) {
            return bad(format!("v_ref must be non-negative, got {}", self.v_ref));
        }
        let s = &self.solver;
        if !(s.grad_tol >= 0.0 && s.armijo_sigma > 0.0 && s.armijo_sigma < 1.0 && s.armijo_beta > 0.0 && s.armijo_beta < 1.0)
        {
            return bad(format!("invalid solver settings {s:?}"));
        }
        if let Some(p) = &self.state_penalty {
            if !(p.weight >= 0.0) || (0..4).any(|i| !(p.lo[i] <= p.hi[i])) {
                return bad(format!("invalid state penalty {p:?}"));
            }
        }
        Ok(())
    }

    /// Prediction horizon length `T = N δ`.
    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.dt
    }
}

/// A horizon of inputs `w_0 … w_{N−1}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputSequence(pub Vec<ExtendedInput>);

impl InputSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> Option<&ExtendedInput> {
        self.0.first()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ExtendedInput> {
        self.0.iter()
    }

    pub fn within(&self, b: &InputBox) -> bool {
        self.0.iter().all(|w| b.contains(w))
    }

    /// Drop the first entry and repeat the last one.
    pub fn shifted(&self) -> Self {
        let mut v: Vec<_> = self.0.iter().skip(1).copied().collect();
        if let Some(last) = self.0.last() {
            v.push(*last);
        }
        Self(v)
    }

    fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|w| w.to_array()).collect()
    }

    fn from_flat(x: &[f64]) -> Self {
        Self(x.chunks_exact(3).map(|c| ExtendedInput::new(c[0], c[1], c[2])).collect())
    }
}

/// Stage cost residual pieces at one `(z, w)`.
struct StageEval {
    cost: f64,
    grad_z: [f64; 4],
    grad_w: [f64; 3],
}

fn stage_eval<P: PathParametrization + ?Sized>(
    path: &P,
    z: &ExtendedState,
    w: &ExtendedInput,
    cfg: &OcpConfig,
    with_grad: bool,
) -> StageEval {
    let [q0, q1, q2, q3] = cfg.q;
    let [r0, r1, r2] = cfg.r;
    let p = path.position(z.theta);
    let d = path.derivatives(z.theta);
    let speed = d.speed_factor();
    let turn = d.heading_rate();

    let rx = z.qx - p[0];
    let ry = z.qy - p[1];
    let rphi = wrap_angle(z.phi - path.heading(z.theta));
    let rth = z.theta;
    let rs = w.s - w.v * speed;
    let rw = w.omega - w.v * turn;
    let rv = w.v - cfg.v_ref;

    let mut cost = q0 * rx * rx + q1 * ry * ry + q2 * rphi * rphi + q3 * rth * rth + r0 * rs * rs + r1 * rw * rw + r2 * rv * rv;
    let zarr = z.to_array();
    if let Some(pen) = &cfg.state_penalty {
        cost += pen.cost(&zarr);
    }
    if !with_grad {
        return StageEval {
            cost,
            grad_z: [0.0; 4],
            grad_w: [0.0; 3],
        };
    }

    let dspeed = d.speed_factor_rate();
    let dturn = d.heading_rate_rate();
    let mut grad_z = [
        2.0 * q0 * rx,
        2.0 * q1 * ry,
        2.0 * q2 * rphi,
        2.0 * (-q0 * rx * d.dx - q1 * ry * d.dy - q2 * rphi * turn + q3 * rth - r0 * rs * w.v * dspeed - r1 * rw * w.v * dturn),
    ];
    if let Some(pen) = &cfg.state_penalty {
        pen.grad(&zarr, &mut grad_z);
    }
    let grad_w = [
        2.0 * r0 * rs,
        2.0 * r1 * rw,
        2.0 * (-r0 * rs * speed - r1 * rw * turn + r2 * rv),
    ];
    StageEval { cost, grad_z, grad_w }
}

/// `ℓ(z, w)`; the heading residual is shifted by multiples of 2π into `(−π, π]`.
pub fn stage_cost<P: PathParametrization + ?Sized>(path: &P, z: &ExtendedState, w: &ExtendedInput, cfg: &OcpConfig) -> f64 {
    stage_eval(path, z, w, cfg, false).cost
}

/// Cost of one rollout and the visited states `z_0 … z_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub cost: f64,
    pub states: Vec<ExtendedState>,
}

pub fn rollout_cost<P: PathParametrization + ?Sized>(
    path: &P,
    z0: &ExtendedState,
    seq: &InputSequence,
    cfg: &OcpConfig,
) -> Result<Rollout> {
    check_len(seq, cfg)?;
    Ok(rollout(path, z0, &seq.0, cfg))
}

fn rollout<P: PathParametrization + ?Sized>(path: &P, z0: &ExtendedState, inputs: &[ExtendedInput], cfg: &OcpConfig) -> Rollout {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut z = *z0;
    let mut cost = 0.0;
    states.push(z);
    for w in inputs {
        cost += stage_cost(path, &z, w, cfg) * cfg.dt;
        z = rk4_step(&z, w, cfg.dt);
        states.push(z);
    }
    Rollout { cost, states }
}

fn check_len(seq: &InputSequence, cfg: &OcpConfig) -> Result<()> {
    if seq.len() != cfg.horizon {
        return Err(Error::Shape(format!(
            "input sequence has {} entries, horizon is {}",
            seq.len(),
            cfg.horizon
        )));
    }
    Ok(())
}

/// Exact gradient of [`rollout_cost`] with respect to all `3N` inputs,
/// ordered `(s_0, ω_0, v_0, s_1, …)`.
pub fn rollout_gradient<P: PathParametrization + ?Sized>(
    path: &P,
    z0: &ExtendedState,
    seq: &InputSequence,
    cfg: &OcpConfig,
) -> Result<Vec<f64>> {
    check_len(seq, cfg)?;
    let r = rollout(path, z0, &seq.0, cfg);
    Ok(adjoint_gradient(path, &r.states, &seq.0, cfg))
}

fn adjoint_gradient<P: PathParametrization + ?Sized>(
    path: &P,
    states: &[ExtendedState],
    inputs: &[ExtendedInput],
    cfg: &OcpConfig,
) -> Vec<f64> {
    let n = inputs.len();
    let dt = cfg.dt;
    let mut grad = vec![0.0; 3 * n];
    // Co-state of z_{k+1}; z_N does not enter the cost.
    let mut lam = [0.0f64; 4];
    for k in (0..n).rev() {
        let (z, w) = (&states[k], &inputs[k]);
        let st = stage_eval(path, z, w, cfg, true);
        let jac = rk4_jacobian(z, w, dt);
        let lxy = lam[0] * jac.dq_ds[0] + lam[1] * jac.dq_ds[1];
        grad[3 * k] = dt * st.grad_w[0] + lxy;
        grad[3 * k + 1] = dt * st.grad_w[1] + lam[0] * jac.dq_domega[0] + lam[1] * jac.dq_domega[1] + jac.dt * lam[2];
        grad[3 * k + 2] = dt * st.grad_w[2] + jac.dt * lam[3];
        lam = [
            dt * st.grad_z[0] + lam[0],
            dt * st.grad_z[1] + lam[1],
            dt * st.grad_z[2] + lam[2] + jac.dq_dphi[0] * lam[0] + jac.dq_dphi[1] * lam[1],
            dt * st.grad_z[3] + lam[3],
        ];
    }
    grad
}

/// Gauss–Newton diagonal `2 Σ W (∂r/∂w)²` of the cost at the given rollout.
fn gauss_newton_diagonal<P: PathParametrization + ?Sized>(
    path: &P,
    states: &[ExtendedState],
    inputs: &[ExtendedInput],
    cfg: &OcpConfig,
) -> Vec<f64> {
    let n = inputs.len();
    let dt = cfg.dt;
    let [q0, q1, q2, q3] = cfg.q;
    let [r0, r1, r2] = cfg.r;

    struct StageLin {
        dx: f64,
        dy: f64,
        turn: f64,
        dspeed_v: f64,
        dturn_v: f64,
        speed: f64,
        dq_dphi: [f64; 2],
        dq_ds: [f64; 2],
        dq_domega: [f64; 2],
    }
    let lin: Vec<StageLin> = (0..n)
        .map(|k| {
            let d = path.derivatives(states[k].theta);
            let jac = rk4_jacobian(&states[k], &inputs[k], dt);
            StageLin {
                dx: d.dx,
                dy: d.dy,
                turn: d.heading_rate(),
                dspeed_v: inputs[k].v * d.speed_factor_rate(),
                dturn_v: inputs[k].v * d.heading_rate_rate(),
                speed: d.speed_factor(),
                dq_dphi: jac.dq_dphi,
                dq_ds: jac.dq_ds,
                dq_domega: jac.dq_domega,
            }
        })
        .collect();

    // Squared weighted residual sensitivity of stage j to a state perturbation S.
    let stage_sq = |l: &StageLin, s: &[f64; 4]| {
        let ex = s[0] - l.dx * s[3];
        let ey = s[1] - l.dy * s[3];
        let ep = s[2] - l.turn * s[3];
        let es = l.dspeed_v * s[3];
        let ew = l.dturn_v * s[3];
        q0 * ex * ex + q1 * ey * ey + q2 * ep * ep + q3 * s[3] * s[3] + r0 * es * es + r1 * ew * ew
    };

    let mut diag = vec![0.0; 3 * n];
    for k in 0..n {
        let l = &lin[k];
        let direct = [r0, r1, r0 * l.speed * l.speed + r1 * l.turn * l.turn + r2];
        let columns = [
            [l.dq_ds[0], l.dq_ds[1], 0.0, 0.0],
            [l.dq_domega[0], l.dq_domega[1], dt, 0.0],
            [0.0, 0.0, 0.0, dt],
        ];
        for (c, col) in columns.iter().enumerate() {
            let mut s = *col;
            let mut acc = direct[c];
            for lj in &lin[k + 1..] {
                acc += stage_sq(lj, &s);
                s[0] += lj.dq_dphi[0] * s[2];
                s[1] += lj.dq_dphi[1] * s[2];
            }
            diag[3 * k + c] = (2.0 * dt * acc).max(1e-12);
        }
    }
    diag
}

/// Path-following feedforward over the horizon, slowed where needed so
/// that every entry is inside the input box.
pub fn reference_guess<P: PathParametrization + ?Sized>(path: &P, z0: &ExtendedState, cfg: &OcpConfig) -> InputSequence {
    let b = &cfg.input_box;
    let mut theta = z0.theta;
    let seq = (0..cfg.horizon)
        .map(|_| {
            let v = feasible_path_speed(path, theta, cfg);
            // Midpoint sampling makes the held input second-order accurate.
            let d = path.derivatives(theta + 0.5 * v * cfg.dt);
            let w = b.clamp(&ExtendedInput::new(v * d.speed_factor(), v * d.heading_rate(), v));
            theta += w.v * cfg.dt;
            w
        })
        .collect();
    InputSequence(seq)
}

/// Largest path speed `≤ v_ref` whose feedforward fits in the input box at `θ`.
fn feasible_path_speed<P: PathParametrization + ?Sized>(path: &P, theta: f64, cfg: &OcpConfig) -> f64 {
    let b = &cfg.input_box;
    let d = path.derivatives(theta);
    let (speed, turn) = (d.speed_factor(), d.heading_rate());
    let mut v = cfg.v_ref.clamp(b.lo.v, b.hi.v);
    if speed * v > b.hi.s {
        v = b.hi.s / speed;
    }
    if turn * v > b.hi.omega {
        v = b.hi.omega / turn;
    } else if turn * v < b.lo.omega {
        v = b.lo.omega / turn;
    }
    v.max(b.lo.v)
}

/// Outcome of one OCP solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub inputs: InputSequence,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    /// Final scaled projected step `‖w − P(w − D⁻¹∇J)‖∞`.
    pub stationarity: f64,
    pub converged: bool,
}

/// Minimize the rollout cost from `z0`.
///
/// With `warm = None` the solve starts from [`reference_guess`] and may use
/// `max_iters_cold` iterations; otherwise it starts from `warm` (clamped
/// into the box) with `max_iters_warm`.
pub fn solve<P: PathParametrization + ?Sized>(
    path: &P,
    z0: &ExtendedState,
    warm: Option<&InputSequence>,
    cfg: &OcpConfig,
) -> Result<SolveReport> {
    let (initial, max_iters) = match warm {
        Some(w) => {
            check_len(w, cfg)?;
            (w.clone(), cfg.solver.max_iters_warm)
        }
        None => (reference_guess(path, z0, cfg), cfg.solver.max_iters_cold),
    };
    solve_from(path, z0, &initial, max_iters, cfg)
}

fn solve_from<P: PathParametrization + ?Sized>(
    path: &P,
    z0: &ExtendedState,
    initial: &InputSequence,
    max_iters: usize,
    cfg: &OcpConfig,
) -> Result<SolveReport> {
    let b = &cfg.input_box;
    let settings = &cfg.solver;
    let bounds: Vec<(f64, f64)> = (0..3 * cfg.horizon).map(|i| b.lo_hi(i % 3)).collect();
    let project = |x: &mut [f64]| {
        for (xi, &(lo, hi)) in x.iter_mut().zip(&bounds) {
            *xi = xi.clamp(lo, hi);
        }
    };

    let mut x = initial.flat();
    project(&mut x);
    let mut current = rollout(path, z0, &InputSequence::from_flat(&x).0, cfg);
    if !current.cost.is_finite() {
        return Err(Error::SolverFailure {
            iterations: 0,
            reason: format!("initial cost is {}", current.cost),
        });
    }
    let initial_cost = current.cost;
    let scale = gauss_newton_diagonal(path, &current.states, &InputSequence::from_flat(&x).0, cfg);

    let mut candidate = vec![0.0; x.len()];
    let mut direction = vec![0.0; x.len()];
    let mut memory = LbfgsMemory::new(LBFGS_MEMORY);
    let mut iterations = 0;
    let mut stationarity = f64::INFINITY;
    let mut converged = false;
    let mut grad = adjoint_gradient(path, &current.states, &InputSequence::from_flat(&x).0, cfg);
    while iterations < max_iters {
        stationarity = x
            .iter()
            .zip(&grad)
            .zip(&scale)
            .zip(&bounds)
            .map(|(((xi, gi), di), &(lo, hi))| (xi - (xi - gi / di).clamp(lo, hi)).abs())
            .fold(0.0, f64::max);
        if stationarity <= settings.grad_tol {
            converged = true;
            break;
        }

        // Two-metric projection: coordinates at a bound that the gradient
        // pushes outward take the scaled gradient step, the rest a
        // quasi-Newton step.
        let eps = stationarity.min(ACTIVE_SET_WIDTH);
        let free: Vec<bool> = x
            .iter()
            .zip(&grad)
            .zip(&bounds)
            .map(|((&xi, &gi), &(lo, hi))| !((xi <= lo + eps && gi > 0.0) || (xi >= hi - eps && gi < 0.0)))
            .collect();
        memory.direction(&grad, &scale, &free, &mut direction);

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                // Fall back to the scaled gradient and forget curvature pairs.
                memory.clear();
                for i in 0..x.len() {
                    direction[i] = -grad[i] / scale[i];
                }
            }
            let mut alpha = 1.0;
            for _ in 0..=settings.max_backtracks {
                for i in 0..x.len() {
                    candidate[i] = x[i] + alpha * direction[i];
                }
                project(&mut candidate);
                let decrease: f64 = grad.iter().zip(&candidate).zip(&x).map(|((g, c), xi)| g * (c - xi)).sum();
                if !(decrease < 0.0) {
                    break;
                }
                let trial = rollout(path, z0, &InputSequence::from_flat(&candidate).0, cfg);
                if !trial.cost.is_finite() {
                    return Err(Error::SolverFailure {
                        iterations,
                        reason: format!("non-finite cost {} in line search", trial.cost),
                    });
                }
                if trial.cost <= current.cost + settings.armijo_sigma * decrease {
                    accepted = Some(trial);
                    break;
                }
                alpha *= settings.armijo_beta;
            }
            if accepted.is_some() {
                break;
            }
        }
        iterations += 1;
        match accepted {
            Some(trial) => {
                let next_grad = adjoint_gradient(path, &trial.states, &InputSequence::from_flat(&candidate).0, cfg);
                memory.push(&x, &candidate, &grad, &next_grad);
                std::mem::swap(&mut x, &mut candidate);
                grad = next_grad;
                current = trial;
            }
            // No decrease at machine precision: the iterate is as good as it gets.
            None => break,
        }
    }

    Ok(SolveReport {
        inputs: InputSequence::from_flat(&x),
        cost: current.cost,
        initial_cost,
        iterations,
        stationarity,
        converged,
    })
}

const LBFGS_MEMORY: usize = 60;
/// Upper bound on the distance to a bound for a coordinate to count as active.
const ACTIVE_SET_WIDTH: f64 = 1e-3;

/// Limited-memory inverse-Hessian approximation with the Gauss-Newton
/// diagonal as initial metric.
struct LbfgsMemory {
    pairs: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl LbfgsMemory {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: std::collections::VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, x: &[f64], x_next: &[f64], g: &[f64], g_next: &[f64]) {
        let s: Vec<f64> = x_next.iter().zip(x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        let yy: f64 = y.iter().map(|a| a * a).sum();
        if sy > 1e-10 * (ss * yy).sqrt() && sy > 0.0 {
            if self.pairs.len() == self.capacity {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, 1.0 / sy));
        }
    }

    /// `d = −H g` on free coordinates (pairs restricted to them) and the
    /// scaled gradient step `−g / D` on the others.
    fn direction(&self, g: &[f64], scale: &[f64], free: &[bool], d: &mut [f64]) {
        let masked = |v: &[f64], i: usize| if free[i] { v[i] } else { 0.0 };
        let dot_free = |a: &[f64], b: &[f64]| (0..a.len()).map(|i| masked(a, i) * masked(b, i)).sum::<f64>();
        let mut q: Vec<f64> = (0..g.len()).map(|i| masked(g, i)).collect();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, _) in self.pairs.iter().rev() {
            let sy = dot_free(s, y);
            if sy <= 0.0 {
                alphas.push(None);
                continue;
            }
            let a = dot_free(s, &q) / sy;
            for i in 0..q.len() {
                q[i] -= a * masked(y, i);
            }
            alphas.push(Some((a, sy)));
        }
        // Initial metric γ D⁻¹ with γ from the newest usable pair.
        let gamma = self
            .pairs
            .iter()
            .rev()
            .find_map(|(s, y, _)| {
                let sy = dot_free(s, y);
                let ydy: f64 = (0..y.len()).map(|i| masked(y, i) * masked(y, i) / scale[i]).sum();
                (sy > 0.0 && ydy > 0.0).then(|| sy / ydy)
            })
            .unwrap_or(1.0);
        for i in 0..q.len() {
            q[i] *= gamma / scale[i];
        }
        for ((s, y, _), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            if let Some((a, sy)) = a {
                let b = dot_free(y, &q) / sy;
                for i in 0..q.len() {
                    q[i] += (a - b) * masked(s, i);
                }
            }
        }
        for i in 0..d.len() {
            d[i] = if free[i] { -q[i] } else { -g[i] / scale[i] };
        }
    }
}

/// Running totals kept by [`MpfcController`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverTelemetry {
    pub solves: usize,
    pub iterations: usize,
    pub failures: usize,
}

/// Receding-horizon MPFC feedback `w = 𝕄(z)` with warm-start memory.
#[derive(Debug, Clone)]
pub struct MpfcController<P> {
    path: P,
    cfg: OcpConfig,
    warm: Option<InputSequence>,
    telemetry: SolverTelemetry,
}

impl<P: PathParametrization> MpfcController<P> {
    pub fn new(path: P, cfg: OcpConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            path,
            cfg,
            warm: None,
            telemetry: SolverTelemetry::default(),
        })
    }

    pub fn config(&self) -> &OcpConfig {
        &self.cfg
    }

    pub fn path(&self) -> &P {
        &self.path
    }

    pub fn telemetry(&self) -> SolverTelemetry {
        self.telemetry
    }

    /// Forget the warm start; the next step solves from the reference guess.
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Solve at `z`, keep the solution for the next warm start and return
    /// its first input.
    ///
    /// A solver failure is counted in the telemetry and answered with the
    /// first element of the warm start (or the reference guess), so the
    /// plant always receives a feasible command.
    pub fn step(&mut self, z: &ExtendedState) -> ExtendedInput {
        let warm = self.warm.as_ref().map(InputSequence::shifted);
        self.telemetry.solves += 1;
        match solve(&self.path, z, warm.as_ref(), &self.cfg) {
            Ok(report) => {
                self.telemetry.iterations += report.iterations;
                let w0 = report.inputs.0[0];
                self.warm = Some(report.inputs);
                w0
            }
            Err(_) => {
                self.telemetry.failures += 1;
                let fallback = warm.unwrap_or_else(|| reference_guess(&self.path, z, &self.cfg));
                let w0 = self.cfg.input_box.clamp(&fallback.0[0]);
                self.warm = Some(fallback);
                w0
            }
        }
    }
}
