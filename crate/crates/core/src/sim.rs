//! Closed-loop simulation, error metrics, step timing and CSV export.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controllers::{Controller, PGains, QdnnPController};
use crate::dataset::{sample_corridor_state, CorridorConfig};
use crate::dynamics::{rk4_step, ExtendedInput, ExtendedState};
use crate::ocp::InputBox;
use crate::path::{cartesian_error, path_frame, PathParametrization};
use crate::quant::QuantizedMlp;
use crate::{Error, Result};

pub const TRACE_HEADER: [&str; 9] = ["t", "pathparam", "pos-x", "pos-y", "phi", "linvel", "angvel", "pathvel", "err"];
pub const PATH_HEADER: [&str; 3] = ["pathparam", "pos-x", "pos-y"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub laps: usize,
    pub v_ref: f64,
    pub theta0: f64,
    /// Initial tangential offset from `p(θ₀)`, m.
    pub offset_t: f64,
    /// Initial normal offset, m.
    pub offset_n: f64,
    /// Initial heading offset, rad.
    pub offset_heading: f64,
    /// Abort once the Cartesian error exceeds this, m.
    pub divergence_limit: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            laps: 1,
            v_ref: 0.15,
            theta0: 0.0,
            offset_t: 0.0,
            offset_n: 0.0,
            offset_heading: 0.0,
            divergence_limit: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.laps == 0 {
            return Err(Error::InvalidConfig("laps must be at least 1".into()));
        }
        if !(self.v_ref > 0.0 && self.v_ref.is_finite()) {
            return Err(Error::InvalidConfig(format!("v_ref must be positive, got {}", self.v_ref)));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::InvalidConfig("divergence limit must be positive".into()));
        }
        let offsets = [self.theta0, self.offset_t, self.offset_n, self.offset_heading];
        if offsets.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("initial state offsets must be finite".into()));
        }
        Ok(())
    }

    /// `laps · (2π / v_ref) / dt · 2`, rounded up.
    pub fn step_budget(&self) -> usize {
        (self.laps as f64 * TAU / self.v_ref / self.dt * 2.0).ceil() as usize
    }

    pub fn initial_state<P: PathParametrization + ?Sized>(&self, path: &P) -> ExtendedState {
        let p = path.position(self.theta0);
        let heading = path.heading(self.theta0);
        let (t, n) = path_frame(heading);
        ExtendedState::new(
            p[0] + self.offset_t * t[0] + self.offset_n * n[0],
            p[1] + self.offset_t * t[1] + self.offset_n * n[1],
            heading + self.offset_heading,
            self.theta0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub z: ExtendedState,
    /// Command applied from this state.
    pub w: ExtendedInput,
    /// `‖q − p(θ)‖`, m.
    pub err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimOutcome {
    Completed,
    /// Step budget used up before the requested laps were done.
    BudgetExhausted,
    Diverged { step: usize, error: f64 },
    /// The controller returned a non-finite command.
    ControllerFailure { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
    /// Controller wall-clock per row, s.
    pub step_times: Vec<f64>,
    pub outcome: SimOutcome,
}

impl SimTrace {
    pub fn completed(&self) -> bool {
        self.outcome == SimOutcome::Completed
    }

    /// Mean path speed `v` over rows with `θ mod 2π` in `center ± half`.
    pub fn mean_path_speed_near(&self, center: f64, half: f64) -> Option<f64> {
        let vs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                let d = (r.z.theta.rem_euclid(TAU) - center.rem_euclid(TAU) + TAU / 2.0).rem_euclid(TAU) - TAU / 2.0;
                d.abs() <= half
            })
            .map(|r| r.w.v)
            .collect();
        (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
    }
}

/// Run `controller` against the nominal model until `laps · 2π` of path
/// progress, the step budget, divergence, or a non-finite command.
pub fn run_closed_loop<P: PathParametrization + ?Sized>(
    path: &P,
    controller: &mut dyn Controller,
    cfg: &SimConfig,
) -> Result<SimTrace> {
    cfg.validate()?;
    let target = cfg.theta0 + cfg.laps as f64 * TAU;
    let budget = cfg.step_budget();
    let mut z = cfg.initial_state(path);
    let mut rows = Vec::with_capacity(budget / 2 + 1);
    let mut step_times = Vec::with_capacity(budget / 2 + 1);
    let mut outcome = SimOutcome::BudgetExhausted;
    for k in 0..budget {
        if z.theta >= target {
            outcome = SimOutcome::Completed;
            break;
        }
        let err = cartesian_error(path, z.position(), z.theta);
        let start = Instant::now();
        let w = controller.step(&z);
        let elapsed = start.elapsed().as_secs_f64();
        rows.push(TraceRow {
            t: k as f64 * cfg.dt,
            z,
            w,
            err,
        });
        step_times.push(elapsed);
        if !(err <= cfg.divergence_limit) {
            outcome = SimOutcome::Diverged { step: k, error: err };
            break;
        }
        if !w.is_finite() {
            outcome = SimOutcome::ControllerFailure { step: k };
            break;
        }
        z = rk4_step(&z, &w, cfg.dt);
    }
    if outcome == SimOutcome::BudgetExhausted && z.theta >= target {
        outcome = SimOutcome::Completed;
    }
    Ok(SimTrace {
        rows,
        step_times,
        outcome,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
}

impl TimingStats {
    /// Population statistics of `times` (s).
    pub fn from_samples(times: &[f64]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
        Ok(Self {
            samples: times.len(),
            mean,
            std: var.sqrt(),
            worst: times.iter().copied().fold(0.0, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub steps: usize,
    pub mean_error: f64,
    pub max_error: f64,
    pub timing: TimingStats,
}

pub fn compute_metrics(trace: &SimTrace) -> Result<Metrics> {
    if trace.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = trace.rows.len() as f64;
    Ok(Metrics {
        steps: trace.rows.len(),
        mean_error: trace.rows.iter().map(|r| r.err).sum::<f64>() / n,
        max_error: trace.rows.iter().map(|r| r.err).fold(0.0, f64::max),
        timing: TimingStats::from_samples(&trace.step_times)?,
    })
}

/// States drawn uniformly from the corridor around the path.
pub fn bench_states<P: PathParametrization + ?Sized>(path: &P, corridor: &CorridorConfig, n: usize, seed: u64) -> Vec<ExtendedState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_corridor_state(path, corridor, &mut rng)).collect()
}

/// Time one controller call per state, in order, without resetting memory.
pub fn time_controller(controller: &mut dyn Controller, states: &[ExtendedState]) -> Result<TimingStats> {
    let mut times = Vec::with_capacity(states.len());
    for z in states {
        let start = Instant::now();
        let w = controller.step(z);
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(w);
    }
    TimingStats::from_samples(&times)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSearch {
    pub best: PGains,
    pub best_max_error: f64,
    /// Max lap error per candidate; `None` if the lap did not complete.
    pub results: Vec<(PGains, Option<f64>)>,
}

/// Pick the gains with the smallest max lap error of the compensated
/// quantized controller. Ties keep the earlier candidate.
pub fn tune_gains<P: PathParametrization + Clone>(
    path: &P,
    model: &QuantizedMlp,
    input_box: InputBox,
    cfg: &SimConfig,
    candidates: &[PGains],
) -> Result<GainSearch> {
    let mut results = Vec::with_capacity(candidates.len());
    let mut best: Option<(PGains, f64)> = None;
    for &g in candidates {
        let mut c = QdnnPController::new(model.clone(), input_box, path.clone(), g)?;
        let trace = run_closed_loop(path, &mut c, cfg)?;
        let max = trace
            .completed()
            .then(|| compute_metrics(&trace).map(|m| m.max_error))
            .transpose()?;
        if let Some(m) = max {
            if best.map_or(true, |(_, b)| m < b) {
                best = Some((g, m));
            }
        }
        results.push((g, max));
    }
    let (best, best_max_error) =
        best.ok_or_else(|| Error::Domain("no gain candidate completed a lap".into()))?;
    Ok(GainSearch {
        best,
        best_max_error,
        results,
    })
}

pub fn write_trace_csv(trace: &SimTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| Error::csv(path, e))?;
    for r in &trace.rows {
        let fields = [r.t, r.z.theta, r.z.qx, r.z.qy, r.z.phi, r.w.s, r.w.omega, r.w.v, r.err];
        w.write_record(fields.iter().map(|x| x.to_string())).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let rows = read_numeric_csv::<9>(path, &TRACE_HEADER, "trace csv")?;
    Ok(rows
        .into_iter()
        .map(|f| TraceRow {
            t: f[0],
            z: ExtendedState::new(f[2], f[3], f[4], f[1]),
            w: ExtendedInput::new(f[5], f[6], f[7]),
            err: f[8],
        })
        .collect())
}

/// Reference path sampled at `θ_i = 2πi / samples`, `i = 0 … samples`.
pub fn write_path_csv<P: PathParametrization + ?Sized>(path: &P, samples: usize, file: &Path) -> Result<()> {
    if samples == 0 {
        return Err(Error::InvalidConfig("path export needs at least one sample".into()));
    }
    let mut w = csv::Writer::from_path(file).map_err(|e| Error::csv(file, e))?;
    w.write_record(PATH_HEADER).map_err(|e| Error::csv(file, e))?;
    for i in 0..=samples {
        let theta = TAU * i as f64 / samples as f64;
        let p = path.position(theta);
        w.write_record([theta, p[0], p[1]].iter().map(|x| x.to_string()))
            .map_err(|e| Error::csv(file, e))?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

pub fn read_path_csv(file: &Path) -> Result<Vec<[f64; 3]>> {
    read_numeric_csv::<3>(file, &PATH_HEADER, "path csv")
}

fn read_numeric_csv<const N: usize>(path: &Path, header: &[&str; N], what: &'static str) -> Result<Vec<[f64; N]>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let found = r.headers().map_err(|e| Error::csv(path, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::format(what, format!("expected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != N {
            return Err(Error::format(what, format!("expected {N} fields, found {}", rec.len())));
        }
        let mut row = [0.0; N];
        for (o, field) in row.iter_mut().zip(rec.iter()) {
            *o = field
                .parse()
                .map_err(|_| Error::format(what, format!("not a number: {field:?}")))?;
        }
        out.push(row);
    }
    Ok(out)
}
