//! Corridor training set: states gridded in a cuboid around the path,
//! labeled with the MPFC feedback, plus normalization statistics.
//!
//! File formats:
//!
//! - Dataset CSV: header `qx,qy,phi,theta,s,omega,v`, one record per row.
//! - Dataset binary: 7-byte magic `MPFCDS1`, little-endian `u64` record
//!   count, then `7 × count` little-endian `f64` in row-major record order.
//! - Stats CSV: header `name,mu,sigma`, one row per column of the dataset.

use std::f64::consts::{FRAC_PI_3, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{ExtendedInput, ExtendedState};
use crate::ocp::{solve, OcpConfig};
use crate::path::{path_frame, PathParametrization};
use crate::{Error, Result};

pub const COLUMNS: [&str; 7] = ["qx", "qy", "phi", "theta", "s", "omega", "v"];
const DATASET_MAGIC: &[u8; 7] = b"MPFCDS1";
const SIGMA_FLOOR: f64 = 1e-9;
/// Fraction of failed labels above which generation is an error.
const MAX_FAILURE_RATE: f64 = 0.01;

/// Size and resolution of the cuboid corridor around the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorConfig {
    /// Number of equidistant path parameters `θ_i` in `[0, 2π)`.
    pub n_theta: usize,
    /// Half-width `c_W` along the normal, m.
    pub half_width: f64,
    /// Half-length `c_L` along the tangent, m.
    pub half_length: f64,
    /// Half-height `c_H` as a heading offset, rad.
    pub half_height: f64,
    pub n_width: usize,
    pub n_length: usize,
    pub n_height: usize,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            n_theta: 4000,
            half_width: 0.01,
            half_length: 0.1,
            half_height: FRAC_PI_3,
            n_width: 5,
            n_length: 5,
            n_height: 40,
        }
    }
}

impl CorridorConfig {
    /// The reduced corridor used for desk-scale runs (200 × 125 samples).
    pub fn desk_scale() -> Self {
        Self {
            n_theta: 200,
            n_width: 5,
            n_length: 5,
            n_height: 5,
            ..Self::default()
        }
    }

    /// Poses per corridor, `N_c`.
    pub fn points_per_corridor(&self) -> usize {
        self.n_width * self.n_length * self.n_height
    }

    pub fn total_samples(&self) -> usize {
        self.n_theta * self.points_per_corridor()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_theta == 0 || self.n_width == 0 || self.n_length == 0 || self.n_height == 0 {
            return Err(Error::InvalidConfig(format!("corridor counts must be at least 1: {self:?}")));
        }
        let dims = [self.half_width, self.half_length, self.half_height];
        if dims.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::InvalidConfig(format!("corridor half-dimensions must be non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn theta(&self, i: usize) -> f64 {
        TAU * i as f64 / self.n_theta as f64
    }
}

/// `n` equidistant offsets in `[−c, c]`, exactly symmetric about zero.
fn offsets(half: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let m = (n - 1) as f64;
    (0..n).map(|i| half * ((2.0 * i as f64 - m) / m)).collect()
}

/// Corridor pose for tangential, normal and heading offsets at `θ`.
fn corridor_pose<P: PathParametrization + ?Sized>(path: &P, theta: f64, p_t: f64, p_n: f64, p_o: f64) -> ExtendedState {
    let p = path.position(theta);
    let heading = path.heading(theta);
    let (t, n) = path_frame(heading);
    ExtendedState::new(
        p[0] + p_t * t[0] + p_n * n[0],
        p[1] + p_t * t[1] + p_n * n[1],
        heading + p_o,
        theta,
    )
}

/// The `N_c` grid poses of the corridor `C(θ_i)`, as extended states at `θ_i`.
///
/// Ordering is tangential-major, then normal, then heading offset.
pub fn corridor_points<P: PathParametrization + ?Sized>(path: &P, theta: f64, cfg: &CorridorConfig) -> Vec<ExtendedState> {
    let tangential = offsets(cfg.half_length, cfg.n_length);
    let normal = offsets(cfg.half_width, cfg.n_width);
    let heading = offsets(cfg.half_height, cfg.n_height);
    let mut out = Vec::with_capacity(cfg.points_per_corridor());
    for &pt in &tangential {
        for &pn in &normal {
            for &po in &heading {
                out.push(corridor_pose(path, theta, pt, pn, po));
            }
        }
    }
    out
}

/// A uniformly random state inside the corridor box at a uniform `θ ∈ [0, 2π)`.
pub fn sample_corridor_state<P: PathParametrization + ?Sized, R: Rng>(path: &P, cfg: &CorridorConfig, rng: &mut R) -> ExtendedState {
    let theta = rng.gen_range(0.0..TAU);
    let mut sym = |c: f64| if c > 0.0 { rng.gen_range(-c..=c) } else { 0.0 };
    let pt = sym(cfg.half_length);
    let pn = sym(cfg.half_width);
    let po = sym(cfg.half_height);
    corridor_pose(path, theta, pt, pn, po)
}

/// One `(z, 𝕄(z))` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub z: ExtendedState,
    pub w: ExtendedInput,
}

impl Record {
    pub fn to_row(&self) -> [f64; 7] {
        let (z, w) = (self.z, self.w);
        [z.qx, z.qy, z.phi, z.theta, w.s, w.omega, w.v]
    }

    pub fn from_row(r: &[f64; 7]) -> Self {
        Self {
            z: ExtendedState::new(r[0], r[1], r[2], r[3]),
            w: ExtendedInput::new(r[4], r[5], r[6]),
        }
    }
}

/// Labeled samples, conceptually the 7 × N_T matrix with states in rows
/// 1–4 and inputs in rows 5–7.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    pub records: Vec<Record>,
    /// Samples dropped because the solver failed on them.
    pub failures: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Normalized `(z̄, w̄)` pairs.
    pub fn normalized(&self, stats: &NormStats) -> (Vec<[f64; 4]>, Vec<[f64; 3]>) {
        self.records
            .iter()
            .map(|r| (stats.normalize_state(&r.z), stats.normalize_input(&r.w)))
            .unzip()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        wtr.write_record(COLUMNS).map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            wtr.write_record(r.to_row().iter().map(|x| format!("{x:.16e}")))
                .map_err(|e| Error::csv(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.iter().ne(COLUMNS.iter().copied()) {
            return Err(Error::format("dataset csv", format!("unexpected header {headers:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            records.push(Record::from_row(&parse_row::<7>(&row, "dataset csv")?));
        }
        Ok(Self { records, failures: 0 })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
        put(DATASET_MAGIC)?;
        put(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            for x in r.to_row() {
                put(&x.to_le_bytes())?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut magic = [0u8; 7];
        input.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("dataset binary", "bad magic"));
        }
        let mut word = [0u8; 8];
        input.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        let count = u64::from_le_bytes(word) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let mut row = [0.0; 7];
            for x in &mut row {
                input
                    .read_exact(&mut word)
                    .map_err(|_| Error::format("dataset binary", format!("truncated after {} records", records.len())))?;
                *x = f64::from_le_bytes(word);
            }
            records.push(Record::from_row(&row));
        }
        Ok(Self { records, failures: 0 })
    }
}

fn parse_row<const N: usize>(row: &csv::StringRecord, what: &'static str) -> Result<[f64; N]> {
    if row.len() != N {
        return Err(Error::format(what, format!("expected {N} fields, found {}", row.len())));
    }
    let mut out = [0.0; N];
    for (o, field) in out.iter_mut().zip(row.iter()) {
        *o = field
            .trim()
            .parse()
            .map_err(|_| Error::format(what, format!("not a number: {field:?}")))?;
    }
    Ok(out)
}

/// Label every corridor pose with the first input of a cold MPFC solve.
///
/// Samples are labeled in parallel but stored by index, so the result does
/// not depend on scheduling. Failed solves are dropped and counted; more
/// than 1% failures is an error.
pub fn generate_dataset<P: PathParametrization + ?Sized>(path: &P, ocp: &OcpConfig, corridor: &CorridorConfig) -> Result<TrainingSet> {
    ocp.validate()?;
    corridor.validate()?;
    let states: Vec<ExtendedState> = (0..corridor.n_theta)
        .flat_map(|i| corridor_points(path, corridor.theta(i), corridor))
        .collect();
    let labels: Vec<Option<ExtendedInput>> = states
        .par_iter()
        .map(|z| solve(path, z, None, ocp).ok().map(|rep| rep.inputs.0[0]))
        .collect();

    let total = states.len();
    let records: Vec<Record> = states
        .into_iter()
        .zip(labels)
        .filter_map(|(z, w)| w.map(|w| Record { z, w }))
        .collect();
    let failures = total - records.len();
    if failures as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures { failed: failures, total });
    }
    Ok(TrainingSet { records, failures })
}

/// Row-wise mean and (population) standard deviation of the 7 × N_T matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: [f64; 7],
    pub sigma: [f64; 7],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mu: [0.0; 7],
            sigma: [1.0; 7],
        }
    }
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if self.mu.iter().any(|m| !m.is_finite()) || self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }

    /// `(x_i − μ_{offset+i}) / σ_{offset+i}` for each entry of `x`.
    pub fn normalize(&self, x: &[f64], offset: usize) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mu[offset + i]) / self.sigma[offset + i])
            .collect()
    }

    /// Inverse of [`NormStats::normalize`].
    pub fn denormalize(&self, x: &[f64], offset: usize) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| v * self.sigma[offset + i] + self.mu[offset + i])
            .collect()
    }

    /// Normalize a state with rows 1–4.
    pub fn normalize_state(&self, z: &ExtendedState) -> [f64; 4] {
        let a = z.to_array();
        std::array::from_fn(|i| (a[i] - self.mu[i]) / self.sigma[i])
    }

    /// Normalize an input with rows 5–7.
    pub fn normalize_input(&self, w: &ExtendedInput) -> [f64; 3] {
        let a = w.to_array();
        std::array::from_fn(|i| (a[i] - self.mu[i + 4]) / self.sigma[i + 4])
    }

    /// Denormalize a network output with rows 5–7.
    pub fn denormalize_input(&self, w: &[f64; 3]) -> ExtendedInput {
        ExtendedInput::from_array(std::array::from_fn(|i| w[i] * self.sigma[i + 4] + self.mu[i + 4]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        wtr.write_record(["name", "mu", "sigma"]).map_err(|e| Error::csv(path, e))?;
        for (i, name) in COLUMNS.iter().enumerate() {
            wtr.write_record([name.to_string(), format!("{:.16e}", self.mu[i]), format!("{:.16e}", self.sigma[i])])
                .map_err(|e| Error::csv(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut stats = NormStats::default();
        let mut seen = [false; 7];
        for row in rdr.records() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            if row.len() != 3 {
                return Err(Error::format("stats csv", format!("expected 3 fields, found {}", row.len())));
            }
            let idx = COLUMNS
                .iter()
                .position(|c| *c == &row[0])
                .ok_or_else(|| Error::format("stats csv", format!("unknown row {:?}", &row[0])))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format("stats csv", format!("not a number: {s:?}")))
            };
            stats.mu[idx] = parse(&row[1])?;
            stats.sigma[idx] = parse(&row[2])?;
            seen[idx] = true;
        }
        if !seen.iter().all(|s| *s) {
            return Err(Error::format("stats csv", "missing rows"));
        }
        stats.validate()?;
        Ok(stats)
    }
}

/// Per-row mean and population standard deviation; `σ < 1e−9` is replaced by 1.
pub fn compute_stats(ts: &TrainingSet) -> Result<NormStats> {
    if ts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ts.len() as f64;
    let mut mu = [0.0; 7];
    for r in &ts.records {
        for (m, x) in mu.iter_mut().zip(r.to_row()) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 7];
    for r in &ts.records {
        for ((v, x), m) in var.iter_mut().zip(r.to_row()).zip(&mu) {
            *v += (x - m) * (x - m);
        }
    }
    let sigma = var.map(|v| {
        let s = (v / n).sqrt();
        if s < SIGMA_FLOOR {
            1.0
        } else {
            s
        }
    });
    Ok(NormStats { mu, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{cartesian_error, Ellipse};
    use proptest::prelude::*;

    fn set(rows: &[[f64; 7]]) -> TrainingSet {
        TrainingSet {
            records: rows.iter().map(Record::from_row).collect(),
            failures: 0,
        }
    }

    #[test]
    fn corridor_sizes() {
        let path = Ellipse::default();
        let cfg = CorridorConfig {
            n_width: 3,
            n_length: 3,
            n_height: 1,
            ..CorridorConfig::default()
        };
        assert_eq!(corridor_points(&path, 0.3, &cfg).len(), 9);
        assert_eq!(corridor_points(&path, 0.3, &CorridorConfig::default()).len(), 1000);
        assert_eq!(CorridorConfig::default().total_samples(), 4_000_000);
        assert_eq!(CorridorConfig::desk_scale().total_samples(), 25_000);
    }

    #[test]
    fn degenerate_corridor_is_the_path_point() {
        let path = Ellipse::default();
        let cfg = CorridorConfig {
            half_width: 0.0,
            half_length: 0.0,
            half_height: 0.0,
            n_width: 2,
            n_length: 3,
            n_height: 2,
            ..CorridorConfig::default()
        };
        let th = 2.2;
        let p = path.position(th);
        for z in corridor_points(&path, th, &cfg) {
            assert_eq!((z.qx, z.qy, z.phi, z.theta), (p[0], p[1], path.heading(th), th));
        }
    }

    #[test]
    fn offsets_are_symmetric_and_span_the_box() {
        for n in 1..12 {
            let o = offsets(0.37, n);
            assert_eq!(o.len(), n);
            assert!(o.iter().sum::<f64>().abs() < 1e-12);
            if n > 1 {
                assert_eq!(o[0], -0.37);
                assert_eq!(o[n - 1], 0.37);
            }
        }
    }

    #[test]
    fn corridor_containment() {
        let path = Ellipse::default();
        let cfg = CorridorConfig::default();
        let bound = cfg.half_length.hypot(cfg.half_width) + 1e-12;
        for i in (0..cfg.n_theta).step_by(97) {
            let th = cfg.theta(i);
            for z in corridor_points(&path, th, &cfg) {
                assert!(cartesian_error(&path, z.position(), th) <= bound);
                assert!((z.phi - path.heading(th)).abs() <= cfg.half_height + 1e-12);
            }
        }
    }

    #[test]
    fn invalid_corridor_configs() {
        assert!(CorridorConfig { n_height: 0, ..CorridorConfig::default() }.validate().is_err());
        assert!(CorridorConfig { half_width: -1.0, ..CorridorConfig::default() }.validate().is_err());
    }

    #[test]
    fn stats_examples() {
        let ts = set(&[[0.0; 7], [2.0; 7]]);
        let st = compute_stats(&ts).unwrap();
        assert_eq!(st.mu, [1.0; 7]);
        assert_eq!(st.sigma, [1.0; 7]);

        let ts = set(&[[3.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [3.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.5]]);
        let st = compute_stats(&ts).unwrap();
        assert_eq!(st.sigma[0], 1.0, "constant row floored");
        let z = ts.records[0].z;
        let back = st.denormalize(&st.normalize(&z.to_array(), 0), 0);
        assert_eq!(back, z.to_array().to_vec());

        assert!(matches!(compute_stats(&TrainingSet::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normalized_rows_are_standardized() {
        let rows: Vec<[f64; 7]> = (0..500)
            .map(|i| {
                let t = i as f64;
                [t.sin(), 0.3 * t, (0.7 * t).cos() * 5.0, t * t * 1e-3, -t, 2.0 + (t * 1.3).sin(), 0.01 * (t % 17.0)]
            })
            .collect();
        let ts = set(&rows);
        let st = compute_stats(&ts).unwrap();
        let (zs, ws) = ts.normalized(&st);
        for c in 0..7 {
            let col: Vec<f64> = (0..rows.len()).map(|j| if c < 4 { zs[j][c] } else { ws[j][c - 4] }).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() <= 1e-9, "row {c} mean {mean}");
            assert!((sd - 1.0).abs() <= 1e-9, "row {c} sd {sd}");
        }
    }

    #[test]
    fn normalize_mean_is_zero_and_index_bookkeeping() {
        let st = NormStats {
            mu: [1.0, -2.0, 3.0, 0.5, 0.1, -0.2, 0.07],
            sigma: [0.5, 2.0, 1.5, 3.0, 0.05, 0.3, 0.02],
        };
        assert_eq!(st.normalize(&st.mu, 0), vec![0.0; 7]);
        let full = [0.3, 0.9, -1.2, 4.0, 0.2, 0.1, 0.12];
        let all = st.normalize(&full, 0);
        let z = st.normalize_state(&ExtendedState::from_array([full[0], full[1], full[2], full[3]]));
        assert_eq!(z.to_vec(), all[..4].to_vec());
        let w = st.normalize_input(&ExtendedInput::from_array([full[4], full[5], full[6]]));
        assert_eq!(w.to_vec(), all[4..].to_vec());
        assert_eq!(st.normalize(&full[4..], 4), all[4..].to_vec());
        let back = st.denormalize_input(&w).to_array();
        let full_back = st.denormalize(&all, 0);
        for i in 0..3 {
            assert_eq!(back[i], full_back[4 + i]);
        }
    }

    proptest! {
        #[test]
        fn normalization_roundtrip(x in proptest::array::uniform7(-1e3f64..1e3),
                                   mu in proptest::array::uniform7(-10.0f64..10.0),
                                   sigma in proptest::array::uniform7(1e-3f64..1e2)) {
            let st = NormStats { mu, sigma };
            let back = st.denormalize(&st.normalize(&x, 0), 0);
            for i in 0..7 {
                prop_assert!((back[i] - x[i]).abs() <= 1e-12 * x[i].abs().max(1.0));
            }
        }
    }
}
