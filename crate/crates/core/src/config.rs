//! Plain-text `key = value` configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Vector values are comma separated. Unknown or repeated keys are errors.
//!
//! ```text
//! seed = 7
//! n_theta = 200        # corridor resolution
//! q = 2e5, 2e5, 1e5, 0
//! gains = -1, 2
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::controllers::PGains;
use crate::dataset::CorridorConfig;
use crate::dynamics::ExtendedInput;
use crate::mlp::TrainConfig;
use crate::ocp::OcpConfig;
use crate::sim::SimConfig;
use crate::{Error, Result};

/// Parsed `key = value` pairs with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", i + 1)));
            }
            if let Some((first, _)) = entries.insert(k.to_string(), (i + 1, v.trim().to_string())) {
                return Err(Error::InvalidConfig(format!("line {}: key `{k}` already set on line {first}", i + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (_, v))| (k.as_str(), v.as_str()))
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse {value:?}")))
}

fn vector<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::InvalidConfig(format!("`{key}`: expected {N} comma-separated numbers, got {value:?}")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(key, p)?;
    }
    Ok(out)
}

/// Every setting of the dataset → train → quantize → simulate pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub ocp: OcpConfig,
    pub corridor: CorridorConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub gains: PGains,
    /// Dataset states used to calibrate activation ranges.
    pub calibration_samples: usize,
    pub bench_samples: usize,
    pub path_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ocp: OcpConfig::default(),
            corridor: CorridorConfig::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            gains: PGains::default(),
            calibration_samples: 5000,
            bench_samples: 10000,
            path_samples: 1000,
        }
    }
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 32] = [
        "seed",
        "horizon",
        "dt",
        "q",
        "r",
        "input_lo",
        "input_hi",
        "v_ref",
        "max_iters_cold",
        "max_iters_warm",
        "grad_tol",
        "n_theta",
        "half_width",
        "half_length",
        "half_height",
        "n_width",
        "n_length",
        "n_height",
        "learning_rate",
        "batch_size",
        "epochs",
        "validation_fraction",
        "laps",
        "theta0",
        "offset_t",
        "offset_n",
        "offset_heading",
        "divergence_limit",
        "gains",
        "calibration_samples",
        "bench_samples",
        "path_samples",
    ];

    /// Defaults overridden by the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&KeyValues::load(path)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        for (key, value) in kv.iter() {
            self.set(key, value)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => {
                self.seed = scalar(key, v)?;
                self.train.seed = self.seed;
            }
            "horizon" => self.ocp.horizon = scalar(key, v)?,
            "dt" => {
                self.ocp.dt = scalar(key, v)?;
                self.sim.dt = self.ocp.dt;
            }
            "q" => self.ocp.q = vector(key, v)?,
            "r" => self.ocp.r = vector(key, v)?,
            "input_lo" => self.ocp.input_box.lo = ExtendedInput::from_array(vector(key, v)?),
            "input_hi" => self.ocp.input_box.hi = ExtendedInput::from_array(vector(key, v)?),
            "v_ref" => {
                self.ocp.v_ref = scalar(key, v)?;
                self.sim.v_ref = self.ocp.v_ref;
            }
            "max_iters_cold" => self.ocp.solver.max_iters_cold = scalar(key, v)?,
            "max_iters_warm" => self.ocp.solver.max_iters_warm = scalar(key, v)?,
            "grad_tol" => self.ocp.solver.grad_tol = scalar(key, v)?,
            "n_theta" => self.corridor.n_theta = scalar(key, v)?,
            "half_width" => self.corridor.half_width = scalar(key, v)?,
            "half_length" => self.corridor.half_length = scalar(key, v)?,
            "half_height" => self.corridor.half_height = scalar(key, v)?,
            "n_width" => self.corridor.n_width = scalar(key, v)?,
            "n_length" => self.corridor.n_length = scalar(key, v)?,
            "n_height" => self.corridor.n_height = scalar(key, v)?,
            "learning_rate" => self.train.learning_rate = scalar(key, v)?,
            "batch_size" => self.train.batch_size = scalar(key, v)?,
            "epochs" => self.train.epochs = scalar(key, v)?,
            "validation_fraction" => self.train.validation_fraction = scalar(key, v)?,
            "laps" => self.sim.laps = scalar(key, v)?,
            "theta0" => self.sim.theta0 = scalar(key, v)?,
            "offset_t" => self.sim.offset_t = scalar(key, v)?,
            "offset_n" => self.sim.offset_n = scalar(key, v)?,
            "offset_heading" => self.sim.offset_heading = scalar(key, v)?,
            "divergence_limit" => self.sim.divergence_limit = scalar(key, v)?,
            "gains" => self.gains = v.parse()?,
            "calibration_samples" => self.calibration_samples = scalar(key, v)?,
            "bench_samples" => self.bench_samples = scalar(key, v)?,
            "path_samples" => self.path_samples = scalar(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.ocp.validate()?;
        self.corridor.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        if self.calibration_samples == 0 || self.bench_samples == 0 || self.path_samples == 0 {
            return Err(Error::InvalidConfig("sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let kv = KeyValues::parse("# header\n\nseed=3\n  epochs = 12   # more\nq = 1, 2,3 ,4\n").unwrap();
        assert_eq!(kv.len(), 3);
        let mut cfg = PipelineConfig::default();
        cfg.apply(&kv).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.ocp.q, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shared_keys_update_every_consumer() {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&KeyValues::parse("v_ref = 0.1\ndt = 0.02\ngains = -1, 2.5").unwrap())
            .unwrap();
        assert_eq!((cfg.ocp.v_ref, cfg.sim.v_ref), (0.1, 0.1));
        assert_eq!((cfg.ocp.dt, cfg.sim.dt), (0.02, 0.02));
        assert_eq!(cfg.gains, PGains { p_t: -1.0, p_n: 2.5 });
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let values = |k: &str| match k {
            "q" => "1,1,1,0",
            "r" => "1,1,1",
            "input_lo" => "-0.2,-0.4,0",
            "input_hi" => "0.2,0.4,0.1",
            "gains" => "1,1",
            "learning_rate" | "grad_tol" | "half_width" | "half_length" | "half_height" | "dt" | "v_ref" => "0.01",
            "validation_fraction" => "0.1",
            "divergence_limit" => "0.3",
            "theta0" | "offset_t" | "offset_n" | "offset_heading" => "0",
            _ => "3",
        };
        let text: String = PipelineConfig::KEYS.iter().map(|k| format!("{k} = {}\n", values(k))).collect();
        let mut cfg = PipelineConfig::default();
        cfg.apply(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(cfg.corridor.n_height, 3);
    }

    #[test]
    fn errors() {
        assert!(KeyValues::parse("seed 3").is_err());
        assert!(KeyValues::parse("= 3").is_err());
        assert!(KeyValues::parse("seed = 1\nseed = 2").is_err());
        let mut cfg = PipelineConfig::default();
        assert!(cfg.apply(&KeyValues::parse("colour = red").unwrap()).is_err());
        assert!(cfg.apply(&KeyValues::parse("epochs = -1").unwrap()).is_err());
        assert!(cfg.apply(&KeyValues::parse("q = 1,2,3").unwrap()).is_err());
        assert!(cfg.apply(&KeyValues::parse("laps = 0").unwrap()).is_err());
        assert!(PipelineConfig::load(Path::new("/nonexistent/cfg")).is_err());
    }

    #[test]
    fn loads_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "n_theta = 20\nn_height = 3\n").unwrap();
        let cfg = PipelineConfig::load(&f).unwrap();
        assert_eq!(cfg.corridor.total_samples(), 20 * 75);
    }
}
