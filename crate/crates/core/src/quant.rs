//! Post-training int8 quantization and an integer inference kernel.
//!
//! Every tensor uses one asymmetric `(scale, zero_point)` pair. Weights and
//! activations are int8, biases int32 at scale `s_in · s_w` with zero point
//! 0. A layer accumulates in i32 and requantizes with one real multiplier
//! `s_in · s_w / s_out`; hidden layers fuse ReLU by clamping at the output
//! zero point.
//!
//! Quantized model file, little-endian:
//!
//! ```text
//! magic        7 bytes  "MPFCQN1"
//! n_widths     u32
//! widths       u32 × n_widths
//! norm stats   7 × (mu f64, sigma f64)       qx qy phi theta s omega v
//! input qp     scale f64, zero_point i8
//! output qp    scale f64, zero_point i8
//! per layer k = 1 … H+1:
//!   weight qp  scale f64, zero_point i8
//!   act qp     scale f64, zero_point i8
//!   weights    i8 × (n_k · n_{k−1}), row-major
//!   biases     i32 × n_k
//! ```

use std::path::Path;

use crate::dataset::NormStats;
use crate::mlp::{MlpArchitecture, MlpParams};
use crate::{Error, Result};

const QMODEL_MAGIC: &[u8; 7] = b"MPFCQN1";
const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i8,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i8) -> Result<Self> {
        let qp = Self { scale, zero_point };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Shape(format!("quantization scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Parameters covering `[lo, hi] ∪ {0}` with the 256 int8 levels.
    pub fn from_range(lo: f64, hi: f64) -> Self {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let scale = ((hi - lo) / 255.0).max(SCALE_FLOOR);
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i8;
        Self { scale, zero_point }
    }

    pub fn from_values<'a>(xs: impl IntoIterator<Item = &'a f64>) -> Self {
        let (lo, hi) = xs
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        Self::from_range(lo, hi)
    }

    /// Smallest and largest representable reals.
    pub fn range(&self) -> (f64, f64) {
        (dequantize_value(-128, *self), dequantize_value(127, *self))
    }
}

/// `clamp(round(x / scale) + zero_point)`, rounding half away from zero.
pub fn quantize_value(x: f64, qp: QuantParams) -> i8 {
    saturate_i8((x / qp.scale).round() + f64::from(qp.zero_point), -128)
}

pub fn dequantize_value(q: i8, qp: QuantParams) -> f64 {
    f64::from(i32::from(q) - i32::from(qp.zero_point)) * qp.scale
}

fn saturate_i8(x: f64, lo: i8) -> i8 {
    // NaN maps to the zero of the lower clamp, like `as` casts do.
    x.clamp(f64::from(lo), 127.0) as i8
}

fn saturate_i32(x: f64) -> i32 {
    x.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_qp: QuantParams,
    /// Parameters of this layer's output activation.
    pub act_qp: QuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMlp {
    pub arch: MlpArchitecture,
    pub layers: Vec<QuantLayer>,
    pub input_qp: QuantParams,
    pub output_qp: QuantParams,
    pub stats: NormStats,
}

/// Quantize a float network, calibrating activation ranges by running it
/// over `calibration` (normalized inputs).
pub fn quantize_model(params: &MlpParams, calibration: &[[f64; 4]]) -> Result<QuantizedMlp> {
    params.validate()?;
    if calibration.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if calibration.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("calibration inputs must be finite".into()));
    }
    if params.arch.input_width() != 4 {
        return Err(Error::Shape(format!("expected 4 inputs, network has {}", params.arch.input_width())));
    }
    let n_layers = params.layers.len();
    let mut lo = vec![f64::INFINITY; n_layers + 1];
    let mut hi = vec![f64::NEG_INFINITY; n_layers + 1];
    for x in calibration {
        for (k, act) in params.activations(x).iter().enumerate() {
            for &a in act {
                lo[k] = lo[k].min(a);
                hi[k] = hi[k].max(a);
            }
        }
    }
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return Err(Error::Shape("calibration produced non-finite activations".into()));
    }
    let act_qps: Vec<QuantParams> = lo.iter().zip(&hi).map(|(&l, &h)| QuantParams::from_range(l, h)).collect();

    let layers = params
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let s_in = act_qps[k].scale;
            let weight_qp = QuantParams::from_values(&layer.weights);
            let bias_scale = s_in * weight_qp.scale;
            QuantLayer {
                rows: layer.rows,
                cols: layer.cols,
                weights: layer.weights.iter().map(|&w| quantize_value(w, weight_qp)).collect(),
                bias: layer.bias.iter().map(|&b| saturate_i32((b / bias_scale).round())).collect(),
                weight_qp,
                act_qp: act_qps[k + 1],
            }
        })
        .collect();
    Ok(QuantizedMlp {
        arch: params.arch.clone(),
        layers,
        input_qp: act_qps[0],
        output_qp: act_qps[n_layers],
        stats: params.stats,
    })
}

impl QuantizedMlp {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.widths.len() - 1 {
            return Err(Error::Shape("layer count does not match architecture".into()));
        }
        for (k, (l, w)) in self.layers.iter().zip(self.arch.widths.windows(2)).enumerate() {
            if l.rows != w[1] || l.cols != w[0] || l.weights.len() != w[0] * w[1] || l.bias.len() != w[1] {
                return Err(Error::Shape(format!("layer {} does not match widths {:?}", k + 1, w)));
            }
            l.weight_qp.validate()?;
            l.act_qp.validate()?;
        }
        self.input_qp.validate()?;
        self.output_qp.validate()?;
        if self.layers.last().map(|l| l.act_qp) != Some(self.output_qp) {
            return Err(Error::Shape("output parameters differ from the last layer's activation parameters".into()));
        }
        self.stats.validate()
    }

    pub fn weight_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn bias_bytes(&self) -> usize {
        self.layers.iter().map(|l| 4 * l.bias.len()).sum()
    }

    /// Integer forward pass on already quantized inputs; returns the int8
    /// output of the last layer.
    pub fn forward_int(&self, input: &[i8]) -> Vec<i8> {
        let mut cur = input.to_vec();
        let mut in_qp = self.input_qp;
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let zp_in = i32::from(in_qp.zero_point);
            let zp_w = i32::from(l.weight_qp.zero_point);
            let multiplier = in_qp.scale * l.weight_qp.scale / l.act_qp.scale;
            let floor = if k < last { l.act_qp.zero_point } else { -128 };
            let next = l
                .bias
                .iter()
                .zip(l.weights.chunks_exact(l.cols))
                .map(|(&b, row)| {
                    let acc = row
                        .iter()
                        .zip(&cur)
                        .fold(b, |acc, (&w, &x)| acc + (i32::from(w) - zp_w) * (i32::from(x) - zp_in));
                    saturate_i8((f64::from(acc) * multiplier).round() + f64::from(l.act_qp.zero_point), floor)
                })
                .collect();
            cur = next;
            in_qp = l.act_qp;
        }
        cur
    }

    /// Quantize, run the integer kernel, dequantize. Input and output are
    /// normalized.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let q: Vec<i8> = x.iter().map(|&v| quantize_value(v, self.input_qp)).collect();
        self.forward_int(&q)
            .into_iter()
            .map(|v| dequantize_value(v, self.output_qp))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + self.weight_bytes() + self.bias_bytes() + 20 * self.layers.len());
        b.extend_from_slice(QMODEL_MAGIC);
        b.extend_from_slice(&(self.arch.widths.len() as u32).to_le_bytes());
        for &w in &self.arch.widths {
            b.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for i in 0..7 {
            b.extend_from_slice(&self.stats.mu[i].to_le_bytes());
            b.extend_from_slice(&self.stats.sigma[i].to_le_bytes());
        }
        let put_qp = |b: &mut Vec<u8>, qp: &QuantParams| {
            b.extend_from_slice(&qp.scale.to_le_bytes());
            b.extend_from_slice(&qp.zero_point.to_le_bytes());
        };
        put_qp(&mut b, &self.input_qp);
        put_qp(&mut b, &self.output_qp);
        for l in &self.layers {
            put_qp(&mut b, &l.weight_qp);
            put_qp(&mut b, &l.act_qp);
            b.extend(l.weights.iter().map(|w| w.to_le_bytes()[0]));
            for x in &l.bias {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(7)? != QMODEL_MAGIC {
            return Err(Error::format("quantized model", "bad magic"));
        }
        let n = r.u32()? as usize;
        if n > 1024 {
            return Err(Error::format("quantized model", format!("implausible layer count {n}")));
        }
        let widths = (0..n).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let arch = MlpArchitecture::new(widths).map_err(|e| Error::format("quantized model", e.to_string()))?;
        let mut stats = NormStats::default();
        for i in 0..7 {
            stats.mu[i] = r.f64()?;
            stats.sigma[i] = r.f64()?;
        }
        let input_qp = r.qp()?;
        let output_qp = r.qp()?;
        let mut layers = Vec::new();
        for w in arch.widths.windows(2) {
            let weight_qp = r.qp()?;
            let act_qp = r.qp()?;
            let weights = r.take(w[0] * w[1])?.iter().map(|&b| b as i8).collect();
            let bias = (0..w[1]).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
            layers.push(QuantLayer {
                rows: w[1],
                cols: w[0],
                weights,
                bias,
                weight_qp,
                act_qp,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("quantized model", "trailing bytes after last layer"));
        }
        let q = Self {
            arch,
            layers,
            input_qp,
            output_qp,
            stats,
        };
        q.validate().map_err(|e| Error::format("quantized model", e.to_string()))?;
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("quantized model", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn qp(&mut self) -> Result<QuantParams> {
        let scale = self.f64()?;
        let zero_point = i8::from_le_bytes(self.array()?);
        QuantParams::new(scale, zero_point).map_err(|e| Error::format("quantized model", e.to_string()))
    }
}
