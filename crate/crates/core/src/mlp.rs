//! Fully connected ReLU network approximating the MPFC feedback.
//!
//! Hidden layers compute `h^k = ReLU(b^k + W^k h^{k−1})`; the output layer
//! is affine, since normalized commands take both signs.
//!
//! Model file (`mpfc-mlp v1`, text):
//!
//! ```text
//! mpfc-mlp v1
//! arch 4 48 16 ... 3
//! norm <name> <mu> <sigma>        (7 lines, qx … v)
//! layer <k> <rows> <cols>         (per layer)
//! bias <rows values>
//! weights <cols values>           (rows lines, row-major)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{NormStats, COLUMNS};
use crate::{Error, Result};

const MODEL_HEADER: &str = "mpfc-mlp v1";

/// Layer widths `n_0 … n_{H+1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    pub widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        let arch = Self { widths };
        arch.validate()?;
        Ok(arch)
    }

    /// 4 inputs, hidden layers 48-16-24-16-16-40-24-16-24, 3 outputs.
    pub fn controller() -> Self {
        Self {
            widths: vec![4, 48, 16, 24, 16, 16, 40, 24, 16, 24, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {:?}", self.widths)));
        }
        Ok(())
    }

    /// Check the state-to-input shape used by the controllers.
    pub fn validate_controller(&self) -> Result<()> {
        self.validate()?;
        if self.widths[0] != 4 || *self.widths.last().unwrap() != 3 || self.widths.len() < 3 {
            return Err(Error::Shape(format!(
                "controller network must map 4 inputs to 3 outputs through at least one hidden layer, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// `N_Θ = Σ_k n_k (1 + n_{k−1})`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (1 + w[0])).sum()
    }

    pub fn widest_fan_in(&self) -> usize {
        self.widths[..self.widths.len() - 1].iter().copied().max().unwrap_or(0)
    }
}

/// One affine layer, `weights` row-major with shape `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().zip(self.weights.chunks_exact(self.cols)).map(|(b, row)| {
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Network parameters `Θ` together with the normalization statistics the
/// inference chain needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub layers: Vec<DenseLayer>,
    pub stats: NormStats,
}

impl MlpParams {
    pub fn zeros(arch: MlpArchitecture, stats: NormStats) -> Result<Self> {
        arch.validate()?;
        let layers = arch.widths.windows(2).map(|w| DenseLayer::zeros(w[1], w[0])).collect();
        Ok(Self { arch, layers, stats })
    }

    /// Uniform He initialization `U(±√(6 / fan_in))`, zero biases.
    pub fn init(arch: MlpArchitecture, stats: NormStats, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch, stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut params.layers {
            let limit = (6.0 / layer.cols as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layers.len() != self.arch.widths.len() - 1 {
            return Err(Error::Shape(format!(
                "{} layers for architecture {:?}",
                self.layers.len(),
                self.arch.widths
            )));
        }
        for (k, (layer, w)) in self.layers.iter().zip(self.arch.widths.windows(2)).enumerate() {
            if layer.rows != w[1] || layer.cols != w[0] || layer.weights.len() != w[0] * w[1] || layer.bias.len() != w[1] {
                return Err(Error::Shape(format!("layer {} does not match widths {:?}", k + 1, w)));
            }
            if layer.weights.iter().chain(&layer.bias).any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("layer {} has non-finite parameters", k + 1)));
            }
        }
        self.stats.validate()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Normalized network output for a normalized input.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if k < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Outputs of every layer (post-activation), starting with the input.
    pub fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.affine(acts.last().unwrap(), &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(s, "arch {}", widths.join(" "));
        for (i, name) in COLUMNS.iter().enumerate() {
            let _ = writeln!(s, "norm {name} {:.17e} {:.17e}", self.stats.mu[i], self.stats.sigma[i]);
        }
        for (k, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "layer {} {} {}", k + 1, layer.rows, layer.cols);
            let _ = writeln!(s, "bias {}", join_floats(&layer.bias));
            for row in layer.weights.chunks_exact(layer.cols) {
                let _ = writeln!(s, "weights {}", join_floats(row));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("mlp model", reason);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("unexpected end of file, expected {what}")));

        if next("header")?.trim() != MODEL_HEADER {
            return Err(bad(format!("missing `{MODEL_HEADER}` header")));
        }
        let arch_line = next("arch")?;
        let widths = tagged(arch_line, "arch")?
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| bad(format!("bad width {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let arch = MlpArchitecture::new(widths)?;

        let mut stats = NormStats::default();
        for (i, name) in COLUMNS.iter().enumerate() {
            let fields = tagged(next("norm")?, "norm")?;
            if fields.len() != 3 || fields[0] != *name {
                return Err(bad(format!("expected `norm {name} <mu> <sigma>`")));
            }
            stats.mu[i] = parse_float(fields[1])?;
            stats.sigma[i] = parse_float(fields[2])?;
        }

        let mut layers = Vec::new();
        for (k, w) in arch.widths.windows(2).enumerate() {
            let header = tagged(next("layer")?, "layer")?;
            let expect = [(k + 1).to_string(), w[1].to_string(), w[0].to_string()];
            if header.len() != 3 || header.iter().zip(&expect).any(|(a, b)| a != b) {
                return Err(bad(format!("expected `layer {} {} {}`", k + 1, w[1], w[0])));
            }
            let bias = floats(tagged(next("bias")?, "bias")?, w[1])?;
            let mut weights = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[1] {
                weights.extend(floats(tagged(next("weights")?, "weights")?, w[0])?);
            }
            layers.push(DenseLayer {
                rows: w[1],
                cols: w[0],
                weights,
                bias,
            });
        }
        if lines.next().is_some() {
            return Err(bad("trailing data after last layer".into()));
        }
        let params = Self { arch, layers, stats };
        params.validate()?;
        Ok(params)
    }
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

fn tagged<'a>(line: &'a str, tag: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::format("mlp model", format!("expected `{tag}` line, got {line:?}")));
    }
    Ok(it.collect())
}

fn parse_float(t: &str) -> Result<f64> {
    t.parse::<f64>()
        .map_err(|_| Error::format("mlp model", format!("not a number: {t:?}")))
}

fn floats(tokens: Vec<&str>, n: usize) -> Result<Vec<f64>> {
    if tokens.len() != n {
        return Err(Error::format("mlp model", format!("expected {n} values, found {}", tokens.len())));
    }
    tokens.into_iter().map(parse_float).collect()
}

/// Mean over samples and output components of the squared residual.
pub fn mse<X: AsRef<[f64]>, Y: AsRef<[f64]>>(params: &MlpParams, inputs: &[X], targets: &[Y]) -> Result<f64> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in inputs.iter().zip(targets) {
        let out = params.forward(x.as_ref());
        for (o, t) in out.iter().zip(y.as_ref()) {
            total += (o - t) * (o - t);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.5e-4,
            batch_size: 1024,
            epochs: 30,
            seed: 0,
            validation_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: MlpParams,
    pub best_epoch: usize,
    pub train_mse: f64,
    pub validation_mse: f64,
    /// Validation MSE after each epoch.
    pub history: Vec<f64>,
}

/// Backpropagation of the squared error for one sample, accumulated into `grads`.
fn accumulate_gradient(params: &MlpParams, x: &[f64], y: &[f64], grads: &mut [DenseLayer], scale: f64) {
    let acts = params.activations(x);
    let last = params.layers.len() - 1;
    let out = &acts[last + 1];
    let mut delta: Vec<f64> = out.iter().zip(y).map(|(o, t)| 2.0 * (o - t) * scale).collect();
    for k in (0..=last).rev() {
        let layer = &params.layers[k];
        let input = &acts[k];
        let g = &mut grads[k];
        for (r, d) in delta.iter().enumerate() {
            g.bias[r] += d;
            let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
            for (gw, a) in row.iter_mut().zip(input) {
                *gw += d * a;
            }
        }
        if k == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.cols];
        for (r, d) in delta.iter().enumerate() {
            let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            for (p, w) in prev.iter_mut().zip(row) {
                *p += d * w;
            }
        }
        // ReLU derivative of the previous hidden layer.
        for (p, a) in prev.iter_mut().zip(input) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
}

/// Gradient of the MSE over a set of samples.
pub fn mse_gradient<X: AsRef<[f64]>, Y: AsRef<[f64]>>(params: &MlpParams, inputs: &[X], targets: &[Y]) -> Vec<DenseLayer> {
    let mut grads: Vec<DenseLayer> = params.layers.iter().map(|l| DenseLayer::zeros(l.rows, l.cols)).collect();
    let scale = 1.0 / (inputs.len() * params.arch.output_width()) as f64;
    for (x, y) in inputs.iter().zip(targets) {
        accumulate_gradient(params, x.as_ref(), y.as_ref(), &mut grads, scale);
    }
    grads
}

struct Adam {
    m: Vec<DenseLayer>,
    v: Vec<DenseLayer>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &MlpParams) -> Self {
        let zeros = || params.layers.iter().map(|l| DenseLayer::zeros(l.rows, l.cols)).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut MlpParams, grads: &[DenseLayer], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for (k, layer) in params.layers.iter_mut().enumerate() {
            let (g, m, v) = (&grads[k], &mut self.m[k], &mut self.v[k]);
            for i in 0..layer.weights.len() {
                step(&mut layer.weights[i], g.weights[i], &mut m.weights[i], &mut v.weights[i]);
            }
            for i in 0..layer.bias.len() {
                step(&mut layer.bias[i], g.bias[i], &mut m.bias[i], &mut v.bias[i]);
            }
        }
    }
}

fn check_training_inputs<X, Y>(inputs: &[X], targets: &[Y], arch: &MlpArchitecture, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    arch.validate_controller()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    Ok(())
}

fn run_epoch(
    params: &mut MlpParams,
    adam: &mut Adam,
    order: &mut [usize],
    inputs: &[[f64; 4]],
    targets: &[[f64; 3]],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) {
    order.shuffle(rng);
    for batch in order.chunks(cfg.batch_size) {
        let bx: Vec<[f64; 4]> = batch.iter().map(|&i| inputs[i]).collect();
        let by: Vec<[f64; 3]> = batch.iter().map(|&i| targets[i]).collect();
        let grads = mse_gradient(params, &bx, &by);
        adam.update(params, &grads, cfg.learning_rate);
    }
}

/// Train on every sample for `cfg.epochs` epochs and return the final
/// parameters. `validation_fraction` is ignored.
pub fn fit(
    inputs: &[[f64; 4]],
    targets: &[[f64; 3]],
    arch: &MlpArchitecture,
    stats: NormStats,
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    check_training_inputs(inputs, targets, arch, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::init(arch.clone(), stats, rng.gen())?;
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=cfg.epochs {
        run_epoch(&mut params, &mut adam, &mut order, inputs, targets, cfg, &mut rng);
        let loss = mse(&params, inputs, targets)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("training MSE is {loss}"),
            });
        }
    }
    Ok(params)
}

/// Fit the network to normalized `(z̄, w̄)` pairs by mini-batch Adam on
/// the MSE, returning the parameters with the lowest validation MSE.
///
/// Deterministic for a given seed: initialization, the validation split
/// and the per-epoch shuffles all derive from it.
pub fn train(
    inputs: &[[f64; 4]],
    targets: &[[f64; 3]],
    arch: &MlpArchitecture,
    stats: NormStats,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_training_inputs(inputs, targets, arch, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::init(arch.clone(), stats, rng.gen())?;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((inputs.len() as f64 * cfg.validation_fraction).round() as usize).clamp(
        usize::from(inputs.len() > 1),
        inputs.len().saturating_sub(1),
    );
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let gather = |idx: &[usize]| -> (Vec<[f64; 4]>, Vec<[f64; 3]>) { idx.iter().map(|&i| (inputs[i], targets[i])).unzip() };
    // With a single sample there is nothing to hold out; validate on it.
    let (val_x, val_y) = if val_idx.is_empty() { gather(&train_idx) } else { gather(val_idx) };

    let mut adam = Adam::new(&params);
    let mut best = (mse(&params, &val_x, &val_y)?, params.clone(), 0usize);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        run_epoch(&mut params, &mut adam, &mut train_idx, inputs, targets, cfg, &mut rng);
        let val = mse(&params, &val_x, &val_y)?;
        if !val.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: format!("validation MSE is {val}"),
            });
        }
        history.push(val);
        if val < best.0 {
            best = (val, params.clone(), epoch);
        }
    }
    let (validation_mse, params, best_epoch) = best;
    let (tx, ty) = gather(&train_idx);
    let train_mse = mse(&params, &tx, &ty)?;
    Ok(TrainReport {
        params,
        best_epoch,
        train_mse,
        validation_mse,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(widths: Vec<usize>, seed: u64) -> MlpParams {
        let mut p = MlpParams::init(MlpArchitecture::new(widths).unwrap(), NormStats::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    // Naive matrix-multiply oracle with explicit index loops.
    fn forward_oracle(p: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (k, l) in p.layers.iter().enumerate() {
            let mut out = vec![0.0; l.rows];
            for r in 0..l.rows {
                let mut acc = l.bias[r];
                for c in 0..l.cols {
                    acc += l.weights[r * l.cols + c] * h[c];
                }
                out[r] = if k + 1 < p.layers.len() { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(MlpArchitecture::controller().param_count(), 4651);
        assert_eq!(MlpArchitecture::new(vec![1, 1]).unwrap().param_count(), 2);
        assert_eq!(MlpArchitecture::new(vec![4, 8, 3]).unwrap().param_count(), 67);
        let p = MlpParams::zeros(MlpArchitecture::controller(), NormStats::default()).unwrap();
        assert_eq!(p.param_count(), 4651);
        assert_eq!(MlpArchitecture::controller().hidden_layers(), 9);
        assert_eq!(MlpArchitecture::controller().widest_fan_in(), 48);
    }

    #[test]
    fn architecture_validation() {
        assert!(MlpArchitecture::new(vec![4]).is_err());
        assert!(MlpArchitecture::new(vec![4, 0, 3]).is_err());
        assert!(MlpArchitecture::new(vec![4, 3]).unwrap().validate_controller().is_err());
        assert!(MlpArchitecture::new(vec![2, 8, 3]).unwrap().validate_controller().is_err());
        assert!(MlpArchitecture::controller().validate_controller().is_ok());
    }

    #[test]
    fn forward_examples() {
        let mut p = MlpParams::zeros(MlpArchitecture::new(vec![4, 5, 3]).unwrap(), NormStats::default()).unwrap();
        p.layers[1].bias = vec![0.25, -1.5, 3.0];
        assert_eq!(p.forward(&[1.0, -2.0, 3.0, 0.5]), vec![0.25, -1.5, 3.0]);

        let mut p = MlpParams::zeros(MlpArchitecture::new(vec![1, 1, 1]).unwrap(), NormStats::default()).unwrap();
        p.layers[0].weights = vec![1.0];
        p.layers[0].bias = vec![-1.0];
        p.layers[1].weights = vec![1.0];
        let acts = p.activations(&[0.5]);
        assert_eq!(acts[1], vec![0.0]);
        assert_eq!(p.forward(&[0.5]), vec![0.0]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let p = tiny(MlpArchitecture::controller().widths, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = p.forward(&x);
            let b = forward_oracle(&p, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-6);
            }
            for act in &p.activations(&x)[1..p.layers.len()] {
                assert!(act.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn piecewise_linear_between_kinks() {
        let p = tiny(vec![4, 6, 5, 3], 9);
        let x0 = [0.3, -0.2, 0.8, 0.1];
        let dir = [0.01, 0.02, -0.01, 0.005];
        let pattern = |x: &[f64]| -> Vec<bool> {
            p.activations(x)[1..p.layers.len()].iter().flatten().map(|a| *a > 0.0).collect()
        };
        let pts: Vec<Vec<f64>> = [0.0, 0.5, 1.0]
            .iter()
            .map(|t| x0.iter().zip(&dir).map(|(a, d)| a + t * d).collect())
            .collect();
        assert_eq!(pattern(&pts[0]), pattern(&pts[2]), "segment crosses a kink; pick another");
        assert_eq!(pattern(&pts[0]), pattern(&pts[1]));
        let ys: Vec<Vec<f64>> = pts.iter().map(|x| p.forward(x)).collect();
        for i in 0..3 {
            assert!((ys[1][i] - 0.5 * (ys[0][i] + ys[2][i])).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_examples() {
        let p = tiny(vec![4, 4, 3], 5);
        let xs: Vec<[f64; 4]> = (0..20).map(|i| [i as f64 * 0.1, 0.2, -0.3, 0.05 * i as f64]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| p.forward(x)).collect();
        assert_eq!(mse(&p, &xs, &ys).unwrap(), 0.0);

        let zero = MlpParams::zeros(MlpArchitecture::new(vec![4, 4, 3]).unwrap(), NormStats::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets: Vec<[f64; 3]> = (0..20).map(|_| [rng.gen_range(-1.0..1.0), 0.5, -0.5]).collect();
        let mut naive = 0.0;
        for t in &targets {
            for v in t {
                naive += v * v;
            }
        }
        naive /= 60.0;
        assert!((mse(&zero, &xs, &targets).unwrap() - naive).abs() < 1e-10);
        assert!(mse(&zero, &xs[..3], &targets).is_err());
    }

    #[test]
    fn zero_network_on_unit_variance_labels() {
        let zero = MlpParams::zeros(MlpArchitecture::new(vec![4, 4, 3]).unwrap(), NormStats::default()).unwrap();
        // ±1 labels have zero mean and unit variance exactly.
        let xs = vec![[0.0; 4]; 10];
        let ys: Vec<[f64; 3]> = (0..10).map(|i| if i % 2 == 0 { [1.0; 3] } else { [-1.0; 3] }).collect();
        assert!((mse(&zero, &xs, &ys).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let p = tiny(vec![4, 4, 3, 3], 17);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<[f64; 4]> = (0..6).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let ys: Vec<[f64; 3]> = (0..6).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let grads = mse_gradient(&p, &xs, &ys);
        let h = 1e-6;
        for k in 0..p.layers.len() {
            for i in 0..p.layers[k].weights.len() + p.layers[k].bias.len() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                let nw = p.layers[k].weights.len();
                let (a, b, g) = if i < nw {
                    pp.layers[k].weights[i] += h;
                    pm.layers[k].weights[i] -= h;
                    (&pp, &pm, grads[k].weights[i])
                } else {
                    pp.layers[k].bias[i - nw] += h;
                    pm.layers[k].bias[i - nw] -= h;
                    (&pp, &pm, grads[k].bias[i - nw])
                };
                let fd = (mse(a, &xs, &ys).unwrap() - mse(b, &xs, &ys).unwrap()) / (2.0 * h);
                assert!((g - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "layer {k} param {i}: {g} vs {fd}");
            }
        }
    }

    fn toy_set(n: usize) -> (Vec<[f64; 4]>, Vec<[f64; 3]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let xs: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let ys = xs
            .iter()
            .map(|x| [x[0] * x[1] + 0.3 * x[2], (x[3] * 2.0).sin(), x[0] - x[2].abs()])
            .collect();
        (xs, ys)
    }

    #[test]
    fn memorizes_a_toy_set() {
        let (xs, ys) = toy_set(32);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            epochs: 2000,
            seed: 1,
            validation_fraction: 0.05,
        };
        let params = fit(&xs, &ys, &MlpArchitecture::new(vec![4, 32, 32, 3]).unwrap(), NormStats::default(), &cfg).unwrap();
        let m = mse(&params, &xs, &ys).unwrap();
        assert!(m <= 1e-4, "train mse {m}");
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, ys) = toy_set(200);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            seed: 42,
            ..TrainConfig::default()
        };
        let arch = MlpArchitecture::new(vec![4, 8, 8, 3]).unwrap();
        let a = train(&xs, &ys, &arch, NormStats::default(), &cfg).unwrap();
        let b = train(&xs, &ys, &arch, NormStats::default(), &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
        let c = train(&xs, &ys, &arch, NormStats::default(), &TrainConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn training_rejects_bad_input() {
        let (xs, ys) = toy_set(10);
        let arch = MlpArchitecture::new(vec![4, 8, 3]).unwrap();
        assert!(matches!(
            train(&[], &[], &arch, NormStats::default(), &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(&xs, &ys, &arch, NormStats::default(), &bad).is_err());
        let diverging = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..TrainConfig::default()
        };
        let huge: Vec<[f64; 3]> = ys.iter().map(|y| y.map(|v| v * 1e300)).collect();
        assert!(matches!(
            train(&xs, &huge, &arch, NormStats::default(), &diverging),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn model_file_roundtrip_and_errors() {
        let mut p = tiny(MlpArchitecture::controller().widths, 8);
        p.stats.mu = [0.1, -0.2, 0.3, 3.1, 0.05, 0.01, 0.12];
        p.stats.sigma = [0.07, 1.4, 1.9, 1.8, 0.1, 0.2, 0.03];
        let text = p.to_text();
        assert!(text.starts_with("mpfc-mlp v1\narch 4 48 16 24 16 16 40 24 16 24 3\nnorm qx "));
        assert_eq!(MlpParams::from_text(&text).unwrap(), p);

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.txt");
        p.save(&f).unwrap();
        assert_eq!(MlpParams::load(&f).unwrap(), p);

        assert!(MlpParams::from_text(&text.replacen("mpfc-mlp v1", "mpfc-mlp v2", 1)).is_err());
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(MlpParams::from_text(&truncated).is_err());
        assert!(MlpParams::from_text(&format!("{text}extra 1\n")).is_err());
        assert!(MlpParams::load(&dir.path().join("missing.txt")).is_err());
    }
}
