//! Small fully-connected networks: ReLU hidden layers, linear output,
//! Adam on minibatch MSE (or a caller-supplied objective), and a compact
//! binary file format.
//!
//! Batches are column-major: one sample per column.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"FIMNET\0\0";
pub const FORMAT_VERSION: u32 = 1;
/// Standard deviations below this are treated as this value when normalizing.
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("not a network file (bad magic)")]
    BadMagic,
    #[error("unsupported network file version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("malformed network file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Statistics over the given columns of `data`.
    pub fn fit(data: &DMatrix<f64>, columns: &[usize]) -> Self {
        let dim = data.nrows();
        let n = columns.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        for &c in columns {
            for r in 0..dim {
                mean[r] += data[(r, c)];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for &c in columns {
            for r in 0..dim {
                var[r] += (data[(r, c)] - mean[r]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for mut col in out.column_iter_mut() {
            for r in 0..col.len() {
                col[r] = (col[r] - self.mean[r]) / self.std[r];
            }
        }
        out
    }

    pub fn invert(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for mut col in out.column_iter_mut() {
            for r in 0..col.len() {
                col[r] = col[r] * self.std[r] + self.mean[r];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    /// Refit input/target standardization on the train split before training.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.1,
            normalize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(NetError::InvalidConfig("validation_fraction must lie in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NetError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(NetError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses measured on the full train and validation splits after
/// the epoch's updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

impl TrainReport {
    pub fn final_val(&self) -> f64 {
        self.val_loss.last().copied().unwrap_or(f64::NAN)
    }
}

/// Gradients of a scalar loss, laid out like the network's parameters.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }
}

fn flatten(weights: &[DMatrix<f64>], biases: &[DVector<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in weights.iter().zip(biases) {
        out.extend(w.iter());
        out.extend(b.iter());
    }
    out
}

/// Multilayer perceptron with standardization stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    layer_sizes: Vec<usize>,
    /// `weights[l]` maps layer l to layer l + 1 (shape out x in).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    /// Free-form description stored in the file header.
    pub tag: String,
}

struct Cache {
    /// Activations per layer, `acts[0]` being the (normalized) input.
    acts: Vec<DMatrix<f64>>,
}

impl DenseNetwork {
    /// He-uniform initialisation, zero biases, identity normalization.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2 && layer_sizes.iter().all(|&n| n > 0), "need at least two non-empty layers");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit)));
            biases.push(DVector::zeros(fan_out));
        }
        Self::from_parts(layer_sizes.to_vec(), weights, biases)
    }

    /// Default architecture: two hidden layers of 256 units.
    pub fn standard(input: usize, output: usize, seed: u64) -> Self {
        Self::new(&[input, 256, 256, output], seed)
    }

    pub fn from_parts(layer_sizes: Vec<usize>, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Self {
        let input = layer_sizes[0];
        let output = *layer_sizes.last().unwrap();
        Self {
            layer_sizes,
            weights,
            biases,
            input_norm: Normalizer::identity(input),
            output_norm: Normalizer::identity(output),
            tag: String::new(),
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.weights, &self.biases)
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), NetError> {
        if values.len() != self.parameter_count() {
            return Err(NetError::DimensionMismatch { expected: self.parameter_count(), got: values.len() });
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    /// Single-sample prediction in original units.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        let input = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.forward_batch(&input)?.as_slice().to_vec())
    }

    /// Batched prediction in original units (one sample per column).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, NetError> {
        if x.nrows() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: x.nrows() });
        }
        let raw = self.forward_raw(&self.input_norm.apply(x));
        Ok(self.output_norm.invert(&raw))
    }

    /// Forward pass in normalized space.
    pub fn forward_raw(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        Cache { acts }
    }

    fn backward(&self, cache: &Cache, d_out: DMatrix<f64>) -> Gradients {
        let layers = self.weights.len();
        let mut weights = vec![DMatrix::zeros(0, 0); layers];
        let mut biases = vec![DVector::zeros(0); layers];
        let mut delta = d_out;
        for l in (0..layers).rev() {
            let input = &cache.acts[l];
            weights[l] = &delta * input.transpose();
            biases[l] = delta.column_sum();
            if l > 0 {
                let mut prev = self.weights[l].transpose() * &delta;
                // ReLU derivative from the stored post-activation
                prev.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = prev;
            }
        }
        Gradients { weights, biases }
    }

    /// MSE over all entries and its gradient, both in normalized space.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Gradients) {
        let cache = self.forward_cached(x);
        let pred = cache.acts.last().unwrap();
        let diff = pred - y;
        let count = diff.len() as f64;
        let loss = diff.norm_squared() / count;
        let grads = self.backward(&cache, diff * (2.0 / count));
        (loss, grads)
    }

    /// Supervised training on MSE. Inputs and targets hold one sample per
    /// column; losses in the report are MSE in original target units.
    pub fn train(&mut self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, cfg: &TrainConfig) -> Result<TrainReport, NetError> {
        cfg.validate()?;
        let n = inputs.ncols();
        if n == 0 {
            return Err(NetError::EmptyDataset);
        }
        if inputs.nrows() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: inputs.nrows() });
        }
        if targets.nrows() != self.output_dim() || targets.ncols() != n {
            return Err(NetError::DimensionMismatch { expected: self.output_dim(), got: targets.nrows() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (train_idx, val_idx) = split(n, cfg.validation_fraction, &mut rng);
        if cfg.normalize {
            self.input_norm = Normalizer::fit(inputs, &train_idx);
            self.output_norm = Normalizer::fit(targets, &train_idx);
        }
        let xn = self.input_norm.apply(inputs);
        let yn = self.output_norm.apply(targets);
        let mse = |net: &DenseNetwork, idx: &[usize]| -> f64 {
            let xs = xn.select_columns(idx);
            let pred = net.output_norm.invert(&net.forward_raw(&xs));
            (pred - targets.select_columns(idx)).norm_squared() / (idx.len() * net.output_dim()) as f64
        };

        let mut adam = Adam::new(self, cfg);
        let mut report = TrainReport::default();
        let mut order = train_idx.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (loss, grads) = self.loss_and_gradient(&xn.select_columns(batch), &yn.select_columns(batch));
                if !loss.is_finite() {
                    return Err(NetError::Diverged { epoch });
                }
                adam.step(self, &grads);
            }
            let (tl, vl) = (mse(self, &train_idx), mse(self, &val_idx));
            if !tl.is_finite() || !vl.is_finite() {
                return Err(NetError::Diverged { epoch });
            }
            log::debug!("{} epoch {epoch}: train {tl:.3e} val {vl:.3e}", self.tag);
            report.train_loss.push(tl);
            report.val_loss.push(vl);
        }
        Ok(report)
    }

    /// Training against an arbitrary differentiable objective. `objective`
    /// receives the sample indices of a batch and the network outputs in
    /// original units, and returns the mean loss together with its gradient
    /// with respect to those outputs. Normalization is left unchanged.
    pub fn train_with<F>(&mut self, inputs: &DMatrix<f64>, cfg: &TrainConfig, mut objective: F) -> Result<TrainReport, NetError>
    where
        F: FnMut(&[usize], &DMatrix<f64>) -> (f64, DMatrix<f64>),
    {
        cfg.validate()?;
        let n = inputs.ncols();
        if n == 0 {
            return Err(NetError::EmptyDataset);
        }
        if inputs.nrows() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: inputs.nrows() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (train_idx, val_idx) = split(n, cfg.validation_fraction, &mut rng);
        let xn = self.input_norm.apply(inputs);
        let std = DVector::from_vec(self.output_norm.std.clone());

        let evaluate = |net: &DenseNetwork, idx: &[usize], objective: &mut F| -> f64 {
            let mut total = 0.0;
            for chunk in idx.chunks(1024) {
                let out = net.output_norm.invert(&net.forward_raw(&xn.select_columns(chunk)));
                total += objective(chunk, &out).0 * chunk.len() as f64;
            }
            total / idx.len() as f64
        };

        let mut adam = Adam::new(self, cfg);
        let mut report = TrainReport::default();
        let mut order = train_idx.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let cache = self.forward_cached(&xn.select_columns(batch));
                let out = self.output_norm.invert(cache.acts.last().unwrap());
                let (loss, mut d_out) = objective(batch, &out);
                if !loss.is_finite() {
                    return Err(NetError::Diverged { epoch });
                }
                for mut col in d_out.column_iter_mut() {
                    col.component_mul_assign(&std);
                }
                let grads = self.backward(&cache, d_out);
                adam.step(self, &grads);
            }
            let tl = evaluate(self, &train_idx, &mut objective);
            let vl = evaluate(self, &val_idx, &mut objective);
            if !tl.is_finite() || !vl.is_finite() {
                return Err(NetError::Diverged { epoch });
            }
            log::debug!("{} epoch {epoch}: train {tl:.3e} val {vl:.3e}", self.tag);
            report.train_loss.push(tl);
            report.val_loss.push(vl);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to<W: Write + ?Sized>(&self, out: &mut W) -> Result<(), NetError> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            out.write_all(&(s as u64).to_le_bytes())?;
        }
        out.write_all(&(self.tag.len() as u32).to_le_bytes())?;
        out.write_all(self.tag.as_bytes())?;
        let norms = [&self.input_norm.mean, &self.input_norm.std, &self.output_norm.mean, &self.output_norm.std];
        for v in norms.into_iter().flatten().chain(self.params().iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NetError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NetError::UnsupportedVersion { found: version });
        }
        let layers = r.u32()? as usize;
        if !(2..=64).contains(&layers) {
            return Err(NetError::Malformed(format!("implausible layer count {layers}")));
        }
        let mut sizes = Vec::with_capacity(layers);
        for _ in 0..layers {
            let s = r.u64()?;
            if s == 0 || s > 1 << 20 {
                return Err(NetError::Malformed(format!("implausible layer size {s}")));
            }
            sizes.push(s as usize);
        }
        let tag_len = r.u32()? as usize;
        let tag = String::from_utf8(r.take(tag_len)?.to_vec()).map_err(|_| NetError::Malformed("tag is not UTF-8".into()))?;
        let (input, output) = (sizes[0], sizes[layers - 1]);
        let input_norm = Normalizer { mean: r.f64s(input)?, std: r.f64s(input)? };
        let output_norm = Normalizer { mean: r.f64s(output)?, std: r.f64s(output)? };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            weights.push(DMatrix::from_column_slice(pair[1], pair[0], &r.f64s(pair[0] * pair[1])?));
            biases.push(DVector::from_vec(r.f64s(pair[1])?));
        }
        if r.pos != bytes.len() {
            return Err(NetError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut net = Self::from_parts(sizes, weights, biases);
        net.input_norm = input_norm;
        net.output_norm = output_norm;
        net.tag = tag;
        Ok(net)
    }
}

fn split(n: usize, validation_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if n < 2 {
        return (idx.clone(), idx);
    }
    let val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(val);
    (train, idx)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NetError::Malformed("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NetError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NetError::Malformed("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(net: &DenseNetwork, cfg: &TrainConfig) -> Self {
        let n = net.parameter_count();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut k = 0;
        let params = net.weights.iter_mut().zip(net.biases.iter_mut());
        for ((w, b), (gw, gb)) in params.zip(grads.weights.iter().zip(&grads.biases)) {
            for (p, g) in w.iter_mut().chain(b.iter_mut()).zip(gw.iter().chain(gb.iter())) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_fixture(n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(1, n, |_, j| -1.0 + 2.0 * j as f64 / (n - 1) as f64);
        let y = x.map(|v| 2.0 * v);
        (x, y)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = DenseNetwork::new(&[3, 5, 2], 1);
        net.set_params(&vec![0.0; net.parameter_count()]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let net = DenseNetwork::from_parts(vec![3, 3], vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)]);
        assert_eq!(net.forward(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let w = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
        let b = vec![DVector::from_vec(vec![-10.0, -10.0]), DVector::zeros(2)];
        let net = DenseNetwork::from_parts(vec![2, 2, 2], w, b);
        assert_eq!(net.forward(&[1.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let net = DenseNetwork::new(&[3, 4, 2], 0);
        assert!(matches!(net.forward(&[1.0]), Err(NetError::DimensionMismatch { expected: 3, got: 1 })));
    }

    #[test]
    fn fits_a_line() {
        let (x, y) = linear_fixture(1000);
        let mut net = DenseNetwork::new(&[1, 32, 32, 1], 3);
        let report = net.train(&x, &y, &TrainConfig { batch_size: 16, ..TrainConfig::default() }).unwrap();
        assert_eq!(report.train_loss.len(), 20);
        assert!(report.final_val() < 1e-3, "val mse {}", report.final_val());
        let p = net.forward(&[0.25]).unwrap()[0];
        assert!((p - 0.5).abs() < 0.05);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = linear_fixture(200);
        let cfg = TrainConfig { epochs: 5, seed: 9, ..TrainConfig::default() };
        let mut a = DenseNetwork::new(&[1, 8, 1], 2);
        let mut b = a.clone();
        let ra = a.train(&x, &y, &cfg).unwrap();
        let rb = b.train(&x, &y, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn small_learning_rate_gives_monotone_training_loss() {
        let (x, y) = linear_fixture(400);
        let mut net = DenseNetwork::new(&[1, 16, 1], 5);
        let cfg = TrainConfig { learning_rate: 1e-4, batch_size: 16, ..TrainConfig::default() };
        let report = net.train(&x, &y, &cfg).unwrap();
        for w in report.train_loss.windows(2) {
            assert!(w[1] <= w[0], "{:?}", report.train_loss);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = DenseNetwork::new(&[3, 4, 2], 4);
        // nonzero biases so every unit sits away from the ReLU kink
        for b in net.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let x = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(2, 5, |_, _| rng.gen_range(-1.0..1.0));
        let analytic = net.loss_and_gradient(&x, &y).1.to_flat();
        let base = net.params();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            net.set_params(&p).unwrap();
            let up = net.loss_and_gradient(&x, &y).0;
            p[k] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let down = net.loss_and_gradient(&x, &y).0;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-7);
            assert!(err < 1e-4, "param {k}: {numeric} vs {}", analytic[k]);
        }
    }

    #[test]
    fn custom_objective_matches_mse_training() {
        let (x, y) = linear_fixture(100);
        let cfg = TrainConfig { epochs: 3, normalize: false, ..TrainConfig::default() };
        let mut a = DenseNetwork::new(&[1, 8, 1], 2);
        let mut b = a.clone();
        let ra = a.train(&x, &y, &cfg).unwrap();
        let rb = b
            .train_with(&x, &cfg, |idx, out| {
                let diff = out - y.select_columns(idx);
                let n = diff.len() as f64;
                (diff.norm_squared() / n, diff * (2.0 / n))
            })
            .unwrap();
        assert_eq!(a, b);
        for (p, q) in ra.val_loss.iter().zip(&rb.val_loss) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_configs_and_data_are_rejected() {
        let (x, y) = linear_fixture(10);
        let mut net = DenseNetwork::new(&[1, 4, 1], 0);
        let bad = TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() };
        assert!(matches!(net.train(&x, &y, &bad), Err(NetError::InvalidConfig(_))));
        let empty = DMatrix::zeros(1, 0);
        assert!(matches!(net.train(&empty, &empty, &TrainConfig::default()), Err(NetError::EmptyDataset)));
        let huge = TrainConfig { learning_rate: 1e300, epochs: 3, ..TrainConfig::default() };
        let y_big = y.map(|v| v * 1e200);
        assert!(matches!(net.train(&x, &y_big, &huge), Err(NetError::Diverged { .. })));
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let (x, y) = linear_fixture(50);
        let mut net = DenseNetwork::new(&[1, 6, 6, 1], 8);
        net.tag = "line".into();
        net.train(&x, &y, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.save(&path).unwrap();
        let back = DenseNetwork::load(&path).unwrap();
        assert_eq!(back, net);
        let q = DMatrix::from_row_slice(1, 3, &[-0.3, 0.1, 0.9]);
        let (a, b) = (net.forward_batch(&q).unwrap(), back.forward_batch(&q).unwrap());
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = DenseNetwork::new(&[2, 3, 1], 0);
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        assert!(matches!(DenseNetwork::from_bytes(&bytes[..bytes.len() - 3]), Err(NetError::Malformed(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(DenseNetwork::from_bytes(&extra), Err(NetError::Malformed(_))));
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(DenseNetwork::from_bytes(&versioned), Err(NetError::UnsupportedVersion { found: 7 })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(DenseNetwork::from_bytes(&magic), Err(NetError::BadMagic)));
    }
}
