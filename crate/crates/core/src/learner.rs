//! Small fully convolutional segmenter trained with a soft Dice loss.
//!
//! Architecture (all convolutions zero-padded, dims preserved):
//!
//! ```text
//! conv 3x3x3 (2 -> 8) -> ReLU -> conv 3x3x3 (8 -> 8) -> ReLU -> conv 1x1x1 (8 -> 1) -> sigmoid
//! ```
//!
//! Parameters are stored as `f32`. The forward and backward passes are generic
//! over the scalar type: training runs in `f32`, gradient checks in `f64`.
//!
//! Flat parameter order (also the checkpoint blob order):
//! `conv1.weight [8,2,3,3,3]`, `conv1.bias [8]`, `conv2.weight [8,8,3,3,3]`,
//! `conv2.bias [8]`, `conv3.weight [1,8]`, `conv3.bias [1]`. Kernel taps are
//! x-fastest, tap `(kx,ky,kz)` reading the input at offset `(kx-1,ky-1,kz-1)`.

use std::fs;
use std::io::Write;
use std::iter::Sum;
use std::ops::AddAssign;
use std::path::Path;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, ProbabilityMap, Volume};

pub const IN_CHANNELS: usize = 2;
pub const HIDDEN: usize = 8;
pub const TAPS: usize = 27;

// Offsets into the flat parameter vector.
pub const W1: usize = 0;
pub const B1: usize = W1 + HIDDEN * IN_CHANNELS * TAPS;
pub const W2: usize = B1 + HIDDEN;
pub const B2: usize = W2 + HIDDEN * HIDDEN * TAPS;
pub const W3: usize = B2 + HIDDEN;
pub const B3: usize = W3 + HIDDEN;
pub const PARAM_COUNT: usize = B3 + 1;

/// Added to both numerator and denominator of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

pub const ARCHITECTURE: &str = "conv3d(2,8,3)-relu-conv3d(8,8,3)-relu-conv3d(8,1,1)-sigmoid";

/// Scalar type the network can run in.
pub trait Real: Float + AddAssign + Sum + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Two-channel network input: normalized intensity and the click channel.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerInput {
    geometry: Geometry,
    channels: [Vec<f32>; IN_CHANNELS],
}

impl LearnerInput {
    pub fn new(intensity: &Volume, points: &Volume) -> Result<Self> {
        intensity.geometry().check_same_dims(points.geometry())?;
        Ok(LearnerInput {
            geometry: *intensity.geometry(),
            channels: [intensity.data().to_vec(), points.data().to_vec()],
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    fn stacked<T: Real>(&self) -> Vec<T> {
        self.channels
            .iter()
            .flat_map(|c| c.iter().map(|&v| T::from_f32(v)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub rng_seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 50,
            rng_seed: 0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Anything that can be fitted to pseudo labels and predict probabilities.
pub trait Segmenter: Send + Sync {
    /// Fits to `(input, target)` pairs, returning the loss at each epoch.
    fn train(&mut self, data: &[(&LearnerInput, &ProbabilityMap)], cfg: &TrainConfig) -> Result<Vec<f64>>;
    fn predict(&self, input: &LearnerInput) -> Result<ProbabilityMap>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnerModel {
    seed: u64,
    epochs_trained: usize,
    params: Vec<f32>,
}

impl LearnerModel {
    /// He-uniform hidden layers from a seeded generator; the output layer
    /// starts at zero so the first prediction is a uniform 0.5.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0f32; PARAM_COUNT];
        let bound1 = (6.0 / (IN_CHANNELS * TAPS) as f64).sqrt() as f32;
        for w in &mut params[W1..B1] {
            *w = rng.random_range(-bound1..bound1);
        }
        let bound2 = (6.0 / (HIDDEN * TAPS) as f64).sqrt() as f32;
        for w in &mut params[W2..B2] {
            *w = rng.random_range(-bound2..bound2);
        }
        LearnerModel {
            seed,
            epochs_trained: 0,
            params,
        }
    }

    pub fn from_params(seed: u64, epochs_trained: usize, params: Vec<f32>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::SizeMismatch {
                expected: PARAM_COUNT,
                found: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(LearnerModel {
            seed,
            epochs_trained,
            params,
        })
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn forward(&self, input: &LearnerInput) -> ProbabilityMap {
        let y = Network::new(&self.params, input.geometry.dims).predict(&input.stacked::<f32>());
        ProbabilityMap::from_clamped(input.geometry, y.into_iter().map(|v| v as f64))
    }

    /// Mean loss and its gradient over `data`, at the parameters converted to `T`.
    pub fn loss_and_gradient<T: Real>(
        params: &[T],
        data: &[(&LearnerInput, &ProbabilityMap)],
    ) -> Result<(f64, Vec<T>)> {
        for (x, t) in data {
            x.geometry.check_same_dims(t.geometry())?;
        }
        let per_sample: Vec<(f64, Vec<T>)> = data
            .par_iter()
            .map(|(x, t)| Network::new(params, x.geometry.dims).loss_and_gradient(&x.stacked(), t.data()))
            .collect();
        let scale = 1.0 / data.len() as f64;
        let mut grad = vec![T::zero(); PARAM_COUNT];
        let mut loss = 0.0;
        for (l, g) in per_sample {
            loss += l * scale;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi * T::from_f64(scale);
            }
        }
        Ok((loss, grad))
    }

    pub fn train(
        &mut self,
        data: &[(&LearnerInput, &ProbabilityMap)],
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let lr = cfg.learning_rate as f32;
        let mu = cfg.momentum as f32;
        let mut velocity = vec![0.0f32; PARAM_COUNT];
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let (loss, grad) = Self::loss_and_gradient::<f32>(&self.params, data)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            log::debug!("epoch {epoch}: dice loss {loss:.6}");
            history.push(loss);
            for ((p, v), g) in self.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = mu * *v - lr * g;
                *p += *v;
            }
            self.epochs_trained += 1;
        }
        Ok(history)
    }
}

impl Segmenter for LearnerModel {
    fn train(&mut self, data: &[(&LearnerInput, &ProbabilityMap)], cfg: &TrainConfig) -> Result<Vec<f64>> {
        LearnerModel::train(self, data, cfg)
    }

    fn predict(&self, input: &LearnerInput) -> Result<ProbabilityMap> {
        Ok(self.forward(input))
    }
}

/// `1 - (2 Σ y ŷ + s) / (Σ y² + Σ ŷ² + s)` and its gradient with respect to `y` (the prediction).
pub fn dice_loss(pred: &ProbabilityMap, target: &ProbabilityMap) -> Result<(f64, Vec<f64>)> {
    pred.geometry().check_same_dims(target.geometry())?;
    let y: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    Ok(dice_loss_slices(&y, target.data()))
}

/// [`dice_loss`] on raw slices, in the precision of `y`.
pub fn dice_loss_slices<T: Real>(y: &[T], target: &[f32]) -> (f64, Vec<T>) {
    let mut inter = 0.0f64;
    let mut denom = DICE_SMOOTH;
    for (&p, &t) in y.iter().zip(target) {
        let p = p.to_f64();
        let t = t as f64;
        inter += p * t;
        denom += p * p + t * t;
    }
    let numer = 2.0 * inter + DICE_SMOOTH;
    let loss = 1.0 - numer / denom;
    let d2 = denom * denom;
    let grad = y
        .iter()
        .zip(target)
        .map(|(&p, &t)| T::from_f64(-(2.0 * t as f64 * denom - numer * 2.0 * p.to_f64()) / d2))
        .collect();
    (loss, grad)
}

/// One forward/backward evaluation at fixed parameters.
struct Network<'a, T> {
    p: &'a [T],
    dims: [usize; 3],
    n: usize,
}

struct Activations<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    y: Vec<T>,
}

impl<'a, T: Real> Network<'a, T> {
    fn new(p: &'a [T], dims: [usize; 3]) -> Self {
        Network {
            p,
            dims,
            n: dims.iter().product(),
        }
    }

    fn forward(&self, x: &[T]) -> Activations<T> {
        let n = self.n;
        let mut a1 = vec![T::zero(); HIDDEN * n];
        conv3_forward(x, IN_CHANNELS, &self.p[W1..B1], &self.p[B1..W2], HIDDEN, self.dims, &mut a1);
        relu(&mut a1);
        let mut a2 = vec![T::zero(); HIDDEN * n];
        conv3_forward(&a1, HIDDEN, &self.p[W2..B2], &self.p[B2..W3], HIDDEN, self.dims, &mut a2);
        relu(&mut a2);
        let w3 = &self.p[W3..B3];
        let b3 = self.p[B3];
        let mut y = vec![b3; n];
        for (c, &w) in w3.iter().enumerate() {
            for (yi, &a) in y.iter_mut().zip(&a2[c * n..(c + 1) * n]) {
                *yi += w * a;
            }
        }
        for v in &mut y {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        Activations { a1, a2, y }
    }

    fn predict(&self, x: &[T]) -> Vec<T> {
        self.forward(x).y
    }

    fn loss_and_gradient(&self, x: &[T], target: &[f32]) -> (f64, Vec<T>) {
        let n = self.n;
        let Activations { a1, a2, y } = self.forward(x);
        let (loss, dy) = dice_loss_slices(&y, target);

        let mut grad = vec![T::zero(); PARAM_COUNT];
        // Output layer: sigmoid then 1x1 conv.
        let dz3: Vec<T> = dy
            .iter()
            .zip(&y)
            .map(|(&g, &v)| g * v * (T::one() - v))
            .collect();
        grad[B3] = dz3.iter().copied().sum();
        let w3 = &self.p[W3..B3];
        let mut dz2 = vec![T::zero(); HIDDEN * n];
        for c in 0..HIDDEN {
            let act = &a2[c * n..(c + 1) * n];
            grad[W3 + c] = act.iter().zip(&dz3).map(|(&a, &d)| a * d).sum();
            for ((g, &a), &d) in dz2[c * n..(c + 1) * n].iter_mut().zip(act).zip(&dz3) {
                *g = if a > T::zero() { w3[c] * d } else { T::zero() };
            }
        }

        let (gw, rest) = grad[W2..W3].split_at_mut(B2 - W2);
        conv3_weight_grad(&a1, HIDDEN, &dz2, HIDDEN, self.dims, gw, rest);

        let mut dz1 = vec![T::zero(); HIDDEN * n];
        conv3_input_grad(&dz2, HIDDEN, &self.p[W2..B2], HIDDEN, self.dims, &mut dz1);
        for (g, &a) in dz1.iter_mut().zip(&a1) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        let (gw, rest) = grad[W1..W2].split_at_mut(B1 - W1);
        conv3_weight_grad(x, IN_CHANNELS, &dz1, HIDDEN, self.dims, gw, rest);
        (loss, grad)
    }
}

fn relu<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Valid `(row offset, k index base)` pairs for the 9 `(ky, kz)` taps around row `(y, z)`.
/// With `sign = 1` the tap reads row `(y + ky - 1, z + kz - 1)`, with `sign = -1` it
/// reads `(y - ky + 1, z - kz + 1)`.
#[inline]
fn neighbor_rows(dims: [usize; 3], y: usize, z: usize, sign: i64, out: &mut Vec<(usize, usize)>) {
    out.clear();
    let [nx, ny, nz] = dims;
    for kz in 0..3i64 {
        let zz = z as i64 + sign * (kz - 1);
        if zz < 0 || zz >= nz as i64 {
            continue;
        }
        for ky in 0..3i64 {
            let yy = y as i64 + sign * (ky - 1);
            if yy < 0 || yy >= ny as i64 {
                continue;
            }
            out.push(((yy as usize + ny * zz as usize) * nx, (3 * ky + 9 * kz) as usize));
        }
    }
}

/// `out[x] += w * src[x + dx]` for `dx = kx - 1`, skipping out-of-range reads.
#[inline]
fn shifted_axpy<T: Real>(out: &mut [T], src: &[T], w: T, kx: usize) {
    let nx = out.len();
    match kx {
        0 if nx > 1 => {
            for (o, &s) in out[1..].iter_mut().zip(&src[..nx - 1]) {
                *o += w * s;
            }
        }
        1 => {
            for (o, &s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        2 if nx > 1 => {
            for (o, &s) in out[..nx - 1].iter_mut().zip(&src[1..]) {
                *o += w * s;
            }
        }
        _ => {}
    }
}

/// `Σ_x a[x] * b[x + dx]` for `dx = kx - 1`.
#[inline]
fn shifted_dot<T: Real>(a: &[T], b: &[T], kx: usize) -> T {
    let nx = a.len();
    match kx {
        0 if nx > 1 => a[1..].iter().zip(&b[..nx - 1]).map(|(&p, &q)| p * q).sum(),
        1 => a.iter().zip(b).map(|(&p, &q)| p * q).sum(),
        2 if nx > 1 => a[..nx - 1].iter().zip(&b[1..]).map(|(&p, &q)| p * q).sum(),
        _ => T::zero(),
    }
}

fn conv3_forward<T: Real>(
    input: &[T],
    cin: usize,
    w: &[T],
    b: &[T],
    cout: usize,
    dims: [usize; 3],
    out: &mut [T],
) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut rows = Vec::with_capacity(9);
    let mut acc = vec![T::zero(); cout * nx];
    for z in 0..nz {
        for y in 0..ny {
            for co in 0..cout {
                acc[co * nx..(co + 1) * nx].fill(b[co]);
            }
            neighbor_rows(dims, y, z, 1, &mut rows);
            for ci in 0..cin {
                for &(start, kbase) in &rows {
                    let src = &input[ci * n + start..ci * n + start + nx];
                    for co in 0..cout {
                        let wk = &w[(co * cin + ci) * TAPS + kbase..];
                        let dst = &mut acc[co * nx..(co + 1) * nx];
                        for kx in 0..3 {
                            shifted_axpy(dst, src, wk[kx], kx);
                        }
                    }
                }
            }
            let row = (y + ny * z) * nx;
            for co in 0..cout {
                out[co * n + row..co * n + row + nx].copy_from_slice(&acc[co * nx..(co + 1) * nx]);
            }
        }
    }
}

/// Gradient with respect to the input of [`conv3_forward`].
fn conv3_input_grad<T: Real>(
    gout: &[T],
    cout: usize,
    w: &[T],
    cin: usize,
    dims: [usize; 3],
    gin: &mut [T],
) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut rows = Vec::with_capacity(9);
    let mut acc = vec![T::zero(); cin * nx];
    for z in 0..nz {
        for y in 0..ny {
            acc.fill(T::zero());
            // gin[q] += w[k] * gout[q - off_k]
            neighbor_rows(dims, y, z, -1, &mut rows);
            for co in 0..cout {
                for &(start, kbase) in &rows {
                    let src = &gout[co * n + start..co * n + start + nx];
                    for ci in 0..cin {
                        let wk = &w[(co * cin + ci) * TAPS + kbase..];
                        let dst = &mut acc[ci * nx..(ci + 1) * nx];
                        for kx in 0..3 {
                            shifted_axpy(dst, src, wk[kx], 2 - kx);
                        }
                    }
                }
            }
            let row = (y + ny * z) * nx;
            for ci in 0..cin {
                gin[ci * n + row..ci * n + row + nx].copy_from_slice(&acc[ci * nx..(ci + 1) * nx]);
            }
        }
    }
}

/// Gradients with respect to the weights and biases of [`conv3_forward`].
fn conv3_weight_grad<T: Real>(
    input: &[T],
    cin: usize,
    gout: &[T],
    cout: usize,
    dims: [usize; 3],
    gw: &mut [T],
    gb: &mut [T],
) {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut rows = Vec::with_capacity(9);
    for co in 0..cout {
        gb[co] = gout[co * n..(co + 1) * n].iter().copied().sum();
    }
    for z in 0..nz {
        for y in 0..ny {
            let row = (y + ny * z) * nx;
            neighbor_rows(dims, y, z, 1, &mut rows);
            for co in 0..cout {
                let g = &gout[co * n + row..co * n + row + nx];
                for ci in 0..cin {
                    let wk = &mut gw[(co * cin + ci) * TAPS..(co * cin + ci + 1) * TAPS];
                    for &(start, kbase) in &rows {
                        let src = &input[ci * n + start..ci * n + start + nx];
                        for kx in 0..3 {
                            wk[kbase + kx] += shifted_dot(g, src, kx);
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then the little-endian f32 parameter blob.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub seed: u64,
    pub epoch: usize,
    pub layers: Vec<LayerSpec>,
    pub param_count: usize,
}

fn layer_specs() -> Vec<LayerSpec> {
    let spec = |name: &str, shape: &[usize]| LayerSpec {
        name: name.into(),
        shape: shape.to_vec(),
    };
    vec![
        spec("conv1.weight", &[HIDDEN, IN_CHANNELS, 3, 3, 3]),
        spec("conv1.bias", &[HIDDEN]),
        spec("conv2.weight", &[HIDDEN, HIDDEN, 3, 3, 3]),
        spec("conv2.bias", &[HIDDEN]),
        spec("conv3.weight", &[1, HIDDEN]),
        spec("conv3.bias", &[1]),
    ]
}

pub fn save_checkpoint(model: &LearnerModel, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        architecture: ARCHITECTURE.into(),
        seed: model.seed,
        epoch: model.epochs_trained,
        layers: layer_specs(),
        param_count: PARAM_COUNT,
    };
    let mut bytes = serde_json::to_vec(&header).expect("header serializes");
    bytes.push(b'\n');
    for p in &model.params {
        bytes.write_all(&p.to_le_bytes()).expect("write to vec");
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LearnerModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.architecture != ARCHITECTURE || header.param_count != PARAM_COUNT {
        return Err(Error::Checkpoint(format!(
            "unsupported architecture {} with {} parameters",
            header.architecture, header.param_count
        )));
    }
    let blob = &bytes[split + 1..];
    if blob.len() != 4 * PARAM_COUNT {
        return Err(Error::SizeMismatch {
            expected: PARAM_COUNT,
            found: blob.len() / 4,
        });
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LearnerModel::from_params(header.seed, header.epoch, params)
}
