//! Residual regressor: (wrist image, wrench) → corrective action.

pub mod net;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig};
use crate::collector::{Cursor, Dataset};
use crate::error::{FormatError, RegressorError};
use crate::geometry::CorrectiveAction;
use crate::seed::{mix, rng_for};
use crate::sensors::{ImageTensor, WrenchReading};

pub use net::{Arch, LayerShape, Network, Scalar, LEAK, N_LAYERS, OUTPUTS};

/// Default label scale: the collection box (10 mm, 10°).
pub fn default_label_scale() -> [f64; 5] {
    let c0 = 10f64.to_radians();
    [0.01, 0.01, c0, c0, c0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_scale: [f64; 5],
    /// Force unit (N) and moment unit (N·m) of the wrench input.
    pub wrench_scale: [f64; 2],
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: 10_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            label_scale: default_label_scale(),
            wrench_scale: [10.0, 1.0],
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RegressorError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(RegressorError::InvalidConfig("steps and batch_size must be positive".into()));
        }
        let scales = self.label_scale.iter().chain(&self.wrench_scale);
        if scales.copied().any(|s| !(s > 0.0 && s.is_finite())) {
            return Err(RegressorError::InvalidConfig("scales must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RegressorError::InvalidConfig("bad optimizer settings".into()));
        }
        Ok(())
    }
}

/// Network weights plus the normalization they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub label_scale: [f64; 5],
    pub wrench_scale: [f64; 2],
    /// Flat tensors, layer by layer: weights (`out × fan_in`) then biases.
    pub data: Vec<f32>,
}

impl ModelParams {
    /// He-uniform weights, zero biases. With `zero_head` the output layer
    /// starts at zero so the untrained policy outputs no correction.
    pub fn init(arch: Arch, label_scale: [f64; 5], wrench_scale: [f64; 2], seed: u64, zero_head: bool) -> Self {
        let mut rng = rng_for(seed, 0x1417);
        let mut data = vec![0.0f32; arch.n_params()];
        for (l, s) in arch.layers().iter().enumerate() {
            if zero_head && l == N_LAYERS - 1 {
                continue;
            }
            let bound = (6.0 / ((1.0 + LEAK * LEAK) * s.fan_in as f64)).sqrt() as f32;
            for v in &mut data[s.w_off..s.b_off] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        ModelParams {
            arch,
            label_scale,
            wrench_scale,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_image(&self, img: &ImageTensor) -> Result<(), RegressorError> {
        let expected = (self.arch.height, self.arch.width, self.arch.channels);
        if img.dims() != expected || img.data.len() != expected.0 * expected.1 * expected.2 {
            return Err(RegressorError::ShapeMismatch {
                expected,
                got: img.dims(),
            });
        }
        Ok(())
    }

    pub fn normalize_wrench<T: Scalar>(&self, w: &WrenchReading) -> [T; 6] {
        let a = w.to_array();
        std::array::from_fn(|k| T::of(a[k] / self.wrench_scale[k / 3]))
    }

    pub fn normalize_label<T: Scalar>(&self, d: &CorrectiveAction) -> [T; OUTPUTS] {
        let a = d.to_array();
        std::array::from_fn(|k| T::of(a[k] / self.label_scale[k]))
    }

    pub fn denormalize(&self, out: &[f64]) -> CorrectiveAction {
        CorrectiveAction::from_array(std::array::from_fn(|k| out[k] * self.label_scale[k]))
    }

    /// Single prediction. Allocates a fresh workspace; use [`Predictor`] in
    /// loops.
    pub fn forward(&self, img: &ImageTensor, w: &WrenchReading) -> Result<CorrectiveAction, RegressorError> {
        Predictor::new(self.clone()).predict(img, w)
    }

    /// Mean squared error in normalized label space and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(&ImageTensor, WrenchReading, CorrectiveAction)],
    ) -> Result<(f64, Vec<f32>), RegressorError> {
        if batch.is_empty() {
            return Err(RegressorError::EmptyDataset);
        }
        for (img, _, _) in batch {
            self.check_image(img)?;
        }
        let mut net = Network::<f32>::new(self.arch);
        let images: Vec<&[f32]> = batch.iter().map(|b| b.0.data.as_slice()).collect();
        let wrenches: Vec<[f32; 6]> = batch.iter().map(|b| self.normalize_wrench(&b.1)).collect();
        let targets: Vec<[f32; OUTPUTS]> = batch.iter().map(|b| self.normalize_label(&b.2)).collect();
        net.forward(&self.data, &images, &wrenches);
        let mut grads = vec![0.0f32; self.data.len()];
        let loss = net.backward(&self.data, &targets, &mut grads);
        Ok((loss as f64, grads))
    }
}

/// Inference wrapper that reuses its workspace across calls.
#[derive(Debug, Clone)]
pub struct Predictor {
    params: ModelParams,
    net: Network<f32>,
}

impl Predictor {
    pub fn new(params: ModelParams) -> Self {
        let net = Network::new(params.arch);
        Predictor { params, net }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn predict(&mut self, img: &ImageTensor, w: &WrenchReading) -> Result<CorrectiveAction, RegressorError> {
        self.params.check_image(img)?;
        let u = self.params.normalize_wrench(w);
        let out = self.net.forward(&self.params.data, &[img.data.as_slice()], &[u]);
        let o: Vec<f64> = out.iter().map(|v| *v as f64).collect();
        Ok(self.params.denormalize(&o))
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.lr as f32;
        let eps = cfg.eps as f32;
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Trains from a fresh initialization (zero output layer).
pub fn train(data: &Dataset, aug: &AugmentConfig, cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>), RegressorError> {
    let arch = Arch {
        height: data.height,
        width: data.width,
        channels: data.channels,
    };
    let init = ModelParams::init(arch, cfg.label_scale, cfg.wrench_scale, cfg.rng_seed, true);
    train_from(init, data, aug, cfg)
}

/// Continues training `init` (fine-tuning keeps its normalization). Batches
/// are drawn with replacement and augmented on the fly; returns the final
/// parameters and the per-step batch loss.
pub fn train_from(
    init: ModelParams,
    data: &Dataset,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), RegressorError> {
    cfg.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(RegressorError::EmptyDataset);
    }
    for s in &data.samples {
        init.check_image(&s.image)?;
    }
    let mut params = init;
    let mut net = Network::<f32>::new(params.arch);
    let mut grads = vec![0.0f32; params.data.len()];
    let mut adam = Adam::new(params.data.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    let targets_all: Vec<[f32; OUTPUTS]> = data.samples.iter().map(|s| params.normalize_label(&s.label)).collect();
    for step in 0..cfg.steps as u64 {
        let mut pick = rng_for(cfg.rng_seed, step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| pick.random_range(0..data.len())).collect();
        let aug_base = mix(aug.rng_seed, mix(cfg.rng_seed, step));
        let batch: Vec<_> = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| augment_sample(&data.samples[i], aug, &mut rng_for(aug_base, j as u64)))
            .collect();
        let images: Vec<&[f32]> = batch.iter().map(|s| s.image.data.as_slice()).collect();
        let wrenches: Vec<[f32; 6]> = batch.iter().map(|s| params.normalize_wrench(&s.wrench)).collect();
        let targets: Vec<[f32; OUTPUTS]> = idx.iter().map(|&i| targets_all[i]).collect();
        net.forward(&params.data, &images, &wrenches);
        let loss = net.backward(&params.data, &targets, &mut grads);
        curve.push(loss as f64);
        adam.step(&mut params.data, &grads, cfg);
    }
    Ok((params, curve))
}

const MAGIC: &[u8; 4] = b"INBP";
const VERSION: u16 = 1;

pub fn encode_params(p: &ModelParams) -> Result<Vec<u8>, FormatError> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| FormatError::Format(format!("dimension {v} exceeds u16")));
    let mut out = Vec::with_capacity(64 + p.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [p.arch.height, p.arch.width, p.arch.channels, N_LAYERS] {
        out.extend_from_slice(&dim(v)?.to_le_bytes());
    }
    for s in p.arch.layers() {
        out.extend_from_slice(&(s.out as u32).to_le_bytes());
        out.extend_from_slice(&(s.fan_in as u32).to_le_bytes());
    }
    for v in p.label_scale.iter().chain(&p.wrench_scale) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if p.data.len() != p.arch.n_params() {
        return Err(FormatError::Format("parameter count does not match architecture".into()));
    }
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams, FormatError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(FormatError::Format("bad magic, not a parameter file".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(FormatError::Format(format!("unsupported parameter version {version}")));
    }
    let arch = Arch {
        height: cur.u16()? as usize,
        width: cur.u16()? as usize,
        channels: cur.u16()? as usize,
    };
    if arch.height == 0 || arch.width == 0 || arch.channels == 0 {
        return Err(FormatError::Format("bad input dimensions".into()));
    }
    let n_layers = cur.u16()? as usize;
    if n_layers != N_LAYERS {
        return Err(FormatError::Format(format!("expected {N_LAYERS} layers, found {n_layers}")));
    }
    for (l, s) in arch.layers().iter().enumerate() {
        let (out, fan_in) = (cur.u32()? as usize, cur.u32()? as usize);
        if (out, fan_in) != (s.out, s.fan_in) {
            return Err(FormatError::Format(format!("layer {l} is {out}×{fan_in}, expected {}×{}", s.out, s.fan_in)));
        }
    }
    let mut scales = [0.0f64; 7];
    for v in &mut scales {
        *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    }
    let raw = cur.take(arch.n_params() * 4)?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if !cur.is_done() {
        return Err(FormatError::Format("trailing bytes after parameters".into()));
    }
    Ok(ModelParams {
        arch,
        label_scale: [scales[0], scales[1], scales[2], scales[3], scales[4]],
        wrench_scale: [scales[5], scales[6]],
        data,
    })
}

pub fn save_params(p: &ModelParams, path: &Path) -> Result<(), FormatError> {
    let bytes = encode_params(p)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams, FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

/// Gradients smaller than this are compared in absolute terms by
/// [`gradient_check`]. With a step of 1e-6 and a loss of order one, the
/// central difference carries roundoff noise near 1e-10.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Central finite differences on a float64 copy of the network, `per_layer`
/// random parameters per layer (weights and biases alike). Returns the worst
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)` per layer.
pub fn gradient_check(
    p: &ModelParams,
    batch: &[(&ImageTensor, WrenchReading, CorrectiveAction)],
    per_layer: usize,
    seed: u64,
) -> [f64; N_LAYERS] {
    // small step so a perturbation rarely crosses an activation kink
    let h = 1e-6;
    let params: Vec<f64> = p.data.iter().map(|v| *v as f64).collect();
    let images: Vec<&[f32]> = batch.iter().map(|b| b.0.data.as_slice()).collect();
    let wrenches: Vec<[f64; 6]> = batch.iter().map(|b| p.normalize_wrench(&b.1)).collect();
    let targets: Vec<[f64; OUTPUTS]> = batch.iter().map(|b| p.normalize_label(&b.2)).collect();
    let mut net = Network::<f64>::new(p.arch);
    net.forward(&params, &images, &wrenches);
    let mut grads = vec![0.0; params.len()];
    net.backward(&params, &targets, &mut grads);
    let mut loss_at = |q: &[f64]| {
        net.forward(q, &images, &wrenches);
        let mut scratch = vec![0.0; q.len()];
        net.backward(q, &targets, &mut scratch)
    };
    let mut rng = rng_for(seed, 0);
    let mut worst = [0.0f64; N_LAYERS];
    for (l, s) in p.arch.layers().iter().enumerate() {
        for _ in 0..per_layer {
            let i = rng.random_range(s.w_off..s.end());
            let mut q = params.clone();
            q[i] = params[i] + h;
            let up = loss_at(&q);
            q[i] = params[i] - h;
            let dn = loss_at(&q);
            let numeric = (up - dn) / (2.0 * h);
            // below GRAD_FLOOR the difference quotient is dominated by roundoff
            let err = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst[l] = worst[l].max(err);
        }
    }
    worst
}
