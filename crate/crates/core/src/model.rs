//! Online/target network: a patch-embedding encoder, a two-layer projector
//! and a two-layer predictor, with hand-written reverse-mode gradients,
//! SGD with momentum on a warm-up + cosine schedule, and an EMA target.
//!
//! Parameters are stored in single precision; forward and backward passes
//! accumulate in double precision.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::featmap::{self, FeatureMap, ImageTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub patch_px: usize,
    pub channels: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            patch_px: 8,
            channels: 32,
            proj_hidden: 64,
            proj_dim: 16,
            pred_hidden: 32,
        }
    }
}

impl ModelDims {
    /// Flattened RGB patch length.
    pub fn patch_len(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored row-major as
/// `outputs × inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Copy + Default> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![T::default(); inputs * outputs],
            bias: vec![T::default(); outputs],
        }
    }
}

impl Dense<f32> {
    fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, &b)| b as f64 + row.iter().zip(x).map(|(&w, v)| w as f64 * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense<f64>) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i] as f64;
            }
        }
        dx
    }
}

pub const TENSOR_NAMES: [&str; 10] = [
    "encoder.weight",
    "encoder.bias",
    "projector.hidden.weight",
    "projector.hidden.bias",
    "projector.out.weight",
    "projector.out.bias",
    "predictor.hidden.weight",
    "predictor.hidden.bias",
    "predictor.out.weight",
    "predictor.out.bias",
];

/// Encoder `f`, projector `g` and predictor `q`. The target network uses the
/// same layout; its predictor is carried along but never evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub dims: ModelDims,
    pub encoder: Dense<T>,
    pub proj_hidden: Dense<T>,
    pub proj_out: Dense<T>,
    pub pred_hidden: Dense<T>,
    pub pred_out: Dense<T>,
}

pub type ModelParams = Network<f32>;
pub type Gradients = Network<f64>;

impl<T: Copy + Default> Network<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        Network {
            dims,
            encoder: Dense::zeros(dims.patch_len(), dims.channels),
            proj_hidden: Dense::zeros(dims.channels, dims.proj_hidden),
            proj_out: Dense::zeros(dims.proj_hidden, dims.proj_dim),
            pred_hidden: Dense::zeros(dims.proj_dim, dims.pred_hidden),
            pred_out: Dense::zeros(dims.pred_hidden, dims.proj_dim),
        }
    }

    /// Parameter tensors in declaration order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> [&[T]; 10] {
        [
            &self.encoder.weight,
            &self.encoder.bias,
            &self.proj_hidden.weight,
            &self.proj_hidden.bias,
            &self.proj_out.weight,
            &self.proj_out.bias,
            &self.pred_hidden.weight,
            &self.pred_hidden.bias,
            &self.pred_out.weight,
            &self.pred_out.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 10] {
        let Network {
            encoder,
            proj_hidden,
            proj_out,
            pred_hidden,
            pred_out,
            ..
        } = self;
        [
            &mut encoder.weight,
            &mut encoder.bias,
            &mut proj_hidden.weight,
            &mut proj_hidden.bias,
            &mut proj_out.weight,
            &mut proj_out.bias,
            &mut pred_hidden.weight,
            &mut pred_hidden.bias,
            &mut pred_out.weight,
            &mut pred_out.bias,
        ]
    }

    /// `(outputs, inputs)` of every tensor; biases report one input column.
    pub fn shapes(&self) -> [(usize, usize); 10] {
        let l = [
            (self.encoder.outputs, self.encoder.inputs),
            (self.proj_hidden.outputs, self.proj_hidden.inputs),
            (self.proj_out.outputs, self.proj_out.inputs),
            (self.pred_hidden.outputs, self.pred_hidden.inputs),
            (self.pred_out.outputs, self.pred_out.inputs),
        ];
        let mut out = [(0, 0); 10];
        for (k, &(o, i)) in l.iter().enumerate() {
            out[2 * k] = (o, i);
            out[2 * k + 1] = (o, 1);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ModelParams {
    /// Uniform `±1/√fan_in` initialization of every weight and bias.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        Network {
            dims,
            encoder: Dense::uniform(dims.patch_len(), dims.channels, rng),
            proj_hidden: Dense::uniform(dims.channels, dims.proj_hidden, rng),
            proj_out: Dense::uniform(dims.proj_hidden, dims.proj_dim, rng),
            pred_hidden: Dense::uniform(dims.proj_dim, dims.pred_hidden, rng),
            pred_out: Dense::uniform(dims.pred_hidden, dims.proj_dim, rng),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn check_view(dims: &ModelDims, view: &ImageTensor) -> Result<(usize, usize)> {
    let p = dims.patch_px;
    if view.channels() != 3 {
        return Err(Error::Argument(format!("expected RGB view, got {} channels", view.channels())));
    }
    if view.height() == 0 || view.width() == 0 || view.height() % p != 0 || view.width() % p != 0 {
        return Err(Error::Argument(format!(
            "view {}x{} is not divisible into {p}x{p} patches",
            view.height(),
            view.width()
        )));
    }
    Ok((view.height() / p, view.width() / p))
}

fn patch_into(view: &ImageTensor, p: usize, gy: usize, gx: usize, out: &mut [f64]) {
    for py in 0..p {
        for px in 0..p {
            let cell = view.cell(gy * p + py, gx * p + px);
            let base = (py * p + px) * 3;
            for c in 0..3 {
                out[base + c] = cell[c] as f64;
            }
        }
    }
}

/// Non-overlapping patches linearly embedded into `channels` features.
pub fn encode(params: &ModelParams, view: &ImageTensor) -> Result<FeatureMap> {
    let (gh, gw) = check_view(&params.dims, view)?;
    let c = params.dims.channels;
    let mut patch = vec![0.0; params.dims.patch_len()];
    let mut data = Vec::with_capacity(gh * gw * c);
    for gy in 0..gh {
        for gx in 0..gw {
            patch_into(view, params.dims.patch_px, gy, gx, &mut patch);
            data.extend(params.encoder.forward(&patch).into_iter().map(|v| v as f32));
        }
    }
    Tensor::new(gh, gw, c, data)
}

/// Cached activations of one online forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Mean flattened patch; pooling commutes with the linear encoder.
    pub mean_patch: Vec<f64>,
    pub pooled: Vec<f64>,
    pub proj_pre: Vec<f64>,
    pub proj_act: Vec<f64>,
    pub z: Vec<f64>,
    pub pred_pre: Vec<f64>,
    pub pred_act: Vec<f64>,
    pub p: Vec<f64>,
}

fn mean_patch(dims: &ModelDims, view: &ImageTensor) -> Result<Vec<f64>> {
    let (gh, gw) = check_view(dims, view)?;
    let mut sum = vec![0.0; dims.patch_len()];
    let mut patch = vec![0.0; dims.patch_len()];
    for gy in 0..gh {
        for gx in 0..gw {
            patch_into(view, dims.patch_px, gy, gx, &mut patch);
            for (s, v) in sum.iter_mut().zip(&patch) {
                *s += v;
            }
        }
    }
    let n = (gh * gw) as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Encoder → global average pool → projector (`z`) → predictor (`p`).
pub fn forward(params: &ModelParams, view: &ImageTensor) -> Result<Forward> {
    let mean_patch = mean_patch(&params.dims, view)?;
    let pooled = params.encoder.forward(&mean_patch);
    let proj_pre = params.proj_hidden.forward(&pooled);
    let proj_act = relu(&proj_pre);
    let z = params.proj_out.forward(&proj_act);
    let pred_pre = params.pred_hidden.forward(&z);
    let pred_act = relu(&pred_pre);
    let p = params.pred_out.forward(&pred_act);
    Ok(Forward {
        mean_patch,
        pooled,
        proj_pre,
        proj_act,
        z,
        pred_pre,
        pred_act,
        p,
    })
}

pub fn embed(params: &ModelParams, view: &ImageTensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = forward(params, view)?;
    Ok((f.z, f.p))
}

/// Projector output only, as used by the target branch.
pub fn project(params: &ModelParams, view: &ImageTensor) -> Result<Vec<f64>> {
    let pooled = params.encoder.forward(&mean_patch(&params.dims, view)?);
    let h = relu(&params.proj_hidden.forward(&pooled));
    Ok(params.proj_out.forward(&h))
}

/// Back-propagates `∂L/∂p` through a cached forward pass, accumulating into
/// `grads`.
pub fn backward(params: &ModelParams, cache: &Forward, grad_p: &[f64], grads: &mut Gradients) -> Result<()> {
    if grad_p.len() != params.dims.proj_dim || grads.dims != params.dims {
        return Err(Error::Argument(format!(
            "gradient of length {} does not match predictor output {}",
            grad_p.len(),
            params.dims.proj_dim
        )));
    }
    let d_pred_act = params.pred_out.backward(&cache.pred_act, grad_p, &mut grads.pred_out);
    let d_pred_pre = relu_backward(&cache.pred_pre, &d_pred_act);
    let dz = params.pred_hidden.backward(&cache.z, &d_pred_pre, &mut grads.pred_hidden);
    let d_proj_act = params.proj_out.backward(&cache.proj_act, &dz, &mut grads.proj_out);
    let d_proj_pre = relu_backward(&cache.proj_pre, &d_proj_act);
    let d_pooled = params.proj_hidden.backward(&cache.pooled, &d_proj_pre, &mut grads.proj_hidden);
    params.encoder.backward(&cache.mean_patch, &d_pooled, &mut grads.encoder);
    Ok(())
}

fn relu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub momentum: Network<f32>,
    pub step: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
}

impl OptimState {
    pub fn new(dims: ModelDims, base_lr: f64, total_steps: u64, warmup_steps: u64) -> Self {
        OptimState {
            momentum: Network::zeros(dims),
            step: 0,
            base_lr,
            total_steps,
            warmup_steps,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
        }
    }

    /// Linear warm-up to `base_lr`, then cosine decay to zero at
    /// `total_steps`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        learning_rate(self.base_lr, step as f64, self.warmup_steps as f64, self.total_steps as f64)
    }
}

pub fn learning_rate(base_lr: f64, step: f64, warmup: f64, total: f64) -> f64 {
    if step < warmup {
        return base_lr * step / warmup;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) / (total - warmup);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// `m ← μ m + (g + λ θ)`, `θ ← θ − η m`.
pub fn sgd_update(param: &mut [f32], grad: &[f64], momentum: &mut [f32], lr: f64, mu: f64, wd: f64) {
    for ((p, &g), m) in param.iter_mut().zip(grad).zip(momentum.iter_mut()) {
        let next = mu * *m as f64 + (g + wd * *p as f64);
        *m = next as f32;
        *p = (*p as f64 - lr * *m as f64) as f32;
    }
}

pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptimState) -> Result<()> {
    if params.dims != grads.dims || params.dims != opt.momentum.dims {
        return Err(Error::Argument("parameter, gradient and momentum shapes differ".into()));
    }
    let lr = opt.learning_rate(opt.step);
    let (mu, wd) = (opt.sgd_momentum, opt.weight_decay);
    for ((p, g), m) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.momentum.tensors_mut())
    {
        sgd_update(p, g, m, lr, mu, wd);
    }
    opt.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaState {
    pub tau0: f64,
    pub step: u64,
    pub total_steps: u64,
}

impl EmaState {
    pub fn new(tau0: f64, total_steps: u64) -> Self {
        EmaState {
            tau0,
            step: 0,
            total_steps,
        }
    }

    /// Cosine ramp from `tau0` at step 0 to 1 at `total_steps`.
    pub fn tau(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        let progress = (step as f64 / self.total_steps as f64).min(1.0);
        1.0 - (1.0 - self.tau0) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// `target ← τ target + (1 − τ) online`.
pub fn ema_blend(online: &ModelParams, target: &mut ModelParams, tau: f64) {
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (tv, &ov) in t.iter_mut().zip(o) {
            *tv = (tau * *tv as f64 + (1.0 - tau) * ov as f64) as f32;
        }
    }
}

pub fn ema_update(online: &ModelParams, target: &mut ModelParams, ema: &mut EmaState) -> Result<()> {
    if online.dims != target.dims {
        return Err(Error::Argument("online and target shapes differ".into()));
    }
    ema_blend(online, target, ema.tau(ema.step));
    ema.step += 1;
    Ok(())
}

/// Writes all tensors, concatenated in declaration order, as a `1×N×1` SGFM
/// container plus a text manifest of shapes.
pub fn save_params(params: &ModelParams, sgfm: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = params.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let n = data.len();
    featmap::save_tensor(&Tensor::new(1, n, 1, data)?, sgfm)?;
    fs::write(manifest, manifest_text(params))?;
    Ok(())
}

fn manifest_text(params: &ModelParams) -> String {
    let d = params.dims;
    let mut s = format!(
        "dims {} {} {} {} {}\n",
        d.patch_px, d.channels, d.proj_hidden, d.proj_dim, d.pred_hidden
    );
    for (name, (rows, cols)) in TENSOR_NAMES.iter().zip(params.shapes()) {
        s.push_str(&format!("{name} {rows} {cols}\n"));
    }
    s
}

pub fn load_params(sgfm: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<ModelParams> {
    let text = fs::read_to_string(manifest)?;
    let first = text.lines().next().ok_or_else(|| Error::Format("empty manifest".into()))?;
    let nums: Vec<usize> = first
        .strip_prefix("dims ")
        .ok_or_else(|| Error::Format("manifest must start with a dims line".into()))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Format(format!("bad dimension {v:?}"))))
        .collect::<Result<_>>()?;
    let [patch_px, channels, proj_hidden, proj_dim, pred_hidden] = nums[..] else {
        return Err(Error::Format("dims line needs five values".into()));
    };
    let dims = ModelDims {
        patch_px,
        channels,
        proj_hidden,
        proj_dim,
        pred_hidden,
    };
    let mut params = ModelParams::zeros(dims);
    if manifest_text(&params) != text {
        return Err(Error::Format("manifest shapes do not match the declared dims".into()));
    }
    let t = featmap::load_tensor(sgfm)?;
    if t.data().len() != params.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} values, manifest needs {}",
            t.data().len(),
            params.param_count()
        )));
    }
    let mut rest = t.data();
    for dst in params.tensors_mut() {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    }
    Ok(params)
}
