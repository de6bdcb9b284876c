//! The attention classifier.
//!
//! A depth-spanning convolution maps the `M' x N' x K` grid `G` to an
//! `M' x N' x H` response `G'`. Each configured pooling mode pools `G'`
//! (shape preserving), a spatial softmax turns every pooled channel into an
//! attention map summing to one, and each map weights the cells of `G` into
//! an `H x K` matrix. The activated matrices of all modes are flattened in
//! `max, min, avg` order, concatenated and passed to a linear head.

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridFeatureMap, Label, TaskKind};
use crate::tensor::{ActivationKind, Matrix, PoolMode, Tape, Tensor3, Var};

pub const DEFAULT_ATTENTION_CHANNELS: usize = 64;
pub const DEFAULT_KERNEL_SIZE: usize = 3;
pub const DEFAULT_POOL_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Feature depth of the input grid.
    pub k: usize,
    /// Number of attention channels (convolution kernels).
    pub h: usize,
    /// Convolution kernel size.
    pub n: usize,
    pub pool_window: usize,
    /// Kept in canonical `max, min, avg` order, see [`AttentionConfig::with_modes`].
    pub modes: Vec<PoolMode>,
    pub activation: ActivationKind,
    pub output_dim: usize,
    pub task: TaskKind,
}

impl AttentionConfig {
    /// Defaults: 64 attention channels, 3x3 kernels, window 3, `{max, min}`,
    /// relu; two logits for classification, one score for regression.
    pub fn new(task: TaskKind, k: usize) -> Self {
        Self {
            k,
            h: DEFAULT_ATTENTION_CHANNELS,
            n: DEFAULT_KERNEL_SIZE,
            pool_window: DEFAULT_POOL_WINDOW,
            modes: vec![PoolMode::Max, PoolMode::Min],
            activation: ActivationKind::Relu,
            output_dim: output_dim_for(task),
            task,
        }
    }

    pub fn with_modes(mut self, modes: &[PoolMode]) -> Self {
        self.modes = canonical_modes(modes);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.h == 0 {
            return Err(Error::config("K and H must be positive"));
        }
        if self.h >= self.k {
            return Err(Error::config(format!(
                "attention channels H={} must be smaller than feature depth K={}",
                self.h, self.k
            )));
        }
        if self.n.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size n={} must be odd", self.n)));
        }
        if self.pool_window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "pool window {} must be odd",
                self.pool_window
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::config("at least one pooling mode is required"));
        }
        if self.modes != canonical_modes(&self.modes) {
            return Err(Error::config(format!(
                "pooling modes {:?} must be distinct and in max, min, avg order",
                self.modes
            )));
        }
        if self.output_dim != output_dim_for(self.task) {
            return Err(Error::config(format!(
                "{} needs output dimension {}, got {}",
                self.task,
                output_dim_for(self.task),
                self.output_dim
            )));
        }
        Ok(())
    }

    /// Length of the concatenated attention features: `|modes| * H * K`.
    pub fn feature_len(&self) -> usize {
        self.modes.len() * self.h * self.k
    }

    pub fn conv_len(&self) -> usize {
        self.h * self.n * self.n * self.k
    }

    pub fn param_count(&self) -> usize {
        self.conv_len() + self.h + self.output_dim * self.feature_len() + self.output_dim
    }

    pub(crate) fn mode_mask(&self) -> u32 {
        self.modes.iter().map(|m| m.bit()).sum()
    }
}

fn output_dim_for(task: TaskKind) -> usize {
    match task {
        TaskKind::Classification => 2,
        TaskKind::Regression => 1,
    }
}

fn canonical_modes(modes: &[PoolMode]) -> Vec<PoolMode> {
    PoolMode::ORDER
        .into_iter()
        .filter(|m| modes.contains(m))
        .collect()
}

/// All trainable weights. Also used as the container for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `H x n x n x K`, kernel `h` tap `(di, dj, k)` at `((h*n + di)*n + dj)*K + k`.
    pub conv_kernels: Vec<f64>,
    pub conv_bias: Vec<f64>,
    /// Row-major `C x (|modes| * H * K)`.
    pub linear_weights: Vec<f64>,
    pub linear_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self {
            conv_kernels: vec![0.0; cfg.conv_len()],
            conv_bias: vec![0.0; cfg.h],
            linear_weights: vec![0.0; cfg.output_dim * cfg.feature_len()],
            linear_bias: vec![0.0; cfg.output_dim],
        }
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(cfg: &AttentionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |values: &mut [f64], fan_in: usize| -> Result<()> {
            let a = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new(-a, a).map_err(|e| Error::config(e.to_string()))?;
            values.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
            Ok(())
        };
        fill(&mut p.conv_kernels, cfg.n * cfg.n * cfg.k)?;
        fill(&mut p.linear_weights, cfg.feature_len())?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.conv_kernels.len() + self.conv_bias.len() + self.linear_weights.len() + self.linear_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let z = Self::zeros(cfg);
        let lens = |p: &Self| {
            [
                p.conv_kernels.len(),
                p.conv_bias.len(),
                p.linear_weights.len(),
                p.linear_bias.len(),
            ]
        };
        if lens(self) != lens(&z) {
            return Err(Error::dims(format!(
                "parameter sizes {:?} do not match configuration {:?}",
                lens(self),
                lens(&z)
            )));
        }
        Ok(())
    }

    /// Parameters in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for part in self.parts() {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(cfg: &AttentionConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        if flat.len() != p.len() {
            return Err(Error::dims(format!(
                "configuration needs {} parameters, got {}",
                p.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for part in p.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    pub fn parts(&self) -> [&[f64]; 4] {
        [
            &self.conv_kernels,
            &self.conv_bias,
            &self.linear_weights,
            &self.linear_bias,
        ]
    }

    pub fn parts_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.conv_kernels,
            &mut self.conv_bias,
            &mut self.linear_weights,
            &mut self.linear_bias,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, part by part.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Supervision for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Score(f64),
}

impl From<Label> for Target {
    fn from(l: Label) -> Self {
        match l {
            Label::Class(c) => Target::Class(c as usize),
            Label::Score(s) => Target::Score(s),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Branch {
    mode: PoolMode,
    pooled: Var,
    attention: Var,
    aggregated: Var,
    activated: Var,
}

#[derive(Clone, Copy, Debug)]
struct ParamVars {
    kernels: Var,
    conv_bias: Var,
    weights: Var,
    linear_bias: Var,
}

/// Recorded forward pass of one grid.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    tape: Tape,
    grid: Var,
    params: ParamVars,
    g_prime: Var,
    branches: Vec<Branch>,
    concat: Var,
    output: Var,
}

/// Loss and gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct Backprop {
    pub loss: f64,
    pub params: ModelParams,
    /// Gradient with respect to the input grid, same layout as the grid.
    pub grid: Vec<f64>,
}

impl ForwardTrace {
    /// The convolution response `G'`.
    pub fn g_prime(&self) -> &Tensor3 {
        self.tape.value(self.g_prime)
    }

    pub fn modes(&self) -> Vec<PoolMode> {
        self.branches.iter().map(|b| b.mode).collect()
    }

    fn branch(&self, mode: PoolMode) -> Result<&Branch> {
        self.branches
            .iter()
            .find(|b| b.mode == mode)
            .ok_or_else(|| Error::config(format!("model has no {mode} attention branch")))
    }

    pub fn pooled(&self, mode: PoolMode) -> Result<&Tensor3> {
        Ok(self.tape.value(self.branch(mode)?.pooled))
    }

    pub fn attention(&self, mode: PoolMode) -> Result<&Tensor3> {
        Ok(self.tape.value(self.branch(mode)?.attention))
    }

    /// Attention-weighted feature sums `v` before the activation (`H x K`).
    pub fn aggregated(&self, mode: PoolMode) -> Result<Matrix> {
        self.matrix(self.branch(mode)?.aggregated)
    }

    pub fn activated(&self, mode: PoolMode) -> Result<Matrix> {
        self.matrix(self.branch(mode)?.activated)
    }

    fn matrix(&self, v: Var) -> Result<Matrix> {
        let t = self.tape.value(v);
        Matrix::from_vec(t.rows(), t.cols(), t.values().to_vec())
    }

    pub fn concat(&self) -> &[f64] {
        self.tape.value(self.concat).values()
    }

    pub fn output(&self) -> &[f64] {
        self.tape.value(self.output).values()
    }

    /// Appends the task loss and back-propagates it.
    pub fn backward(&mut self, target: Target) -> Result<Backprop> {
        let loss = match target {
            Target::Class(c) => self.tape.cross_entropy(self.output, c)?,
            Target::Score(s) => self.tape.mse(self.output, s)?,
        };
        let g = self.tape.backward(loss)?;
        let loss_value = self.tape.value(loss).values()[0];
        let pv = self.params;
        Ok(Backprop {
            loss: loss_value,
            params: ModelParams {
                conv_kernels: g.wrt(&self.tape, pv.kernels),
                conv_bias: g.wrt(&self.tape, pv.conv_bias),
                linear_weights: g.wrt(&self.tape, pv.weights),
                linear_bias: g.wrt(&self.tape, pv.linear_bias),
            },
            grid: g.wrt(&self.tape, self.grid),
        })
    }

    /// Gradient of output element `index` with respect to `G'`.
    pub fn output_gradient_wrt_g_prime(&mut self, index: usize) -> Result<Tensor3> {
        let sel = self.tape.select(self.output, index)?;
        let g = self.tape.backward(sel)?;
        let gp = self.g_prime();
        Tensor3::from_vec(gp.rows(), gp.cols(), gp.depth(), g.wrt(&self.tape, self.g_prime))
    }
}

pub fn forward(grid: &GridFeatureMap, params: &ModelParams, cfg: &AttentionConfig) -> Result<ForwardTrace> {
    forward_tensor(grid.grid.to_f64(), params, cfg)
}

/// As [`forward`] for a grid already held in double precision.
pub fn forward_tensor(grid: Tensor3, params: &ModelParams, cfg: &AttentionConfig) -> Result<ForwardTrace> {
    cfg.validate()?;
    params.check(cfg)?;
    if grid.depth() != cfg.k {
        return Err(Error::dims(format!(
            "grid depth {} differs from model depth K={}",
            grid.depth(),
            cfg.k
        )));
    }
    let mut tape = Tape::new();
    let g = tape.leaf(grid);
    let pv = ParamVars {
        kernels: tape.leaf_vec(params.conv_kernels.clone()),
        conv_bias: tape.leaf_vec(params.conv_bias.clone()),
        weights: tape.leaf(Tensor3::from_vec(
            cfg.output_dim,
            cfg.feature_len(),
            1,
            params.linear_weights.clone(),
        )?),
        linear_bias: tape.leaf_vec(params.linear_bias.clone()),
    };
    let g_prime = tape.conv(g, pv.kernels, pv.conv_bias, cfg.n)?;
    let mut branches = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let pooled = tape.pool(g_prime, mode, cfg.pool_window)?;
        let attention = tape.softmax(pooled)?;
        let aggregated = tape.aggregate(attention, g)?;
        let activated = tape.activation(aggregated, cfg.activation)?;
        branches.push(Branch {
            mode,
            pooled,
            attention,
            aggregated,
            activated,
        });
    }
    let acts: Vec<Var> = branches.iter().map(|b| b.activated).collect();
    let concat = tape.concat(&acts)?;
    let output = tape.linear(concat, pv.weights, pv.linear_bias)?;
    Ok(ForwardTrace {
        tape,
        grid: g,
        params: pv,
        g_prime,
        branches,
        concat,
        output,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prediction {
    /// `probability` is the softmax probability of class 1.
    Class { class: u8, probability: f64 },
    Score(f64),
}

impl Prediction {
    /// The value ranked by evaluation metrics.
    pub fn score(self) -> f64 {
        match self {
            Prediction::Class { probability, .. } => probability,
            Prediction::Score(s) => s,
        }
    }
}

/// Ties between the two logits resolve to class 0.
pub fn predict(trace: &ForwardTrace, cfg: &AttentionConfig) -> Prediction {
    predict_output(trace.output(), cfg.task)
}

pub fn predict_output(output: &[f64], task: TaskKind) -> Prediction {
    match task {
        TaskKind::Classification => {
            let (z0, z1) = (output[0], output[1]);
            let probability = 1.0 / (1.0 + (z0 - z1).exp());
            Prediction::Class {
                class: u8::from(z1 > z0),
                probability,
            }
        }
        TaskKind::Regression => Prediction::Score(output[0]),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GAM1";

/// Checkpoint layout, little-endian: magic `GAM1`; u32 `K, H, n,
/// pool_window, output_dim, task (0 classification, 1 regression), mode mask
/// (1 max, 2 min, 4 avg), activation (0 relu, 1 tanh)`; then every parameter
/// as f64 in declaration order (kernels, conv bias, linear weights, linear
/// bias).
pub fn encode_checkpoint(cfg: &AttentionConfig, params: &ModelParams) -> Result<Vec<u8>> {
    cfg.validate()?;
    params.check(cfg)?;
    let mut out = Vec::with_capacity(36 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let task = match cfg.task {
        TaskKind::Classification => 0u32,
        TaskKind::Regression => 1,
    };
    for v in [
        cfg.k as u32,
        cfg.h as u32,
        cfg.n as u32,
        cfg.pool_window as u32,
        cfg.output_dim as u32,
        task,
        cfg.mode_mask(),
        cfg.activation.code(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for part in params.parts() {
        for v in part {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(AttentionConfig, ModelParams)> {
    let ferr = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ferr(0, "bad checkpoint magic, expected \"GAM1\"".into()));
    }
    if bytes.len() < 36 {
        return Err(ferr(bytes.len(), "truncated checkpoint header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let task = match field(5) {
        0 => TaskKind::Classification,
        1 => TaskKind::Regression,
        t => return Err(ferr(24, format!("unknown task code {t}"))),
    };
    let mask = field(6);
    if mask == 0 || mask > 7 {
        return Err(ferr(28, format!("invalid mode mask {mask}")));
    }
    let modes: Vec<PoolMode> = PoolMode::ORDER
        .into_iter()
        .filter(|m| mask & m.bit() != 0)
        .collect();
    let activation = ActivationKind::from_code(field(7))
        .ok_or_else(|| ferr(32, format!("unknown activation code {}", field(7))))?;
    let cfg = AttentionConfig {
        k: field(0) as usize,
        h: field(1) as usize,
        n: field(2) as usize,
        pool_window: field(3) as usize,
        modes,
        activation,
        output_dim: field(4) as usize,
        task,
    };
    cfg.validate().map_err(|e| ferr(4, e.to_string()))?;
    let count = cfg.param_count();
    let payload = &bytes[36..];
    if payload.len() != 8 * count {
        return Err(ferr(
            36 + payload.len().min(8 * count),
            format!("expected {count} parameters, payload holds {} bytes", payload.len()),
        ));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let params = ModelParams::from_flat(&cfg, &flat)?;
    Ok((cfg, params))
}

pub fn write_checkpoint(cfg: &AttentionConfig, params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(AttentionConfig, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
