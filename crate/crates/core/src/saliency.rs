//! Attention-map export and Grad-CAM saliency, written as PGM/PPM images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridFeatureMap, TaskKind};
use crate::model::{forward, AttentionConfig, ForwardTrace, ModelParams, Target};
use crate::patch::{encode_ppm, parse_netpbm, RgbImage};
use crate::tensor::{PoolMode, Tensor3};

/// Row-major map of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl HeatMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dims(format!(
                "{rows}x{cols} heat map with {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Min-max normalisation to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Self {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let values = if range > 0.0 && range.is_finite() {
            self.values.iter().map(|v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Self { values, ..*self }
    }

    /// Nearest-neighbour upscaling: every cell becomes a `p x p` block.
    pub fn upscaled(&self, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("upscale factor must be at least 1"));
        }
        let (rows, cols) = (self.rows * p, self.cols * p);
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(self.get(i / p, j / p));
            }
        }
        Ok(Self { rows, cols, values })
    }

    /// Row-major index of the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Bytes `round(255 v)` with halves rounded up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn to_rgb(&self, lut: &[[u8; 3]; 256]) -> RgbImage {
        RgbImage::from_fn(self.rows, self.cols, |i, j| lut[to_byte(self.get(i, j)) as usize])
    }
}

fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

fn channel_map(t: &Tensor3, h: usize) -> Result<HeatMap> {
    if h >= t.depth() {
        return Err(Error::config(format!(
            "channel {h} out of range, model has {} channels",
            t.depth()
        )));
    }
    HeatMap::new(t.rows(), t.cols(), t.channel(h))
}

/// Attention channel `h` of `mode`, normalised and upscaled by `p`.
pub fn export_attention(trace: &ForwardTrace, mode: PoolMode, h: usize, p: usize) -> Result<HeatMap> {
    channel_map(trace.attention(mode)?, h)?.normalized().upscaled(p)
}

/// Output index that Grad-CAM differentiates.
fn target_index(cfg: &AttentionConfig, target: Target) -> Result<usize> {
    match (cfg.task, target) {
        (TaskKind::Classification, Target::Class(c)) if c < cfg.output_dim => Ok(c),
        (TaskKind::Regression, Target::Score(_)) => Ok(0),
        _ => Err(Error::config(format!(
            "target {target:?} does not fit a {} model",
            cfg.task
        ))),
    }
}

/// How Grad-CAM turns target gradients into per-cell weights of `G'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CamWeighting {
    /// Each cell uses its own gradient: `relu(sum_h dY/dG'[i,j,h] * G'[i,j,h])`.
    #[default]
    Elementwise,
    /// One weight per channel, the spatial mean of its gradient. Pooling and
    /// the spatial softmax ignore per-channel offsets, so these means vanish
    /// for this model and the map is dominated by rounding noise.
    SpatialMean,
}

impl std::str::FromStr for CamWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "elementwise" => Ok(Self::Elementwise),
            "mean" | "spatial-mean" => Ok(Self::SpatialMean),
            other => Err(Error::config(format!("unknown Grad-CAM weighting '{other}'"))),
        }
    }
}

/// Unnormalised Grad-CAM map of a response `gp` given the target's
/// gradients with respect to it.
pub fn cam_from_gradients(gp: &Tensor3, grads: &Tensor3, weighting: CamWeighting) -> Result<HeatMap> {
    if gp.shape() != grads.shape() {
        return Err(Error::dims(format!(
            "response {:?} vs gradient {:?}",
            gp.shape(),
            grads.shape()
        )));
    }
    let cells = gp.cells() as f64;
    let means: Vec<f64> = (0..gp.depth())
        .map(|h| grads.channel(h).iter().sum::<f64>() / cells)
        .collect();
    let values = (0..gp.rows())
        .flat_map(|i| (0..gp.cols()).map(move |j| (i, j)))
        .map(|(i, j)| {
            let weights = match weighting {
                CamWeighting::Elementwise => grads.cell(i, j),
                CamWeighting::SpatialMean => &means[..],
            };
            let s: f64 = gp.cell(i, j).iter().zip(weights).map(|(g, w)| g * w).sum();
            s.max(0.0)
        })
        .collect();
    HeatMap::new(gp.rows(), gp.cols(), values)
}

/// Unnormalised grid-resolution Grad-CAM over the convolution response `G'`.
pub fn grad_cam_cells(
    trace: &mut ForwardTrace,
    cfg: &AttentionConfig,
    target: Target,
    weighting: CamWeighting,
) -> Result<HeatMap> {
    let index = target_index(cfg, target)?;
    let grads = trace.output_gradient_wrt_g_prime(index)?;
    cam_from_gradients(trace.g_prime(), &grads, weighting)
}

/// Grad-CAM saliency of `target` (a class logit, or the regression score),
/// normalised and upscaled by `p`.
pub fn grad_cam(
    params: &ModelParams,
    cfg: &AttentionConfig,
    grid: &GridFeatureMap,
    target: Target,
    weighting: CamWeighting,
    p: usize,
) -> Result<HeatMap> {
    let mut trace = forward(grid, params, cfg)?;
    grad_cam_cells(&mut trace, cfg, target, weighting)?.normalized().upscaled(p)
}

const fn blue_red_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let green = if i < 128 { 2 * i } else { 2 * (255 - i) + 1 };
        lut[i] = [i as u8, green as u8, (255 - i) as u8];
        i += 1;
    }
    lut
}

/// Pseudo-colour table from blue (0) through grey-green to red (255):
/// entry `i` is `(i, g, 255 - i)` with `g` rising linearly to 255 at the
/// midpoint and falling back to 1.
pub const BLUE_RED_LUT: [[u8; 3]; 256] = blue_red_lut();

pub fn encode_pgm(map: &HeatMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    out.extend(map.to_bytes());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<HeatMap> {
    let (h, w, raster) = parse_netpbm(bytes, "P5", 1)?;
    HeatMap::new(h, w, raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn write_pgm(map: &HeatMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<HeatMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Writes `map` through [`BLUE_RED_LUT`] as a binary PPM.
pub fn write_color_ppm(map: &HeatMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(&map.to_rgb(&BLUE_RED_LUT))).map_err(|e| Error::io(path, e))
}
