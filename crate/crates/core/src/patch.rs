//! Image tiling and a deterministic stand-in feature extractor.
//!
//! Real deployments compute patch features with a pretrained CNN and bring
//! them in through [`import_features`]. [`toy_features`] exists so the whole
//! pipeline runs without one: it uses only orientation-free statistics, so
//! [`extract_grid`] commutes with flips and quarter-turn rotations.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{pack_grid, GridFeatureMap, GridMeta, Transform};
use crate::tensor::Tensor3;

pub const DEFAULT_PATCH_SIZE: usize = 224;
pub const DEFAULT_FEATURE_DEPTH: usize = 512;
pub const DEFAULT_WHITE_THRESHOLD: u8 = 220;
const HIST_BINS: usize = 8;

/// 8-bit RGB image stored as `height x width x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pixels: Tensor3<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, fill: [u8; 3]) -> Self {
        let mut pixels = Tensor3::zeros(height, width, 3);
        for px in pixels.values_mut().chunks_exact_mut(3) {
            px.copy_from_slice(&fill);
        }
        Self { pixels }
    }

    pub fn from_raw(height: usize, width: usize, rgb: Vec<u8>) -> Result<Self> {
        Ok(Self {
            pixels: Tensor3::from_vec(height, width, 3, rgb)?,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut img = Self::new(height, width, [0; 3]);
        for r in 0..height {
            for c in 0..width {
                img.set(r, c, f(r, c));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.pixels.rows()
    }

    pub fn width(&self) -> usize {
        self.pixels.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        self.pixels.cell(r, c).try_into().expect("3 channels")
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        self.pixels.cell_mut(r, c).copy_from_slice(&rgb);
    }

    pub fn raw(&self) -> &[u8] {
        self.pixels.values()
    }

    /// Flips and rotations; shifts fill vacated pixels with black.
    pub fn transformed(&self, t: Transform) -> Result<Self> {
        Ok(Self {
            pixels: t.apply(&self.pixels)?,
        })
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if rect.row1 >= self.height() || rect.col1 >= self.width() || rect.row0 > rect.row1 || rect.col0 > rect.col1 {
            return Err(Error::dims(format!(
                "crop {rect:?} outside a {}x{} image",
                self.height(),
                self.width()
            )));
        }
        Ok(Self::from_fn(rect.height(), rect.width(), |r, c| {
            self.get(rect.row0 + r, rect.col0 + c)
        }))
    }

    /// Halves both dimensions by averaging 2x2 blocks (rounded half up). An
    /// odd trailing row or column is dropped.
    pub fn downscale_2x(&self) -> Result<Self> {
        let (h, w) = (self.height() / 2, self.width() / 2);
        if h == 0 || w == 0 {
            return Err(Error::TooSmall {
                height: self.height(),
                width: self.width(),
                patch: 2,
            });
        }
        Ok(Self::from_fn(h, w, |r, c| {
            let mut out = [0u8; 3];
            for (ch, o) in out.iter_mut().enumerate() {
                let s: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dr, dc)| self.get(2 * r + dr, 2 * c + dc)[ch] as u32)
                    .sum();
                *o = ((s + 2) / 4) as u8;
            }
            out
        }))
    }
}

/// Reads a binary PPM (P6) image with maxval 255.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                message: "truncated header".into(),
            });
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: "missing raster".into(),
        });
    }
    Ok((tokens, pos + 1))
}

pub(crate) fn parse_netpbm(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (tok, start) = header_tokens(bytes, 4)?;
    if tok[0] != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("expected {magic} magic, found '{}'", tok[0]),
        });
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad {what} '{s}'"),
        })
    };
    let width = num(&tok[1], "width")?;
    let height = num(&tok[2], "height")?;
    if num(&tok[3], "maxval")? != 255 {
        return Err(Error::Format {
            offset: 0,
            message: format!("only maxval 255 is supported, found {}", tok[3]),
        });
    }
    let need = width * height * channels;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated raster: need {need} bytes, found {}", raster.len()),
        });
    }
    Ok((height, width, raster[..need].to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (h, w, raster) = parse_netpbm(bytes, "P6", 3)?;
    RgbImage::from_raw(h, w, raster)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.raw());
    out
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn height(&self) -> usize {
        self.row1 - self.row0 + 1
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0 + 1
    }
}

/// Smallest rectangle holding every pixel whose mean channel value is below
/// `white_threshold`.
pub fn tissue_bbox(img: &RgbImage, white_threshold: u8) -> Result<Rect> {
    let limit = 3 * white_threshold as u32;
    let mut rect: Option<Rect> = None;
    for r in 0..img.height() {
        for c in 0..img.width() {
            let px = img.get(r, c);
            if px.iter().map(|&v| v as u32).sum::<u32>() >= limit {
                continue;
            }
            rect = Some(match rect {
                None => Rect {
                    row0: r,
                    col0: c,
                    row1: r,
                    col1: c,
                },
                Some(b) => Rect {
                    row0: b.row0.min(r),
                    col0: b.col0.min(c),
                    row1: b.row1.max(r),
                    col1: b.col1.max(c),
                },
            });
        }
    }
    rect.ok_or(Error::NoTissue {
        threshold: white_threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    /// `p x p x 3`.
    pub pixels: Tensor3<u8>,
}

/// Non-overlapping `p x p` tiles in row-major order. Partial tiles at the
/// bottom and right borders are dropped.
pub fn tile(img: &RgbImage, p: usize) -> Result<(Vec<Patch>, usize, usize)> {
    if p == 0 || img.height() < p || img.width() < p {
        return Err(Error::TooSmall {
            height: img.height(),
            width: img.width(),
            patch: p,
        });
    }
    let (rows, cols) = (img.height() / p, img.width() / p);
    let mut patches = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let pixels = Tensor3::from_fn(p, p, 3, |r, c, ch| img.get(i * p + r, j * p + c)[ch]);
            patches.push(Patch { row: i, col: j, pixels });
        }
    }
    Ok((patches, rows, cols))
}

/// Per-channel means and variances (6 values, on a 0..1 intensity scale),
/// then a seeded random projection of the 3 x 8-bin colour histogram onto
/// the remaining `k - 6` coordinates. With `k < 6` only the first `k`
/// moments are kept.
pub fn toy_features(patch: &Patch, k: usize, seed: u64) -> Result<Vec<f32>> {
    if k < 4 {
        return Err(Error::config(format!("feature depth must be at least 4, got {k}")));
    }
    let px = patch.pixels.values();
    let n = (px.len() / 3) as u64;
    let mut sum = [0u64; 3];
    let mut sq = [0u64; 3];
    let mut hist = [[0u64; HIST_BINS]; 3];
    for rgb in px.chunks_exact(3) {
        for ch in 0..3 {
            let v = rgb[ch] as u64;
            sum[ch] += v;
            sq[ch] += v * v;
            hist[ch][(rgb[ch] >> 5) as usize] += 1;
        }
    }
    let mut out = Vec::with_capacity(k);
    for s in sum {
        out.push(s as f64 / n as f64 / 255.0);
    }
    for ch in 0..3 {
        // n * sq - sum^2 is exact in integers
        let num = (n as u128 * sq[ch] as u128 - sum[ch] as u128 * sum[ch] as u128) as f64;
        out.push(num / (n as f64 * n as f64) / (255.0 * 255.0));
    }
    out.truncate(k);
    if k > 6 {
        let freqs: Vec<f64> = hist.iter().flatten().map(|&c| c as f64 / n as f64).collect();
        let scale = 1.0 / (freqs.len() as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..k - 6 {
            let v: f64 = freqs
                .iter()
                .map(|f| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    w * f
                })
                .sum();
            out.push(v * scale);
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractConfig {
    pub patch_size: usize,
    pub k: usize,
    pub seed: u64,
    pub white_threshold: u8,
    pub microns_per_pixel: f32,
    pub source_id: String,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            k: DEFAULT_FEATURE_DEPTH,
            seed: 0,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            microns_per_pixel: 0.0,
            source_id: String::new(),
        }
    }
}

/// Tissue crop, tiling, per-patch features and packing, in that order.
pub fn extract_grid(img: &RgbImage, cfg: &ExtractConfig) -> Result<GridFeatureMap> {
    let rect = tissue_bbox(img, cfg.white_threshold)?;
    let cropped = img.crop(rect)?;
    let (patches, rows, cols) = tile(&cropped, cfg.patch_size)?;
    let features = patches
        .par_iter()
        .map(|p| toy_features(p, cfg.k, cfg.seed).map(|f| (p.row, p.col, f)))
        .collect::<Result<Vec<_>>>()?;
    pack_grid(
        features,
        rows,
        cols,
        GridMeta {
            patch_size_px: cfg.patch_size as u32,
            microns_per_pixel: cfg.microns_per_pixel,
            source_id: cfg.source_id.clone(),
        },
    )
}

/// Grid of the 2x box-downscaled image; pixel pitch doubles.
pub fn extract_lowres(img: &RgbImage, cfg: &ExtractConfig) -> Result<GridFeatureMap> {
    let low = img.downscale_2x()?;
    let cfg = ExtractConfig {
        microns_per_pixel: cfg.microns_per_pixel * 2.0,
        ..cfg.clone()
    };
    extract_grid(&low, &cfg)
}

/// Parses a comma-separated table with one `i,j,f1,...,fK` row per cell. A
/// leading header row starting with `i` is skipped.
pub fn parse_feature_table<R: Read>(
    reader: R,
    rows: usize,
    cols: usize,
    meta: GridMeta,
) -> Result<GridFeatureMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut cells = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(idx + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        if idx == 0 && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("i")) {
            continue;
        }
        if rec.len() < 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected i, j and at least one feature, found {} fields", rec.len()),
            });
        }
        let index = |f: &str, name: &str| {
            f.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("{name} index '{f}' is not a non-negative integer"),
            })
        };
        let i = index(&rec[0], "row")?;
        let j = index(&rec[1], "column")?;
        let feats = rec
            .iter()
            .skip(2)
            .enumerate()
            .map(|(n, f)| {
                f.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("feature {} '{f}' is not a finite number", n + 1),
                    })
            })
            .collect::<Result<Vec<f32>>>()?;
        cells.push((i, j, feats));
    }
    pack_grid(cells, rows, cols, meta)
}

pub fn import_features(
    csv_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    meta: GridMeta,
) -> Result<GridFeatureMap> {
    let path = csv_path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_feature_table(file, rows, cols, meta)
}
