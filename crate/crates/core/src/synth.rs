//! Synthetic multiple-instance benchmark.
//!
//! A bag is a grid of unit Gaussian noise. Positive bags carry a few signal
//! cells whose first four feature coordinates are shifted by `mu`, so a
//! model has to find the cells and select the right channels to separate
//! the classes. Regression bags are scored by their fraction of signal cells.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{write_gfm, DatasetManifest, GridFeatureMap, GridMeta, Label, SampleRecord, Split, TaskKind};
use crate::model::{forward, AttentionConfig, ModelParams};
use crate::tensor::{PoolMode, Tensor3};

/// Number of leading feature coordinates that carry the signal.
pub const SIGNAL_DIMS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub k: usize,
    /// Inclusive range of grid rows and columns, drawn independently.
    pub grid_size: (usize, usize),
    /// Inclusive range of signal-cell counts of a positive bag.
    pub signal_cells: (usize, usize),
    pub mu: f64,
    pub seed: u64,
    pub task: TaskKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 16,
            grid_size: (4, 12),
            signal_cells: (1, 3),
            mu: 2.0,
            seed: 0,
            task: TaskKind::Classification,
        }
    }
}

impl SynthConfig {
    /// `mu = 0` is accepted: it produces the no-signal control.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.grid_size;
        if lo == 0 || hi < lo {
            return Err(Error::config(format!("invalid grid size range {lo}..={hi}")));
        }
        let (slo, shi) = self.signal_cells;
        if slo == 0 || shi < slo {
            return Err(Error::config(format!("invalid signal cell range {slo}..={shi}")));
        }
        if shi > lo * lo {
            return Err(Error::config(format!(
                "{shi} signal cells do not fit a {lo}x{lo} grid"
            )));
        }
        if self.k < SIGNAL_DIMS {
            return Err(Error::config(format!("K must be at least {SIGNAL_DIMS}, got {}", self.k)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("signal shift must be finite and non-negative, got {}", self.mu)));
        }
        Ok(())
    }

    /// Generator of bag `index`: one ChaCha stream per bag, so content does
    /// not depend on generation order.
    pub fn bag_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthBag {
    pub grid: GridFeatureMap,
    pub label: Label,
    /// `(row, col)` of every signal cell, in row-major order.
    pub signal_mask: Vec<(usize, usize)>,
}

impl SynthBag {
    pub fn is_positive(&self) -> bool {
        !self.signal_mask.is_empty()
    }
}

/// Draws a bag with `count` signal cells.
pub fn gen_bag_with_count<R: Rng>(cfg: &SynthConfig, count: usize, rng: &mut R) -> Result<SynthBag> {
    cfg.validate()?;
    let (rows, cols) = draw_size(cfg, rng);
    fill_bag(cfg, rows, cols, count, rng)
}

fn draw_size<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> (usize, usize) {
    let (lo, hi) = cfg.grid_size;
    (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

fn fill_bag<R: Rng>(cfg: &SynthConfig, rows: usize, cols: usize, count: usize, rng: &mut R) -> Result<SynthBag> {
    let cells = rows * cols;
    if count > cells {
        return Err(Error::config(format!("{count} signal cells do not fit {rows}x{cols}")));
    }
    let mut grid = Tensor3::<f32>::from_fn(rows, cols, cfg.k, |_, _, _| rng.sample::<f32, _>(StandardNormal));
    let mut chosen = sample(rng, cells, count).into_vec();
    chosen.sort_unstable();
    let signal_mask: Vec<(usize, usize)> = chosen.iter().map(|&c| (c / cols, c % cols)).collect();
    for &(i, j) in &signal_mask {
        for v in &mut grid.cell_mut(i, j)[..SIGNAL_DIMS] {
            *v += cfg.mu as f32;
        }
    }
    let label = match cfg.task {
        TaskKind::Classification => Label::Class(u8::from(count > 0)),
        TaskKind::Regression => Label::Score(count as f64 / cells as f64),
    };
    Ok(SynthBag {
        grid: GridFeatureMap::new(grid, GridMeta::default())?,
        label,
        signal_mask,
    })
}

/// A regression bag whose signal-cell count is uniform over `0..=cells`,
/// so scores spread evenly over `[0, 1]`.
pub fn gen_scored_bag<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthBag> {
    cfg.validate()?;
    let (rows, cols) = draw_size(cfg, rng);
    let count = rng.random_range(0..=rows * cols);
    fill_bag(cfg, rows, cols, count, rng)
}

/// A negative bag, or a positive bag with a uniformly drawn number of signal
/// cells from the configured range.
pub fn gen_bag<R: Rng>(cfg: &SynthConfig, positive: bool, rng: &mut R) -> Result<SynthBag> {
    let count = if positive {
        rng.random_range(cfg.signal_cells.0..=cfg.signal_cells.1)
    } else {
        0
    };
    gen_bag_with_count(cfg, count, rng)
}

/// Bags `first..first + n`. Classification alternates positive and negative
/// bags starting with a positive one; regression bags come from
/// [`gen_scored_bag`].
pub fn gen_bags(cfg: &SynthConfig, first: u64, n: usize) -> Result<Vec<SynthBag>> {
    cfg.validate()?;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let index = first + i;
            let mut rng = cfg.bag_rng(index);
            match cfg.task {
                TaskKind::Classification => gen_bag(cfg, index.is_multiple_of(2), &mut rng),
                TaskKind::Regression => gen_scored_bag(cfg, &mut rng),
            }
        })
        .collect()
}

/// The train and test bags of a benchmark; test bags continue the bag
/// index sequence after the training bags.
pub fn gen_split(cfg: &SynthConfig, n_train: usize, n_test: usize) -> Result<(Vec<SynthBag>, Vec<SynthBag>)> {
    if n_train < 2 || n_test < 2 {
        return Err(Error::config("train and test sets need at least 2 bags each"));
    }
    let train = gen_bags(cfg, 0, n_train)?;
    let test = gen_bags(cfg, n_train as u64, n_test)?;
    Ok((train, test))
}

/// Writes `train/NNNNN.gfm`, `test/NNNNN.gfm`, `train.tsv` and `test.tsv`
/// under `out_dir`. Manifest paths are relative to `out_dir`.
pub fn gen_dataset(
    cfg: &SynthConfig,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, test) = gen_split(cfg, n_train, n_test)?;
    let write = |bags: &[SynthBag], name: &str, split: Split, offset: usize| -> Result<DatasetManifest> {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let records = bags
            .par_iter()
            .enumerate()
            .map(|(i, bag)| {
                let rel = format!("{name}/{:05}.gfm", offset + i);
                write_gfm(&bag.grid, out_dir.join(&rel))?;
                Ok(SampleRecord::new(rel, bag.label, split))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest {
            task: cfg.task,
            records,
        };
        m.write(out_dir.join(format!("{name}.tsv")))?;
        Ok(m)
    };
    let tm = write(&train, "train", Split::Train, 0)?;
    let sm = write(&test, "test", Split::Test, n_train)?;
    Ok((tm, sm))
}

/// Channel-summed max-mode attention of every cell, row-major.
pub fn max_attention_cells(params: &ModelParams, attn: &AttentionConfig, grid: &GridFeatureMap) -> Result<Vec<f64>> {
    let trace = forward(grid, params, attn)?;
    let a = trace.attention(PoolMode::Max)?;
    Ok((0..a.rows())
        .flat_map(|i| (0..a.cols()).map(move |j| (i, j)))
        .map(|(i, j)| a.cell(i, j).iter().sum())
        .collect())
}

/// Index of the maximum, ties broken uniformly at random.
pub fn argmax_random_tie<R: Rng>(values: &[f64], rng: &mut R) -> Option<usize> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..values.len()).filter(|&i| values[i] == best).collect();
    if ties.is_empty() {
        return None;
    }
    Some(ties[rng.random_range(0..ties.len())])
}

/// Fraction of maps whose argmax cell lies in the matching signal mask.
/// Each map is row-major over a grid with `cols[b]` columns.
pub fn hit_rate_from_maps(
    maps: &[Vec<f64>],
    cols: &[usize],
    masks: &[Vec<(usize, usize)>],
    seed: u64,
) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Empty("no bags to localise".into()));
    }
    if maps.len() != masks.len() || maps.len() != cols.len() {
        return Err(Error::dims("maps, column counts and masks differ in length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for ((map, &c), mask) in maps.iter().zip(cols).zip(masks) {
        let idx = argmax_random_tie(map, &mut rng)
            .ok_or_else(|| Error::Empty("empty attention map".into()))?;
        if mask.contains(&(idx / c, idx % c)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / maps.len() as f64)
}

/// Fraction of positive `bags` whose strongest max-mode attention cell is a
/// signal cell.
pub fn localization_hit_rate(
    params: &ModelParams,
    attn: &AttentionConfig,
    bags: &[SynthBag],
    seed: u64,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::Empty("no bags to localise".into()));
    }
    if let Some(i) = bags.iter().position(|b| !b.is_positive()) {
        return Err(Error::config(format!("bag {i} has no signal cells")));
    }
    let maps = bags
        .par_iter()
        .map(|b| max_attention_cells(params, attn, &b.grid))
        .collect::<Result<Vec<_>>>()?;
    let cols: Vec<usize> = bags.iter().map(|b| b.grid.cols()).collect();
    let masks: Vec<Vec<(usize, usize)>> = bags.iter().map(|b| b.signal_mask.clone()).collect();
    hit_rate_from_maps(&maps, &cols, &masks, seed)
}

/// Spatial mean of every feature channel.
pub fn mean_features(g: &GridFeatureMap) -> Vec<f64> {
    let cells = g.grid.cells() as f64;
    (0..g.depth())
        .map(|k| g.grid.channel(k).iter().map(|&v| f64::from(v)).sum::<f64>() / cells)
        .collect()
}

/// Linear model on mean features: logistic regression for classification,
/// least squares for regression, both fitted by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFeatureBaseline {
    pub task: TaskKind,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl MeanFeatureBaseline {
    pub fn fit(task: TaskKind, features: &[Vec<f64>], targets: &[f64], iters: usize, lr: f64) -> Result<Self> {
        if features.is_empty() || features.len() != targets.len() {
            return Err(Error::dims("baseline needs matching, non-empty features and targets"));
        }
        let d = features[0].len();
        let n = features.len() as f64;
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (x, &y) in features.iter().zip(targets) {
                let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let pred = match task {
                    TaskKind::Classification => 1.0 / (1.0 + (-z).exp()),
                    TaskKind::Regression => z,
                };
                let r = pred - y;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
                gb += r;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * g / n;
            }
            b -= lr * gb / n;
        }
        Ok(Self { task, weights: w, bias: b })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>()
    }
}

/// Fits the baseline on `train` and returns its test metric (AUC or
/// Spearman correlation).
pub fn mean_feature_baseline(train: &[SynthBag], test: &[SynthBag]) -> Result<f64> {
    let task = match train.first().map(|b| b.label) {
        Some(Label::Score(_)) => TaskKind::Regression,
        _ => TaskKind::Classification,
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|b| mean_features(&b.grid)).collect();
    let ys: Vec<f64> = train.iter().map(|b| b.label.as_f64()).collect();
    // 1 / (1 + mean |x|^2) bounds the step by the curvature of least squares
    let mean_sq = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / xs.len() as f64;
    let lr = match task {
        TaskKind::Classification => 1.0,
        TaskKind::Regression => 1.0 / (1.0 + mean_sq),
    };
    let model = MeanFeatureBaseline::fit(task, &xs, &ys, 2000, lr)?;
    let scores: Vec<f64> = test.iter().map(|b| model.predict(&mean_features(&b.grid))).collect();
    match task {
        TaskKind::Classification => {
            let labels: Vec<bool> = test.iter().map(|b| b.is_positive()).collect();
            crate::metrics::auc(&scores, &labels)
        }
        TaskKind::Regression => {
            let ys: Vec<f64> = test.iter().map(|b| b.label.as_f64()).collect();
            crate::metrics::spearman(&scores, &ys)
        }
    }
}
