//! Losses, optimisers, the epoch loop and k-fold cross-validation.
//!
//! Grids in one batch have different spatial sizes and cannot be stacked,
//! so a batch is processed sample by sample: each sample gets its own
//! forward/backward pass and the parameter gradients are averaged before a
//! single optimiser step.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{DatasetManifest, GridFeatureMap, SampleRecord, Split, TaskKind};
use crate::metrics;
use crate::model::{AttentionConfig, ModelParams, Prediction, Target};
use crate::tensor::{cross_entropy_value, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn task(self) -> TaskKind {
        match self {
            LossKind::CrossEntropy => TaskKind::Classification,
            LossKind::Mse => TaskKind::Regression,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// The rate is multiplied by `lr_decay_factor` every `lr_decay_epoch` epochs.
    pub lr_decay_epoch: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
    pub weight_inits: usize,
    pub include_lowres: bool,
    /// Whether augmentation is also applied to low-resolution copies.
    pub augment_lowres: bool,
    /// Reduce per-sample gradients in a fixed order.
    pub deterministic: bool,
}

impl TrainConfig {
    /// 35 epochs, batches of 64, cross-entropy with SGD at 0.001 decayed by
    /// 0.1 after 20 epochs.
    pub fn classification() -> Self {
        Self {
            epochs: 35,
            batch_size: 64,
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerKind::Sgd,
            lr: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 20,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            folds: 4,
            weight_inits: 2,
            include_lowres: true,
            augment_lowres: true,
            deterministic: true,
        }
    }

    /// 35 epochs, batches of 64, squared error with Adam at 0.0001.
    pub fn regression() -> Self {
        Self {
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            lr: 0.0001,
            lr_decay_factor: 1.0,
            ..Self::classification()
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Self::classification(),
            TaskKind::Regression => Self::regression(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config("learning-rate decay factor must be positive"));
        }
        if self.lr_decay_epoch == 0 {
            return Err(Error::config("learning-rate decay period must be at least 1 epoch"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return Err(Error::config("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        if self.weight_inits == 0 {
            return Err(Error::config("at least one weight initialisation is required"));
        }
        Ok(())
    }

    /// `lr * decay_factor ^ floor(epoch / decay_epoch)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_epoch.max(1)) as i32;
        self.lr * self.lr_decay_factor.powi(steps)
    }
}

/// Two-class cross-entropy, computed through a stable log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() != 2 {
        return Err(Error::dims(format!("expected 2 logits, got {}", logits.len())));
    }
    if label > 1 {
        return Err(Error::config(format!("label {label} is not 0 or 1")));
    }
    cross_entropy_value(logits, label)
}

pub fn mse(score: f64, target: f64) -> f64 {
    (score - target) * (score - target)
}

fn check_shapes(theta: &[f64], grads: &[f64]) -> Result<()> {
    if theta.len() != grads.len() {
        return Err(Error::dims(format!(
            "{} parameters but {} gradients",
            theta.len(),
            grads.len()
        )));
    }
    Ok(())
}

/// `θ ← θ - lr(epoch) · g`.
pub fn sgd_step(theta: &mut [f64], grads: &[f64], epoch: usize, cfg: &TrainConfig) -> Result<()> {
    check_shapes(theta, grads)?;
    let lr = cfg.learning_rate(epoch);
    for (t, g) in theta.iter_mut().zip(grads) {
        *t -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam update for step `t` (1-based).
pub fn adam_step(
    theta: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    check_shapes(theta, grads)?;
    if state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::dims("Adam state does not match the parameter count"));
    }
    if t == 0 {
        return Err(Error::State("Adam step counter must start at 1".into()));
    }
    let (b1, b2) = cfg.adam_betas;
    let lr = cfg.learning_rate(epoch);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// One training or evaluation example held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub grid: Arc<Tensor3>,
    pub target: Target,
}

impl Sample {
    pub fn new(id: impl Into<String>, grid: &GridFeatureMap, target: Target) -> Self {
        Self {
            id: id.into(),
            grid: Arc::new(grid.grid.to_f64()),
            target,
        }
    }
}

/// Reads every record's grid (each file once) and applies its augmentation.
/// Shifted copies of grids too small for the shift are left out.
pub fn load_samples(records: &[SampleRecord], base_dir: &Path) -> Result<Vec<Sample>> {
    let mut cache: HashMap<&str, GridFeatureMap> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !cache.contains_key(r.grid_path.as_str()) {
            let g = SampleRecord {
                augmentation_tag: String::new(),
                ..r.clone()
            }
            .load(base_dir)?;
            cache.insert(r.grid_path.as_str(), g);
        }
        let base = &cache[r.grid_path.as_str()];
        let g = match crate::grid::augment_grid(base, r.transform()?) {
            Ok(g) => g,
            Err(Error::DegenerateShift { .. }) => continue,
            Err(e) => return Err(e),
        };
        let id = if r.augmentation_tag.is_empty() {
            r.grid_path.clone()
        } else {
            format!("{}#{}", r.grid_path, r.augmentation_tag)
        };
        out.push(Sample::new(id, &g, r.label.into()));
    }
    Ok(out)
}

fn sample_grad(
    sample: &Sample,
    params: &ModelParams,
    attn: &AttentionConfig,
) -> Result<(f64, ModelParams)> {
    let mut trace = crate::model::forward_tensor((*sample.grid).clone(), params, attn)?;
    let bp = trace.backward(sample.target)?;
    if !bp.loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} on sample {}",
            bp.loss, sample.id
        )));
    }
    Ok((bp.loss, bp.params))
}

const REDUCE_CHUNK: usize = 4;

/// Mean loss and mean parameter gradient over `batch`.
///
/// With `deterministic` the batch is split into fixed chunks that are summed
/// in sample order, so the result does not depend on the thread count.
pub fn batch_gradient(
    batch: &[&Sample],
    params: &ModelParams,
    attn: &AttentionConfig,
    deterministic: bool,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no samples".into()));
    }
    let sum_chunk = |chunk: &[&Sample]| -> Result<(f64, ModelParams)> {
        let mut loss = 0.0;
        let mut acc = ModelParams::zeros(attn);
        for s in chunk {
            let (l, g) = sample_grad(s, params, attn)?;
            loss += l;
            acc.add_scaled(&g, 1.0);
        }
        Ok((loss, acc))
    };
    let (loss, mut grads) = if deterministic {
        let partials = batch
            .par_chunks(REDUCE_CHUNK)
            .map(sum_chunk)
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut acc = ModelParams::zeros(attn);
        for (l, g) in partials {
            loss += l;
            acc.add_scaled(&g, 1.0);
        }
        (loss, acc)
    } else {
        batch
            .par_iter()
            .map(|s| sample_grad(s, params, attn))
            .try_reduce(
                || (0.0, ModelParams::zeros(attn)),
                |(la, mut ga), (lb, gb)| {
                    ga.add_scaled(&gb, 1.0);
                    Ok((la + lb, ga))
                },
            )?
    };
    let scale = 1.0 / batch.len() as f64;
    for part in grads.parts_mut() {
        part.iter_mut().for_each(|g| *g *= scale);
    }
    Ok((loss * scale, grads))
}

/// Optimiser state for whichever algorithm the config selects.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    adam: AdamState,
    step: u64,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, param_count: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            adam: AdamState::new(param_count),
            step: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        epoch: usize,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let mut theta = params.to_flat();
        let g = grads.to_flat();
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_step(&mut theta, &g, epoch, cfg)?,
            OptimizerKind::Adam => adam_step(&mut theta, &g, &mut self.adam, self.step, epoch, cfg)?,
        }
        let mut offset = 0;
        for part in params.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean training loss of every epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
    pub params: ModelParams,
    pub attn: AttentionConfig,
    pub seed: u64,
    pub wall_seconds: f64,
}

fn check_task(samples: &[Sample], cfg: &TrainConfig, attn: &AttentionConfig) -> Result<()> {
    if cfg.loss.task() != attn.task {
        return Err(Error::config(format!(
            "{} loss does not fit a {} model",
            cfg.loss, attn.task
        )));
    }
    for s in samples {
        match (attn.task, s.target) {
            (TaskKind::Classification, Target::Class(c)) if c <= 1 => {}
            (TaskKind::Regression, Target::Score(_)) => {}
            _ => {
                return Err(Error::config(format!(
                    "sample {} has a target unsuitable for {}",
                    s.id, attn.task
                )))
            }
        }
        if s.grid.depth() != attn.k {
            return Err(Error::dims(format!(
                "sample {} has depth {}, model expects {}",
                s.id,
                s.grid.depth(),
                attn.k
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialisation drawn with `seed`.
pub fn train(samples: &[Sample], cfg: &TrainConfig, attn: &AttentionConfig, seed: u64) -> Result<TrainReport> {
    let params = ModelParams::init(attn, seed)?;
    train_from(samples, cfg, attn, params, seed)
}

/// Trains starting from `params`; `seed` drives the per-epoch shuffles.
pub fn train_from(
    samples: &[Sample],
    cfg: &TrainConfig,
    attn: &AttentionConfig,
    mut params: ModelParams,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    attn.validate()?;
    params.check(attn)?;
    if samples.is_empty() {
        return Err(Error::Empty("training split has no samples".into()));
    }
    check_task(samples, cfg, attn)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut opt = Optimizer::new(cfg, params.len());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_gradient(&batch, &params, attn, cfg.deterministic)?;
            total += loss * batch.len() as f64;
            opt.step(&mut params, &grads, epoch, cfg)?;
            if !params.all_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged in epoch {epoch} (batch loss {loss})"
                )));
            }
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("mean loss {mean} in epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        params,
        attn: attn.clone(),
        seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn evaluate(samples: &[Sample], params: &ModelParams, attn: &AttentionConfig) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| {
            let t = crate::model::forward_tensor((*s.grid).clone(), params, attn)?;
            Ok(crate::model::predict(&t, attn))
        })
        .collect()
}

/// AUC for classification, Spearman correlation for regression.
pub fn score_predictions(task: TaskKind, preds: &[Prediction], samples: &[Sample]) -> Result<(&'static str, f64)> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score()).collect();
    match task {
        TaskKind::Classification => {
            let labels: Vec<bool> = samples
                .iter()
                .map(|s| matches!(s.target, Target::Class(1)))
                .collect();
            Ok(("auc", metrics::auc(&scores, &labels)?))
        }
        TaskKind::Regression => {
            let targets: Vec<f64> = samples
                .iter()
                .map(|s| match s.target {
                    Target::Score(v) => v,
                    Target::Class(c) => c as f64,
                })
                .collect();
            Ok(("spearman", metrics::spearman(&scores, &targets)?))
        }
    }
}

/// Splits the training records into `k` folds. Groups of records sharing a
/// source grid (augmented and low-resolution copies) stay together; groups
/// are shuffled with `seed` and dealt in contiguous chunks, the first
/// `groups % k` folds taking one extra group. Every returned record has its
/// split set to its fold id.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<DatasetManifest>> {
    if k < 2 {
        return Err(Error::config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    let mut groups: Vec<Vec<usize>> = manifest
        .groups()
        .into_iter()
        .map(|g| {
            g.into_iter()
                .filter(|&i| manifest.records[i].split.is_training())
                .collect::<Vec<_>>()
        })
        .filter(|g| !g.is_empty())
        .collect();
    if groups.len() < k {
        return Err(Error::config(format!(
            "{} training samples cannot fill {k} folds",
            groups.len()
        )));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = groups.len() / k;
    let extra = groups.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut it = groups.into_iter();
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut m = DatasetManifest::new(manifest.task);
        for g in it.by_ref().take(size) {
            for i in g {
                m.records.push(SampleRecord {
                    split: Split::Fold(f as u32),
                    ..manifest.records[i].clone()
                });
            }
        }
        folds.push(m);
    }
    Ok(folds)
}

/// Training records of every fold but `i`, and the original records of
/// fold `i` (no augmented or low-resolution copies).
pub fn fold_train_val(folds: &[DatasetManifest], i: usize) -> (DatasetManifest, DatasetManifest) {
    let task = folds.first().map_or(TaskKind::Classification, |f| f.task);
    let mut train = DatasetManifest::new(task);
    let mut val = DatasetManifest::new(task);
    for (f, m) in folds.iter().enumerate() {
        if f == i {
            val.records.extend(
                m.records
                    .iter()
                    .filter(|r| !r.is_augmented() && !r.is_derived_resolution())
                    .cloned(),
            );
        } else {
            train.records.extend(m.records.iter().cloned());
        }
    }
    (train, val)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub fold: usize,
    pub init: usize,
    pub seed: u64,
    pub metric: f64,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub task: TaskKind,
    pub metric_name: &'static str,
    pub runs: Vec<RunResult>,
}

impl CvReport {
    pub fn metrics(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.metric).collect()
    }

    pub fn mean(&self) -> f64 {
        mean_std(&self.metrics()).0
    }

    pub fn std(&self) -> f64 {
        mean_std(&self.metrics()).1
    }
}

impl CvReport {
    /// Tab-separated report: one row per run, then `mean` and `std` rows.
    /// Timing is left out so identical runs give identical reports.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# task={} metric={}\nfold\tinit\tseed\t{}\tfinal_loss\n",
            self.task, self.metric_name, self.metric_name
        );
        for r in &self.runs {
            let loss = r.report.epoch_losses.last().copied().unwrap_or(f64::NAN);
            out.push_str(&format!("{}\t{}\t{}\t{:?}\t{:?}\n", r.fold, r.init, r.seed, r.metric, loss));
        }
        out.push_str(&format!("mean\t-\t-\t{:?}\t-\n", self.mean()));
        out.push_str(&format!("std\t-\t-\t{:?}\t-\n", self.std()));
        out
    }
}

/// Per-run metric values of a cross-validation report, keyed by
/// `(fold, init)` and sorted by key.
pub fn parse_report_metrics(text: &str) -> Result<Vec<((usize, usize), f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') || line.starts_with("fold\t") {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("expected at least 4 fields, got {}", fields.len()),
            });
        }
        if fields[0] == "mean" || fields[0] == "std" {
            continue;
        }
        let parse_err = |what: &str| Error::Parse {
            line: n + 1,
            message: format!("invalid {what}"),
        };
        let fold = fields[0].parse().map_err(|_| parse_err("fold"))?;
        let init = fields[1].parse().map_err(|_| parse_err("init"))?;
        let metric: f64 = fields[3].parse().map_err(|_| parse_err("metric"))?;
        out.push(((fold, init), metric));
    }
    if out.is_empty() {
        return Err(Error::Empty("report has no runs".into()));
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of weight initialisation `init` in a run seeded with `seed`.
pub fn init_seed(seed: u64, fold: usize, init: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((fold as u64) << 32)
        .wrapping_add(init as u64 + 1)
}

/// `folds x weight_inits` training runs over the manifest's training
/// records, each scored on its held-out fold.
pub fn cross_validate(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &TrainConfig,
    attn: &AttentionConfig,
) -> Result<CvReport> {
    cfg.validate()?;
    let mut m = manifest.clone();
    if !cfg.include_lowres {
        m.records.retain(|r| !r.is_derived_resolution());
    }
    let folds = kfold_split(&m, cfg.folds, cfg.seed)?;
    let mut runs = Vec::new();
    let mut metric_name = "";
    for f in 0..cfg.folds {
        let (train_m, val_m) = fold_train_val(&folds, f);
        let train_s = load_samples(&train_m.records, base_dir)?;
        let val_s = load_samples(&val_m.records, base_dir)?;
        for init in 0..cfg.weight_inits {
            let seed = init_seed(cfg.seed, f, init);
            let report = train(&train_s, cfg, attn, seed)?;
            let preds = evaluate(&val_s, &report.params, attn)?;
            let (name, metric) = score_predictions(attn.task, &preds, &val_s)?;
            metric_name = name;
            runs.push(RunResult {
                fold: f,
                init,
                seed,
                metric,
                report,
            });
        }
    }
    Ok(CvReport {
        task: attn.task,
        metric_name,
        runs,
    })
}
