//! Helpers shared by the integration tests: random model instances and
//! brute-force reference implementations of the evaluation statistics.

#![allow(dead_code)]

use gridattn::grid::TaskKind;
use gridattn::model::{forward_tensor, AttentionConfig, ModelParams, Target};
use gridattn::tensor::{ActivationKind, PoolMode, Tensor3};
use rand::Rng;

pub const MODE_SETS: [&[PoolMode]; 7] = [
    &[PoolMode::Max, PoolMode::Min],
    &[PoolMode::Max],
    &[PoolMode::Min],
    &[PoolMode::Avg],
    &[PoolMode::Max, PoolMode::Avg],
    &[PoolMode::Min, PoolMode::Avg],
    &[PoolMode::Max, PoolMode::Min, PoolMode::Avg],
];

pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, depth: usize, scale: f64) -> Tensor3 {
    Tensor3::from_fn(rows, cols, depth, |_, _, _| rng.random_range(-scale..scale))
}

/// A random small network in the ranges used by the gradient checks.
pub struct Instance {
    pub cfg: AttentionConfig,
    pub params: ModelParams,
    pub grid: Tensor3,
    pub target: Target,
}

pub fn random_instance<R: Rng>(rng: &mut R, index: usize) -> Instance {
    let task = if index % 3 == 2 { TaskKind::Regression } else { TaskKind::Classification };
    let k = if rng.random_bool(0.5) { 4 } else { 8 };
    let mut cfg = AttentionConfig::new(task, k).with_modes(MODE_SETS[index % MODE_SETS.len()]);
    cfg.h = rng.random_range(2..=3);
    cfg.n = if rng.random_bool(0.5) { 1 } else { 3 };
    cfg.pool_window = if rng.random_bool(0.5) { 1 } else { 3 };
    cfg.activation = if index % 4 == 3 { ActivationKind::Tanh } else { ActivationKind::Relu };
    let params = ModelParams::init(&cfg, rng.random()).unwrap();
    let rows = rng.random_range(3..=8);
    let cols = rng.random_range(3..=8);
    let grid = random_tensor(rng, rows, cols, k, 1.0);
    let target = match task {
        TaskKind::Classification => Target::Class(rng.random_range(0..2)),
        TaskKind::Regression => Target::Score(rng.random_range(0.0..1.0)),
    };
    Instance { cfg, params, grid, target }
}

impl Instance {
    /// Loss and gradient with respect to every free value: convolution
    /// kernels, linear weights, linear bias, then the grid. The convolution
    /// bias is held fixed, see [`Instance::conv_bias_gradients`].
    pub fn loss_and_grad(&self, theta: &[f64]) -> gridattn::Result<(f64, Vec<f64>)> {
        let nk = self.params.conv_kernels.len();
        let nw = self.params.linear_weights.len();
        let nb = self.params.linear_bias.len();
        let params = ModelParams {
            conv_kernels: theta[..nk].to_vec(),
            conv_bias: self.params.conv_bias.clone(),
            linear_weights: theta[nk..nk + nw].to_vec(),
            linear_bias: theta[nk + nw..nk + nw + nb].to_vec(),
        };
        let (r, c, d) = self.grid.shape();
        let grid = Tensor3::from_vec(r, c, d, theta[nk + nw + nb..].to_vec())?;
        let mut trace = forward_tensor(grid, &params, &self.cfg)?;
        let bp = trace.backward(self.target)?;
        let mut g = bp.params.conv_kernels;
        g.extend(bp.params.linear_weights);
        g.extend(bp.params.linear_bias);
        g.extend(bp.grid);
        Ok((bp.loss, g))
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.params.conv_kernels.clone();
        t.extend_from_slice(&self.params.linear_weights);
        t.extend_from_slice(&self.params.linear_bias);
        t.extend_from_slice(self.grid.values());
        t
    }

    /// Largest analytic and central-difference gradient magnitudes over the
    /// convolution bias. Every pooling mode and the softmax are invariant to
    /// a per-channel constant, so both should vanish.
    pub fn conv_bias_gradients(&self, eps: f64) -> (f64, f64) {
        let loss = |bias: &[f64]| {
            let params = ModelParams {
                conv_bias: bias.to_vec(),
                ..self.params.clone()
            };
            let mut t = forward_tensor(self.grid.clone(), &params, &self.cfg).unwrap();
            t.backward(self.target).unwrap()
        };
        let base = loss(&self.params.conv_bias);
        let analytic = base.params.conv_bias.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut numeric = 0.0f64;
        let mut b = self.params.conv_bias.clone();
        for i in 0..b.len() {
            let orig = b[i];
            b[i] = orig + eps;
            let plus = loss(&b).loss;
            b[i] = orig - eps;
            let minus = loss(&b).loss;
            b[i] = orig;
            numeric = numeric.max(((plus - minus) / (2.0 * eps)).abs());
        }
        (analytic, numeric)
    }
}

/// Pairwise Mann-Whitney count.
pub fn auc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

/// Average ranks by counting smaller and equal elements.
pub fn ranks_brute(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_brute(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman_brute(a: &[f64], b: &[f64]) -> f64 {
    pearson_brute(&ranks_brute(a), &ranks_brute(b))
}

/// Signed-rank statistic and two-sided p-value by enumerating every sign
/// pattern of the non-zero differences.
pub fn wilcoxon_brute(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = ranks_brute(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let total: f64 = ranks.iter().sum();
    let n = d.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= w_plus + 1e-9 {
            le += 1;
        }
        if w >= w_plus - 1e-9 {
            ge += 1;
        }
    }
    let p = (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0);
    (w_plus.min(total - w_plus), w_plus, p)
}

/// Values drawn from a few levels so that ties are frequent.
pub fn tied_values<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..=6);
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 1.0).collect()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: {got} vs brute force {want}"))
    }
}

/// Compares auc, spearman and the Wilcoxon test with the brute-force
/// versions on one random draw of size at most 8.
pub fn check_metric_draw<R: Rng>(rng: &mut R) -> Result<(), String> {
    use gridattn::metrics::{auc, spearman, wilcoxon_signed_rank};
    let n = rng.random_range(2..=8);
    let scores = if rng.random_bool(0.5) {
        tied_values(rng, n)
    } else {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
    match auc(&scores, &labels) {
        Ok(v) if both => close("auc", v, auc_brute(&scores, &labels), 1e-12)?,
        Err(_) if !both => {}
        other => return Err(format!("auc on {scores:?} {labels:?}: {other:?}")),
    }

    let other = tied_values(rng, n);
    let want = spearman_brute(&scores, &other);
    match spearman(&scores, &other) {
        Ok(v) if want.is_finite() => close("spearman", v, want, 1e-12)?,
        Err(_) if !want.is_finite() => {}
        got => return Err(format!("spearman on {scores:?} {other:?}: {got:?}")),
    }

    let nonzero = scores.iter().zip(&other).any(|(a, b)| a != b);
    match wilcoxon_signed_rank(&scores, &other) {
        Ok(r) if nonzero => {
            let (stat, w_plus, p) = wilcoxon_brute(&scores, &other);
            close("wilcoxon statistic", r.statistic, stat, 1e-12)?;
            close("wilcoxon W+", r.w_plus, w_plus, 1e-12)?;
            close("wilcoxon p", r.p_value, p, 1e-12)?;
        }
        Err(_) if !nonzero => {}
        got => return Err(format!("wilcoxon on {scores:?} {other:?}: {got:?}")),
    }
    Ok(())
}

/// Exact Wilcoxon p-value against enumeration of all `2^n` sign patterns.
pub fn check_wilcoxon_enumeration<R: Rng>(rng: &mut R, n: usize) -> Result<(), String> {
    use gridattn::metrics::wilcoxon_signed_rank;
    let a: Vec<f64> = if rng.random_bool(0.5) {
        tied_values(rng, n)
    } else {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).map(|v: f64| (v * 4.0).round() / 4.0).collect();
    if a.iter().zip(&b).all(|(x, y)| x == y) {
        return Ok(());
    }
    let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    let (stat, _, p) = wilcoxon_brute(&a, &b);
    if !r.exact {
        return Err(format!("n={n} should use the exact distribution"));
    }
    close("wilcoxon statistic", r.statistic, stat, 1e-12)?;
    close("wilcoxon p", r.p_value, p, 1e-12)
}

pub fn golden(name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Attention heat map of a one-channel, pointwise model whose response is
/// the first grid feature.
pub fn attention_map(rows: usize, cols: usize, response: &[f64], p: usize) -> gridattn::saliency::HeatMap {
    let mut cfg = AttentionConfig::new(TaskKind::Classification, 2).with_modes(&[PoolMode::Max]);
    cfg.h = 1;
    cfg.n = 1;
    cfg.pool_window = 1;
    let mut params = ModelParams::zeros(&cfg);
    params.conv_kernels = vec![1.0, 0.0];
    let grid = Tensor3::from_fn(rows, cols, 2, |i, j, k| if k == 0 { response[i * cols + j] } else { 0.0 });
    let trace = forward_tensor(grid, &params, &cfg).unwrap();
    gridattn::saliency::export_attention(&trace, PoolMode::Max, 0, p).unwrap()
}

/// The three golden attention exports: file name and encoded map.
pub fn golden_exports() -> Vec<(&'static str, Vec<u8>)> {
    use gridattn::saliency::encode_pgm;
    vec![
        ("one_hot.pgm", encode_pgm(&attention_map(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0], 2))),
        ("constant.pgm", encode_pgm(&attention_map(2, 3, &[1.5; 6], 2))),
        ("blocks.pgm", encode_pgm(&attention_map(2, 2, &[0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()], 2))),
    ]
}
