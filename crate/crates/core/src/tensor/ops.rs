use super::{ActivationKind, Matrix, PoolMode, Tensor3};
use crate::error::{Error, Result};

/// Same-padded convolution whose kernels span the full input depth.
///
/// `kernels` holds `bias.len()` kernels of `n x n x depth` values, kernel `h`
/// tap `(di, dj, k)` at offset `((h * n + di) * n + dj) * depth + k`.
pub fn conv_depthk(input: &Tensor3, kernels: &[f64], bias: &[f64], n: usize) -> Result<Tensor3> {
    let (rows, cols, depth) = input.shape();
    let h_count = bias.len();
    check_conv(kernels, h_count, n, depth)?;
    let r = n / 2;
    let mut out = Tensor3::zeros(rows, cols, h_count);
    let mut acc = vec![0.0f64; h_count];
    for i in 0..rows {
        for j in 0..cols {
            acc.copy_from_slice(bias);
            for di in 0..n {
                let Some(ii) = (i + di).checked_sub(r).filter(|&v| v < rows) else {
                    continue;
                };
                for dj in 0..n {
                    let Some(jj) = (j + dj).checked_sub(r).filter(|&v| v < cols) else {
                        continue;
                    };
                    let g = input.cell(ii, jj);
                    for (h, a) in acc.iter_mut().enumerate() {
                        let o = ((h * n + di) * n + dj) * depth;
                        *a += dot(&kernels[o..o + depth], g);
                    }
                }
            }
            out.cell_mut(i, j).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

fn check_conv(kernels: &[f64], h_count: usize, n: usize, depth: usize) -> Result<()> {
    if n == 0 || n.is_multiple_of(2) {
        return Err(Error::config(format!("kernel size must be odd and positive, got {n}")));
    }
    if h_count == 0 {
        return Err(Error::config("at least one kernel is required"));
    }
    if kernels.len() != h_count * n * n * depth {
        return Err(Error::dims(format!(
            "{h_count} kernels of {n}x{n} need depth {depth} ({} values), got {} values",
            h_count * n * n * depth,
            kernels.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor3,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(
    input: &Tensor3,
    kernels: &[f64],
    n: usize,
    grad_out: &Tensor3,
) -> Result<ConvGrads> {
    let (rows, cols, depth) = input.shape();
    let h_count = grad_out.depth();
    check_conv(kernels, h_count, n, depth)?;
    if grad_out.rows() != rows || grad_out.cols() != cols {
        return Err(Error::dims("conv gradient shape differs from input grid"));
    }
    let r = n / 2;
    let mut g_input = Tensor3::zeros(rows, cols, depth);
    let mut g_kernels = vec![0.0; kernels.len()];
    let mut g_bias = vec![0.0; h_count];
    for i in 0..rows {
        for j in 0..cols {
            let go = grad_out.cell(i, j);
            for (b, g) in g_bias.iter_mut().zip(go) {
                *b += g;
            }
            for di in 0..n {
                let Some(ii) = (i + di).checked_sub(r).filter(|&v| v < rows) else {
                    continue;
                };
                for dj in 0..n {
                    let Some(jj) = (j + dj).checked_sub(r).filter(|&v| v < cols) else {
                        continue;
                    };
                    let base = (ii * cols + jj) * depth;
                    for (h, &gh) in go.iter().enumerate() {
                        if gh == 0.0 {
                            continue;
                        }
                        let o = ((h * n + di) * n + dj) * depth;
                        let x = &input.values()[base..base + depth];
                        for (gk, xv) in g_kernels[o..o + depth].iter_mut().zip(x) {
                            *gk += gh * xv;
                        }
                        let gi = &mut g_input.values_mut()[base..base + depth];
                        for (gv, kv) in gi.iter_mut().zip(&kernels[o..o + depth]) {
                            *gv += gh * kv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_input,
        kernels: g_kernels,
        bias: g_bias,
    })
}

/// Source cell chosen by each max/min pooling output; empty for averaging.
#[derive(Clone, Debug, Default)]
pub struct PoolTrace {
    pub source: Vec<usize>,
}

/// Stride-1, shape-preserving pooling over a square window centred on each
/// cell. Cells outside the grid are excluded, not padded.
pub fn spatial_pool(x: &Tensor3, mode: PoolMode, window: usize) -> Result<Tensor3> {
    spatial_pool_traced(x, mode, window).map(|(out, _)| out)
}

pub fn spatial_pool_traced(
    x: &Tensor3,
    mode: PoolMode,
    window: usize,
) -> Result<(Tensor3, PoolTrace)> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::config(format!(
            "pool window must be odd and positive, got {window}"
        )));
    }
    let (rows, cols, depth) = x.shape();
    let r = window / 2;
    let mut out = Tensor3::zeros(rows, cols, depth);
    let mut source = Vec::new();
    if mode != PoolMode::Avg {
        source.reserve(x.values().len());
    }
    for i in 0..rows {
        let (r0, r1) = (i.saturating_sub(r), (i + r).min(rows - 1));
        for j in 0..cols {
            let (c0, c1) = (j.saturating_sub(r), (j + r).min(cols - 1));
            for k in 0..depth {
                match mode {
                    PoolMode::Avg => {
                        let mut sum = 0.0;
                        for ii in r0..=r1 {
                            for jj in c0..=c1 {
                                sum += x.get(ii, jj, k);
                            }
                        }
                        let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                        out.set(i, j, k, sum / count);
                    }
                    PoolMode::Max | PoolMode::Min => {
                        let mut best = x.get(r0, c0, k);
                        let mut best_cell = r0 * cols + c0;
                        for ii in r0..=r1 {
                            for jj in c0..=c1 {
                                let v = x.get(ii, jj, k);
                                let better = match mode {
                                    PoolMode::Max => v > best,
                                    _ => v < best,
                                };
                                if better {
                                    best = v;
                                    best_cell = ii * cols + jj;
                                }
                            }
                        }
                        out.set(i, j, k, best);
                        source.push(best_cell);
                    }
                }
            }
        }
    }
    Ok((out, PoolTrace { source }))
}

pub fn pool_backward(
    x: &Tensor3,
    mode: PoolMode,
    window: usize,
    trace: &PoolTrace,
    grad_out: &Tensor3,
) -> Tensor3 {
    let (rows, cols, depth) = x.shape();
    let mut g = Tensor3::zeros(rows, cols, depth);
    match mode {
        PoolMode::Max | PoolMode::Min => {
            for (o, (&src, &go)) in trace.source.iter().zip(grad_out.values()).enumerate() {
                let k = o % depth;
                g.values_mut()[src * depth + k] += go;
            }
        }
        PoolMode::Avg => {
            let r = window / 2;
            for i in 0..rows {
                let (r0, r1) = (i.saturating_sub(r), (i + r).min(rows - 1));
                for j in 0..cols {
                    let (c0, c1) = (j.saturating_sub(r), (j + r).min(cols - 1));
                    let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                    for k in 0..depth {
                        let share = grad_out.get(i, j, k) / count;
                        for ii in r0..=r1 {
                            for jj in c0..=c1 {
                                let o = g.offset(ii, jj, k);
                                g.values_mut()[o] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

/// Softmax over all spatial cells, independently per channel.
pub fn spatial_softmax(x: &Tensor3) -> Tensor3 {
    let depth = x.depth();
    let cells = x.cells();
    let mut out = Tensor3::zeros(x.rows(), x.cols(), depth);
    let xs = x.values();
    for k in 0..depth {
        let mut max = f64::NEG_INFINITY;
        for c in 0..cells {
            max = max.max(xs[c * depth + k]);
        }
        let mut total = 0.0;
        for c in 0..cells {
            let e = (xs[c * depth + k] - max).exp();
            out.values_mut()[c * depth + k] = e;
            total += e;
        }
        for c in 0..cells {
            out.values_mut()[c * depth + k] /= total;
        }
    }
    out
}

/// Vector-Jacobian product of [`spatial_softmax`] given its output `y`.
pub fn softmax_backward(y: &Tensor3, grad_y: &Tensor3) -> Tensor3 {
    let depth = y.depth();
    let cells = y.cells();
    let mut g = Tensor3::zeros(y.rows(), y.cols(), depth);
    for k in 0..depth {
        let mut inner = 0.0;
        for c in 0..cells {
            inner += y.values()[c * depth + k] * grad_y.values()[c * depth + k];
        }
        for c in 0..cells {
            let o = c * depth + k;
            g.values_mut()[o] = y.values()[o] * (grad_y.values()[o] - inner);
        }
    }
    g
}

/// Attention-weighted sums of grid features: `v[h, k] = sum_c A[c, h] G[c, k]`.
pub fn attend_aggregate(attention: &Tensor3, grid: &Tensor3) -> Result<Matrix> {
    check_spatial(attention, grid)?;
    let h_count = attention.depth();
    let depth = grid.depth();
    let mut v = Matrix::zeros(h_count, depth);
    for c in 0..grid.cells() {
        let a = &attention.values()[c * h_count..(c + 1) * h_count];
        let g = &grid.values()[c * depth..(c + 1) * depth];
        for (h, &ah) in a.iter().enumerate() {
            let row = &mut v.values[h * depth..(h + 1) * depth];
            for (vk, gk) in row.iter_mut().zip(g) {
                *vk += ah * gk;
            }
        }
    }
    Ok(v)
}

fn check_spatial(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dims(format!(
            "spatial sizes differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Returns the gradients with respect to the attention map and the grid.
pub fn aggregate_backward(
    attention: &Tensor3,
    grid: &Tensor3,
    grad_v: &Matrix,
) -> Result<(Tensor3, Tensor3)> {
    check_spatial(attention, grid)?;
    let h_count = attention.depth();
    let depth = grid.depth();
    if grad_v.rows != h_count || grad_v.cols != depth {
        return Err(Error::dims("aggregate gradient has the wrong shape"));
    }
    let mut ga = Tensor3::zeros(attention.rows(), attention.cols(), h_count);
    let mut gg = Tensor3::zeros(grid.rows(), grid.cols(), depth);
    for c in 0..grid.cells() {
        let a = &attention.values()[c * h_count..(c + 1) * h_count];
        let g = &grid.values()[c * depth..(c + 1) * depth];
        for (h, &ah) in a.iter().enumerate() {
            let gv = grad_v.row(h);
            ga.values_mut()[c * h_count + h] = dot(gv, g);
            let ggc = &mut gg.values_mut()[c * depth..(c + 1) * depth];
            for (x, gvk) in ggc.iter_mut().zip(gv) {
                *x += ah * gvk;
            }
        }
    }
    Ok((ga, gg))
}

#[inline]
pub(crate) fn activate(x: f64, kind: ActivationKind) -> f64 {
    match kind {
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::Tanh => x.tanh(),
    }
}

pub fn activation(v: &Matrix, kind: ActivationKind) -> Matrix {
    Matrix {
        rows: v.rows,
        cols: v.cols,
        values: v.values.iter().map(|&x| activate(x, kind)).collect(),
    }
}

/// Gradient through an element-wise activation, given its input and output.
pub fn activation_backward(
    input: &[f64],
    output: &[f64],
    grad_out: &[f64],
    kind: ActivationKind,
) -> Vec<f64> {
    input
        .iter()
        .zip(output)
        .zip(grad_out)
        .map(|((&x, &y), &g)| match kind {
            ActivationKind::Relu => {
                if x > 0.0 {
                    g
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => g * (1.0 - y * y),
        })
        .collect()
}

/// `weights` is a row-major `bias.len() x features.len()` matrix.
pub fn linear_head(features: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    check_linear(features.len(), weights.len(), bias.len())?;
    let d = features.len();
    Ok(bias
        .iter()
        .enumerate()
        .map(|(c, b)| b + dot(&weights[c * d..(c + 1) * d], features))
        .collect())
}

fn check_linear(d: usize, w: usize, c: usize) -> Result<()> {
    if c == 0 || w != c * d {
        return Err(Error::dims(format!(
            "linear layer with {c} outputs and {d} inputs needs {} weights, got {w}",
            c * d
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn linear_backward(features: &[f64], weights: &[f64], grad_out: &[f64]) -> Result<LinearGrads> {
    check_linear(features.len(), weights.len(), grad_out.len())?;
    let d = features.len();
    let mut gf = vec![0.0; d];
    let mut gw = vec![0.0; weights.len()];
    for (c, &go) in grad_out.iter().enumerate() {
        let w = &weights[c * d..(c + 1) * d];
        for ((gfk, wk), (gwk, fk)) in gf
            .iter_mut()
            .zip(w)
            .zip(gw[c * d..(c + 1) * d].iter_mut().zip(features))
        {
            *gfk += go * wk;
            *gwk += go * fk;
        }
    }
    Ok(LinearGrads {
        features: gf,
        weights: gw,
        bias: grad_out.to_vec(),
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::config(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn cross_entropy_backward(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::config(format!(
            "label {label} outside 0..{}",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    Ok(logits
        .iter()
        .enumerate()
        .map(|(c, &z)| (z - lse).exp() - if c == label { 1.0 } else { 0.0 })
        .collect())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, depth: usize, vals: &[f64]) -> Tensor3 {
        Tensor3::from_vec(rows, cols, depth, vals.to_vec()).unwrap()
    }

    fn lcg_grid(rows: usize, cols: usize, depth: usize, seed: u64) -> Tensor3 {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Tensor3::from_fn(rows, cols, depth, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn one_by_one_kernel_selects_channel() {
        let g = lcg_grid(3, 4, 5, 1);
        let mut kernel = vec![0.0; 5];
        kernel[2] = 1.0;
        let out = conv_depthk(&g, &kernel, &[0.0], 1).unwrap();
        assert_eq!(out.shape(), (3, 4, 1));
        assert_eq!(out.channel(0), g.channel(2));
    }

    #[test]
    fn zero_kernels_give_bias() {
        let g = lcg_grid(3, 3, 2, 2);
        let out = conv_depthk(&g, &vec![0.0; 2 * 9 * 2], &[1.5, -0.5], 3).unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 1.5));
        assert!(out.channel(1).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn only_centre_tap_sees_single_cell() {
        let g = grid(1, 1, 3, &[1.0, 2.0, 3.0]);
        let mut k = vec![9.0; 27];
        k[4 * 3..4 * 3 + 3].copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = conv_depthk(&g, &k, &[0.25], 3).unwrap();
        assert_eq!(out.values(), &[0.5 - 2.0 + 6.0 + 0.25]);
    }

    #[test]
    fn conv_depth_mismatch_is_error() {
        let g = lcg_grid(2, 2, 4, 3);
        let err = conv_depthk(&g, &vec![0.0; 9 * 3], &[0.0], 3).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        assert!(matches!(
            conv_depthk(&g, &[0.0; 4 * 4], &[0.0], 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn pooling_examples() {
        let c = grid(2, 2, 1, &[7.0; 4]);
        for mode in PoolMode::ORDER {
            assert_eq!(spatial_pool(&c, mode, 3).unwrap(), c);
        }
        let x = grid(2, 2, 1, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spatial_pool(&x, PoolMode::Max, 3).unwrap().values(), &[4.0; 4]);
        assert_eq!(spatial_pool(&x, PoolMode::Min, 3).unwrap().values(), &[1.0; 4]);
        assert_eq!(spatial_pool(&x, PoolMode::Avg, 3).unwrap().values(), &[2.5; 4]);
        let r = lcg_grid(4, 5, 3, 9);
        for mode in PoolMode::ORDER {
            assert_eq!(spatial_pool(&r, mode, 1).unwrap(), r);
        }
        assert!(matches!(
            spatial_pool(&x, PoolMode::Max, 2),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = grid(1, 3, 1, &[3.0, 6.0, 9.0]);
        let out = spatial_pool(&x, PoolMode::Avg, 3).unwrap();
        assert_eq!(out.values(), &[4.5, 6.0, 7.5]);
    }

    #[test]
    fn softmax_examples() {
        let one = grid(1, 1, 2, &[42.0, -3.0]);
        assert_eq!(spatial_softmax(&one).values(), &[1.0, 1.0]);
        let flat = grid(2, 2, 1, &[0.3; 4]);
        assert_eq!(spatial_softmax(&flat).values(), &[0.25; 4]);
        let pair = grid(1, 2, 1, &[0.0, 3.0f64.ln()]);
        let s = spatial_softmax(&pair);
        assert!((s.values()[0] - 0.25).abs() < 1e-15);
        assert!((s.values()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_huge_inputs() {
        let x = grid(1, 3, 1, &[1e4, -1e4, 9999.0]);
        let s = spatial_softmax(&x);
        assert!(s.all_finite());
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let g = lcg_grid(4, 5, 3, 4);
        let mut a = Tensor3::zeros(4, 5, 2);
        a.set(2, 3, 0, 1.0);
        a.set(2, 3, 1, 1.0);
        let v = attend_aggregate(&a, &g).unwrap();
        assert_eq!(v.row(0), g.cell(2, 3));
        assert_eq!(v.row(1), g.cell(2, 3));

        let u = Tensor3::from_fn(4, 5, 1, |_, _, _| 1.0 / 20.0);
        let v = attend_aggregate(&u, &g).unwrap();
        for k in 0..3 {
            let mean = g.channel(k).iter().sum::<f64>() / 20.0;
            assert!((v.get(0, k) - mean).abs() < 1e-12);
        }

        let bad = Tensor3::zeros(4, 4, 1);
        assert!(attend_aggregate(&bad, &g).is_err());
    }

    #[test]
    fn activation_examples() {
        let m = Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(activation(&m, ActivationKind::Relu).values, vec![0.0, 2.0]);
        let z = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        assert_eq!(activation(&z, ActivationKind::Tanh).values, vec![0.0]);
        let neg = Matrix::from_vec(2, 2, vec![-1.0, -0.1, -5.0, -2.0]).unwrap();
        assert_eq!(activation(&neg, ActivationKind::Relu).values, vec![0.0; 4]);
    }

    #[test]
    fn linear_examples() {
        let f = [1.0, -2.0, 3.0];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(linear_head(&f, &eye, &[0.0; 3]).unwrap(), f.to_vec());
        assert_eq!(linear_head(&f, &[0.0; 3], &[2.5]).unwrap(), vec![2.5]);
        assert_eq!(linear_head(&[1.0; 4], &[1.0; 4], &[0.0]).unwrap(), vec![4.0]);
        assert!(linear_head(&f, &[0.0; 4], &[0.0]).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        assert!((cross_entropy_value(&[0.0, 0.0], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_value(&[20.0, -20.0], 0).unwrap() < 1e-8);
        let v = cross_entropy_value(&[0.0, 3f64.ln()], 1).unwrap();
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(cross_entropy_value(&[0.0, 0.0], 2).is_err());
    }
}
