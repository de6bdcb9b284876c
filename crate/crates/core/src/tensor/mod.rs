//! Dense tensors and the differentiable layers used by the attention
//! classifier.
//!
//! Layout is row-major over the spatial grid with the channel axis fastest:
//! element `(i, j, k)` of a `rows x cols x depth` tensor lives at offset
//! `(i * cols + j) * depth + k`.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradientReport};
pub use ops::{
    activation, activation_backward, aggregate_backward, attend_aggregate, conv_backward,
    conv_depthk, cross_entropy_backward, cross_entropy_value, linear_backward, linear_head,
    pool_backward, softmax_backward, spatial_pool, spatial_pool_traced, spatial_softmax,
    ConvGrads, LinearGrads, PoolTrace,
};
pub use tape::{Gradients, Tape, Var};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T = f64> {
    rows: usize,
    cols: usize,
    depth: usize,
    values: Vec<T>,
}

impl<T: Copy + Default> Tensor3<T> {
    /// Panics if any dimension is zero.
    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        assert!(
            rows > 0 && cols > 0 && depth > 0,
            "tensor dimensions must be positive, got {rows}x{cols}x{depth}"
        );
        Self {
            rows,
            cols,
            depth,
            values: vec![T::default(); rows * cols * depth],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, depth: usize, values: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || depth == 0 {
            return Err(Error::dims(format!(
                "tensor dimensions must be positive, got {rows}x{cols}x{depth}"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(depth))
            .ok_or_else(|| Error::dims("tensor size overflows"))?;
        if values.len() != expected {
            return Err(Error::dims(format!(
                "{rows}x{cols}x{depth} tensor needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            depth,
            values,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(rows, cols, depth);
        for i in 0..rows {
            for j in 0..cols {
                for k in 0..depth {
                    let o = t.offset(i, j, k);
                    t.values[o] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.depth)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols && k < self.depth);
        (i * self.cols + j) * self.depth + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: T) {
        let o = self.offset(i, j, k);
        self.values[o] = value;
    }

    /// The depth-long vector stored at spatial cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[T] {
        let o = (i * self.cols + j) * self.depth;
        &self.values[o..o + self.depth]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let o = (i * self.cols + j) * self.depth;
        &mut self.values[o..o + self.depth]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn map<U: Copy + Default>(&self, f: impl FnMut(T) -> U) -> Tensor3<U> {
        Tensor3 {
            rows: self.rows,
            cols: self.cols,
            depth: self.depth,
            values: self.values.iter().copied().map(f).collect(),
        }
    }

    /// Channel `k` as a `rows x cols` matrix.
    pub fn channel(&self, k: usize) -> Vec<T> {
        (0..self.cells())
            .map(|c| self.values[c * self.depth + k])
            .collect()
    }
}

impl Tensor3<f64> {
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Tensor3<f32> {
    pub fn to_f64(&self) -> Tensor3<f64> {
        self.map(f64::from)
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

impl PoolMode {
    /// Fixed concatenation order of the attention branches.
    pub const ORDER: [PoolMode; 3] = [PoolMode::Max, PoolMode::Min, PoolMode::Avg];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Min => "min",
            PoolMode::Avg => "avg",
        }
    }

    pub(crate) fn bit(self) -> u32 {
        match self {
            PoolMode::Max => 1,
            PoolMode::Min => 2,
            PoolMode::Avg => 4,
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(PoolMode::Max),
            "min" => Ok(PoolMode::Min),
            "avg" | "mean" => Ok(PoolMode::Avg),
            other => Err(Error::config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActivationKind {
    #[default]
    Relu,
    Tanh,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Tanh => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ActivationKind::Relu),
            1 => Some(ActivationKind::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}
