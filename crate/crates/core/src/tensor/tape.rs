//! Reverse-mode differentiation over a recorded sequence of layer calls.
//!
//! Every node stores its forward value as a [`Tensor3`]. Vectors of length
//! `d` are stored as `1 x 1 x d`, matrices `r x c` as `r x c x 1`; the flat
//! row-major order is the same in both views.

use super::ops::{self, PoolTrace};
use super::{ActivationKind, Matrix, PoolMode, Tensor3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        kernels: Var,
        bias: Var,
        n: usize,
    },
    Pool {
        input: Var,
        mode: PoolMode,
        window: usize,
        trace: PoolTrace,
    },
    Softmax {
        input: Var,
    },
    Aggregate {
        attention: Var,
        grid: Var,
    },
    Activation {
        input: Var,
        kind: ActivationKind,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    Mse {
        score: Var,
        target: f64,
    },
    Sum {
        input: Var,
    },
    Select {
        input: Var,
        index: usize,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor3,
    op: Op,
}

/// A single-owner record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn vector(values: Vec<f64>) -> Tensor3 {
    let d = values.len();
    Tensor3::from_vec(1, 1, d, values).expect("non-empty vector")
}

fn scalar(v: f64) -> Tensor3 {
    vector(vec![v])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor3, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this tape", v.0)))
    }

    pub fn leaf(&mut self, value: Tensor3) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A flat parameter vector as a leaf.
    pub fn leaf_vec(&mut self, values: Vec<f64>) -> Var {
        self.push(vector(values), Op::Leaf)
    }

    /// Panics if `v` does not belong to this tape.
    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    pub fn conv(&mut self, input: Var, kernels: Var, bias: Var, n: usize) -> Result<Var> {
        let out = ops::conv_depthk(
            &self.node(input)?.value,
            self.node(kernels)?.value.values(),
            self.node(bias)?.value.values(),
            n,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernels,
                bias,
                n,
            },
        ))
    }

    pub fn pool(&mut self, input: Var, mode: PoolMode, window: usize) -> Result<Var> {
        let (out, trace) = ops::spatial_pool_traced(&self.node(input)?.value, mode, window)?;
        Ok(self.push(
            out,
            Op::Pool {
                input,
                mode,
                window,
                trace,
            },
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::spatial_softmax(&self.node(input)?.value);
        Ok(self.push(out, Op::Softmax { input }))
    }

    /// Produces an `H x K` matrix node.
    pub fn aggregate(&mut self, attention: Var, grid: Var) -> Result<Var> {
        let v = ops::attend_aggregate(&self.node(attention)?.value, &self.node(grid)?.value)?;
        let out = Tensor3::from_vec(v.rows, v.cols, 1, v.values)?;
        Ok(self.push(out, Op::Aggregate { attention, grid }))
    }

    pub fn activation(&mut self, input: Var, kind: ActivationKind) -> Result<Var> {
        let out = self
            .node(input)?
            .value
            .map(|x| ops::activate(x, kind));
        Ok(self.push(out, Op::Activation { input, kind }))
    }

    /// Flattens and joins the inputs in order.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::config("concat needs at least one input"));
        }
        let mut values = Vec::new();
        for &v in inputs {
            values.extend_from_slice(self.node(v)?.value.values());
        }
        Ok(self.push(
            vector(values),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// `weights` holds a row-major `C x D` matrix where `C` is the bias length.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::linear_head(
            self.node(input)?.value.values(),
            self.node(weights)?.value.values(),
            self.node(bias)?.value.values(),
        )?;
        Ok(self.push(
            vector(out),
            Op::Linear {
                input,
                weights,
                bias,
            },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = ops::cross_entropy_value(self.node(logits)?.value.values(), label)?;
        Ok(self.push(scalar(loss), Op::CrossEntropy { logits, label }))
    }

    pub fn mse(&mut self, score: Var, target: f64) -> Result<Var> {
        let s = self.node(score)?.value.values();
        if s.len() != 1 {
            return Err(Error::dims(format!("mse expects one score, got {}", s.len())));
        }
        let d = s[0] - target;
        Ok(self.push(scalar(d * d), Op::Mse { score, target }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.node(input)?.value.values().iter().sum();
        Ok(self.push(scalar(s), Op::Sum { input }))
    }

    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let vals = self.node(input)?.value.values();
        let v = *vals.get(index).ok_or_else(|| {
            Error::dims(format!("index {index} outside a {}-element node", vals.len()))
        })?;
        Ok(self.push(scalar(v), Op::Select { input, index }))
    }

    /// Inner product with a constant weight vector.
    pub fn dot(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let vals = self.node(input)?.value.values();
        if vals.len() != weights.len() {
            return Err(Error::dims("dot weights differ in length from the input"));
        }
        let v = ops::dot(vals, &weights);
        Ok(self.push(scalar(v), Op::Dot { input, weights }))
    }

    /// Back-propagates from a scalar node to every node recorded before it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(Error::State(
                "backward called before any forward operation was recorded".into(),
            ));
        }
        let out = self.node(output)?;
        if out.value.values().len() != 1 {
            return Err(Error::dims(format!(
                "backward needs a scalar output, got {} values",
                out.value.values().len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let value = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    kernels,
                    bias,
                    n,
                } => {
                    let gout = Tensor3::from_vec(value.rows(), value.cols(), value.depth(), g.clone())?;
                    let cg = ops::conv_backward(
                        &self.nodes[input.0].value,
                        self.nodes[kernels.0].value.values(),
                        *n,
                        &gout,
                    )?;
                    accumulate(&mut grads, *input, cg.input.values());
                    accumulate(&mut grads, *kernels, &cg.kernels);
                    accumulate(&mut grads, *bias, &cg.bias);
                }
                Op::Pool {
                    input,
                    mode,
                    window,
                    trace,
                } => {
                    let gout = Tensor3::from_vec(value.rows(), value.cols(), value.depth(), g.clone())?;
                    let gi = ops::pool_backward(
                        &self.nodes[input.0].value,
                        *mode,
                        *window,
                        trace,
                        &gout,
                    );
                    accumulate(&mut grads, *input, gi.values());
                }
                Op::Softmax { input } => {
                    let gout = Tensor3::from_vec(value.rows(), value.cols(), value.depth(), g.clone())?;
                    let gi = ops::softmax_backward(value, &gout);
                    accumulate(&mut grads, *input, gi.values());
                }
                Op::Aggregate { attention, grid } => {
                    let gv = Matrix::from_vec(value.rows(), value.cols(), g.clone())?;
                    let (ga, gg) = ops::aggregate_backward(
                        &self.nodes[attention.0].value,
                        &self.nodes[grid.0].value,
                        &gv,
                    )?;
                    accumulate(&mut grads, *attention, ga.values());
                    accumulate(&mut grads, *grid, gg.values());
                }
                Op::Activation { input, kind } => {
                    let gi = ops::activation_backward(
                        self.nodes[input.0].value.values(),
                        value.values(),
                        &g,
                        *kind,
                    );
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.nodes[v.0].value.values().len();
                        accumulate(&mut grads, v, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Linear {
                    input,
                    weights,
                    bias,
                } => {
                    let lg = ops::linear_backward(
                        self.nodes[input.0].value.values(),
                        self.nodes[weights.0].value.values(),
                        &g,
                    )?;
                    accumulate(&mut grads, *input, &lg.features);
                    accumulate(&mut grads, *weights, &lg.weights);
                    accumulate(&mut grads, *bias, &lg.bias);
                }
                Op::CrossEntropy { logits, label } => {
                    let mut gl =
                        ops::cross_entropy_backward(self.nodes[logits.0].value.values(), *label)?;
                    gl.iter_mut().for_each(|x| *x *= g[0]);
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::Mse { score, target } => {
                    let s = self.nodes[score.0].value.values()[0];
                    accumulate(&mut grads, *score, &[2.0 * (s - target) * g[0]]);
                }
                Op::Sum { input } => {
                    let len = self.nodes[input.0].value.values().len();
                    accumulate(&mut grads, *input, &vec![g[0]; len]);
                }
                Op::Select { input, index } => {
                    let mut gi = vec![0.0; self.nodes[input.0].value.values().len()];
                    gi[*index] = g[0];
                    accumulate(&mut grads, *input, &gi);
                }
                Op::Dot { input, weights } => {
                    let gi: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    accumulate(&mut grads, *input, &gi);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients of one scalar with respect to every node on a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Flat gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but materializes zeros for unreachable nodes.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).values().len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_before_forward_is_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0]);
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn sum_of_identity_linear_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![0.3, -1.0, 2.0]);
        let w = tape.leaf_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = tape.leaf_vec(vec![0.0; 3]);
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor3::from_fn(3, 2, 2, |i, j, k| (i * 7 + j * 3 + k) as f64 * 0.37));
        let y = tape.softmax(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![1.0, 2.0]);
        let y = tape.concat(&[x, x]).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf_vec(vec![2.0]);
        let c = tape.concat(&[x, x]).unwrap();
        let s = tape.dot(c, vec![3.0, 4.0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }
}
