//! Reverse-mode differentiation over a linear record of op applications.
//!
//! Every op appends a node holding its value and a closure mapping the
//! upstream gradient to per-input gradients. Nodes that do not depend on a
//! parameter carry no closure, so constants cost nothing at backward time.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{self, AttnDims, Conv1dSpec, Conv2dSpec};
use super::resample::Resampler;
use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

pub(crate) struct BackCtx<'a> {
    grad: &'a [f64],
    out: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    needs: Vec<bool>,
}

type Backward = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
    aux: Option<Tensor>,
}

/// Gradient buffers indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The gradient tape for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
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

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
            aux: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf that participates in differentiation without being a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Op-specific saved tensor (attention probabilities).
    pub fn aux(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].aux.as_ref()
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: Backward) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", self.nodes[loss.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            for (&i, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Gradients of every named parameter touched by this tape; untouched
    /// parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let value = self.value(v);
                let g = grads
                    .get(v)
                    .map(|g| Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape"))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, &[a, b], Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|g| -g).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|c| {
                let (x, y) = (c.inputs[0].data(), c.inputs[1].data());
                vec![
                    c.needs[0].then(|| c.grad.iter().zip(y).map(|(g, v)| g * v).collect()),
                    c.needs[1].then(|| c.grad.iter().zip(x).map(|(g, v)| g * v).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push(out, &[a], Box::new(move |c| vec![Some(c.grad.iter().map(|g| g * k).collect())]))
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if factors.len() != n {
            return Err(Error::shape("scale_rows", self.shape(a), &[factors.len()]));
        }
        let mut out = self.value(a).clone();
        for (row, &f) in out.data_mut().chunks_mut(m).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let factors = factors.to_vec();
        Ok(self.push(
            out,
            &[a],
            Box::new(move |c| {
                let mut g = c.grad.to_vec();
                for (row, &f) in g.chunks_mut(m).zip(&factors) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.iter().zip(c.out.data()).map(|(g, y)| g * y).collect())]),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(
            out,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad.iter().zip(c.inputs[0].data()).map(|(g, &x)| g * ops::gelu_grad(x)).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::sigmoid);
        self.push(
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.iter().zip(c.out.data()).map(|(g, y)| g * y * (1.0 - y)).collect())]),
        )
    }

    /// Stops gradient flow: the value of `a` as a constant.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], Box::new(|c| vec![Some(c.grad.to_vec())])))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let n = self.value(a).len();
        self.push(Tensor::scalar(s), &[a], Box::new(move |c| vec![Some(vec![c.grad[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same var");
        self.mean(sq)
    }

    /// Mean over consecutive groups of `seg` rows: `n·seg × m` to `n × m`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (rows, m) = self.matrix("segment_mean", a)?;
        if seg == 0 || rows % seg != 0 {
            return Err(Error::shape("segment_mean", self.shape(a), &[seg]));
        }
        let n = rows / seg;
        let mut out = vec![0.0; n * m];
        for (r, row) in self.value(a).data().chunks(m).enumerate() {
            for (o, &v) in out[(r / seg) * m..(r / seg + 1) * m].iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / seg as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            &[a],
            Box::new(move |c| {
                let mut g = vec![0.0; rows * m];
                for r in 0..rows {
                    for j in 0..m {
                        g[r * m + j] = c.grad[(r / seg) * m + j] * inv;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = ops::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            &[a, b],
            Box::new(move |c| {
                vec![
                    c.needs[0].then(|| ops::matmul_nt(c.grad, c.inputs[1].data(), n, m, k)),
                    c.needs[1].then(|| ops::matmul_tn(c.inputs[0].data(), c.grad, n, k, m)),
                ]
            }),
        ))
    }

    /// `a·bᵀ` for `a: n×k`, `b: m×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul_nt", a)?;
        let (m, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = ops::matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            &[a, b],
            Box::new(move |c| {
                vec![
                    c.needs[0].then(|| ops::matmul(c.grad, c.inputs[1].data(), n, m, k)),
                    c.needs[1].then(|| ops::matmul_tn(c.grad, c.inputs[0].data(), n, m, k)),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = x[i * m + j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            &[a],
            Box::new(move |c| {
                let mut g = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        g[i * m + j] = c.grad[j * n + i];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Adds a length-`m` row vector to every row of `a: n×m`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, m) = self.matrix("add_row", a)?;
        if self.value(row).len() != m {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        ops::add_row_inplace(out.data_mut(), self.value(row).data());
        Ok(self.push(
            out,
            &[a, row],
            Box::new(move |c| vec![Some(c.grad.to_vec()), c.needs[1].then(|| ops::col_sums(c.grad, m))]),
        ))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Multiplies every entry of `a` by the single-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let k = self.scalar(s);
        let out = self.value(a).map(|v| v * k);
        Ok(self.push(
            out,
            &[a, s],
            Box::new(|c| {
                let k = c.inputs[1].data()[0];
                vec![
                    c.needs[0].then(|| c.grad.iter().map(|g| g * k).collect()),
                    c.needs[1].then(|| vec![ops::dot(c.grad, c.inputs[0].data())]),
                ]
            }),
        ))
    }

    /// Row-wise L2 normalization. Fails on a zero-norm row.
    pub fn l2_normalize_rows(&mut self, a: Var, which: &'static str) -> Result<Var> {
        let (n, m) = self.matrix("l2_normalize_rows", a)?;
        let x = self.value(a);
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let norm = ops::dot(x.row(i), x.row(i)).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { which, row: i });
            }
            for j in 0..m {
                out[i * m + j] = x.row(i)[j] / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            &[a],
            Box::new(move |c| {
                let y = c.out.data();
                let mut g = vec![0.0; n * m];
                for i in 0..n {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &c.grad[i * m..(i + 1) * m];
                    let proj = ops::dot(yr, gr);
                    for j in 0..m {
                        g[i * m + j] = (gr[j] - yr[j] * proj) / norms[i];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    // ---- normalization and convolution ----------------------------------

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, m) = self.matrix("layer_norm", x)?;
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, stats) =
            ops::layer_norm_forward(self.value(x).data(), m, self.value(gamma).data(), self.value(beta).data(), eps);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (dx, dg, db) =
                    ops::layer_norm_backward(c.inputs[0].data(), c.grad, m, c.inputs[1].data(), &stats);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// Group normalization over `x: n×c×l`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(Error::shape("group_norm", &s, self.shape(gamma)));
        }
        let dims = (s[0], s[1], s[2]);
        let (out, stats) = ops::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(
            Tensor::new(s, out)?,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (dx, dg, db) =
                    ops::group_norm_backward(c.inputs[0].data(), c.grad, dims, groups, c.inputs[1].data(), &stats);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// 1-D convolution of `x: n×c_in×l` with `w: c_out×c_in×k`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || self.value(b).len() != ws[0] {
            return Err(Error::shape("conv1d", &xs, &ws));
        }
        let spec = Conv1dSpec {
            in_ch: ws[1],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let (n, len) = (xs[0], xs[2]);
        let lo = spec
            .out_len(len)
            .ok_or_else(|| Error::Config(format!("conv1d output length is not positive for input length {len}")))?;
        let out = ops::conv1d_forward(self.value(x).data(), n, len, self.value(w).data(), self.value(b).data(), spec);
        Ok(self.push(
            Tensor::new(vec![n, spec.out_ch, lo], out)?,
            &[x, w, b],
            Box::new(move |c| {
                let (dx, dw, db) =
                    ops::conv1d_backward(c.inputs[0].data(), c.grad, n, len, c.inputs[1].data(), spec, c.needs[0]);
                vec![c.needs[0].then_some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// 2-D convolution of `x: n×c_in×h×w` with square `w: c_out×c_in×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || self.value(b).len() != ws[0] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let spec = Conv2dSpec {
            in_ch: ws[1],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let (n, h, wd) = (xs[0], xs[2], xs[3]);
        let (ho, wo) = match (spec.out_len(h), spec.out_len(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("conv2d output is empty for {h}x{wd} input"))),
        };
        let out = ops::conv2d_forward(self.value(x).data(), n, h, wd, self.value(w).data(), self.value(b).data(), spec);
        Ok(self.push(
            Tensor::new(vec![n, spec.out_ch, ho, wo], out)?,
            &[x, w, b],
            Box::new(move |c| {
                let (dx, dw, db) =
                    ops::conv2d_backward(c.inputs[0].data(), c.grad, n, h, wd, c.inputs[1].data(), spec, c.needs[0]);
                vec![c.needs[0].then_some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// `n×c×h×w` to `(n·h·w)×c`, one row per spatial cell.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("nchw_to_rows", &s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let out = permute_nchw_rows(self.value(x).data(), n, c, hw, false);
        Ok(self.push(
            Tensor::new(vec![n * hw, c], out)?,
            &[x],
            Box::new(move |ctx| vec![Some(permute_nchw_rows(ctx.grad, n, c, hw, true))]),
        ))
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.matrix("rows_to_nchw", x)?;
        if rows != n * h * w {
            return Err(Error::shape("rows_to_nchw", self.shape(x), &[n, h, w]));
        }
        let hw = h * w;
        let out = permute_nchw_rows(self.value(x).data(), n, c, hw, true);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            &[x],
            Box::new(move |ctx| vec![Some(permute_nchw_rows(ctx.grad, n, c, hw, false))]),
        ))
    }

    /// Bilinear resampling of `n` stacked grids in row layout
    /// (`n·a·b × c` to `n·p·q × c`).
    pub fn resample_rows(&mut self, x: Var, n: usize, resampler: Arc<Resampler>) -> Result<Var> {
        let (rows, c) = self.matrix("resample_rows", x)?;
        let src = resampler.src.0 * resampler.src.1;
        let dst = resampler.dst.0 * resampler.dst.1;
        if rows != n * src {
            return Err(Error::shape("resample_rows", self.shape(x), &[n * src, c]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * dst * c);
        for s in 0..n {
            out.extend(resampler.apply(&xv[s * src * c..(s + 1) * src * c], c));
        }
        Ok(self.push(
            Tensor::new(vec![n * dst, c], out)?,
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(n * src * c);
                for s in 0..n {
                    g.extend(resampler.apply_transpose(&ctx.grad[s * dst * c..(s + 1) * dst * c], c));
                }
                vec![Some(g)]
            }),
        ))
    }

    // ---- indexing -------------------------------------------------------

    /// Rows of `table` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, m) = self.matrix("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: v,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let idx = idx.to_vec();
        Ok(self.push(
            Tensor::new(vec![idx.len(), m], out)?,
            &[table],
            Box::new(move |c| {
                let mut g = vec![0.0; v * m];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..m {
                        g[i * m + j] += c.grad[r * m + j];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.matrix("concat_rows", parts[0])?.1;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != m {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows.push(r);
            data.extend_from_slice(self.value(p).data());
        }
        let total = rows.iter().sum();
        Ok(self.push(
            Tensor::new(vec![total, m], data)?,
            parts,
            Box::new(move |c| {
                let mut off = 0;
                rows.iter()
                    .map(|&r| {
                        let g = c.grad[off * m..(off + r) * m].to_vec();
                        off += r;
                        Some(g)
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.matrix("slice_rows", a)?;
        if start + len > n || len == 0 {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len,
                len: n,
            });
        }
        let data = self.value(a).data()[start * m..(start + len) * m].to_vec();
        Ok(self.push(
            Tensor::new(vec![len, m], data)?,
            &[a],
            Box::new(move |c| {
                let mut g = vec![0.0; n * m];
                g[start * m..(start + len) * m].copy_from_slice(c.grad);
                vec![Some(g)]
            }),
        ))
    }

    // ---- attention and losses -------------------------------------------

    /// Multi-head scaled dot-product attention over `segments` independent
    /// sequences of `seq_len` rows; `mask` is `seq_len×seq_len`, shared.
    /// The probability tensor is kept as the node's aux value.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (rows, hidden) = self.matrix("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("attention", self.shape(q), &[seq_len]));
        }
        if mask.as_ref().is_some_and(|m| m.len() != seq_len * seq_len) {
            return Err(Error::shape("attention mask", &[seq_len, seq_len], &[mask.unwrap().len()]));
        }
        let dims = AttnDims {
            segments: rows / seq_len,
            seq_len,
            hidden,
            heads,
        };
        let (out, probs) = ops::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            mask.as_deref().map(Vec::as_slice),
        );
        let probs = Tensor::new(vec![dims.segments, heads, seq_len, seq_len], probs)?;
        let saved = probs.clone();
        let var = self.push(
            Tensor::new(vec![rows, hidden], out)?,
            &[q, k, v],
            Box::new(move |c| {
                let (dq, dk, dv) = ops::attention_backward(
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.inputs[2].data(),
                    saved.data(),
                    c.grad,
                    dims,
                    mask.as_deref().map(Vec::as_slice),
                );
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        );
        self.nodes[var.0].aux = Some(probs);
        Ok(var)
    }

    /// Mean over rows of `−log softmax(logits_i)[target_i]`.
    pub fn softmax_xent_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.matrix("softmax_xent_rows", logits)?;
        if targets.len() != n {
            return Err(Error::shape("softmax_xent_rows", self.shape(logits), &[targets.len()]));
        }
        let l = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += ops::softmax_xent(l.row(i), t)?;
        }
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            &[logits],
            Box::new(move |c| {
                let scale = c.grad[0] / n as f64;
                let mut g = Vec::with_capacity(n * v);
                for (i, &t) in targets.iter().enumerate() {
                    let mut p = ops::softmax(c.inputs[0].row(i));
                    p[t] -= 1.0;
                    g.extend(p.into_iter().map(|x| x * scale));
                }
                vec![Some(g)]
            }),
        ))
    }
}

fn permute_nchw_rows(x: &[f64], n: usize, c: usize, hw: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                let nchw = (s * c + ch) * hw + p;
                let rows = (s * hw + p) * c + ch;
                if inverse {
                    out[nchw] = x[rows];
                } else {
                    out[rows] = x[nchw];
                }
            }
        }
    }
    out
}
