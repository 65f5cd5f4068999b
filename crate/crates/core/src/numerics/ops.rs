//! Forward and backward kernels over flat row-major buffers.
//!
//! The tape wraps these; they are also usable directly on [`Tensor`]s for
//! inference paths that do not need gradients.

use crate::error::{Error, Result};

use super::Tensor;

/// `y = x·W + bias` for `x: n×a`, `W: a×b`, `bias: b`.
pub fn linear_map(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape("linear_map", x.shape(), w.shape()));
    }
    if bias.len() != w.shape()[1] {
        return Err(Error::shape("linear_map bias", w.shape(), bias.shape()));
    }
    let (n, a, b) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = matmul(x.data(), w.data(), n, a, b);
    add_row_inplace(&mut out, bias.data());
    Tensor::new(vec![n, b], out)
}

/// `a: n×k` times `b: k×m`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a: n×k` times `bᵀ` where `b: m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ` times `b` where `a: n×k`, `b: n×m`; result `k×m`.
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_row_inplace(out: &mut [f64], row: &[f64]) {
    for chunk in out.chunks_mut(row.len()) {
        for (o, &r) in chunk.iter_mut().zip(row) {
            *o += r;
        }
    }
}

/// Column sums of an `n×m` buffer.
pub fn col_sums(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for chunk in x.chunks(m) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `ln Σ exp(l)` with max subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[target]`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "softmax_xent target",
            index: target,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Per-(sample, group) statistics saved by [`group_norm_forward`].
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalization over `x: n×c×l` with per-channel affine.
pub fn group_norm_forward(
    x: &[f64],
    dims: (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, NormStats)> {
    let (n, c, l) = dims;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible into {groups} groups"
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("group_norm: eps must be >= 0, got {eps}")));
    }
    let cg = c / groups;
    let span = cg * l;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n * groups),
        rstd: Vec::with_capacity(n * groups),
    };
    for s in 0..n {
        for g in 0..groups {
            let base = s * c * l + g * span;
            let seg = &x[base..base + span];
            let mean = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for t in 0..l {
                    let idx = base + ci * l + t;
                    out[idx] = (x[idx] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((out, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    x: &[f64],
    dy: &[f64],
    dims: (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    stats: &NormStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, l) = dims;
    let cg = c / groups;
    let span = cg * l;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for g in 0..groups {
            let base = s * c * l + g * span;
            let mean = stats.mean[s * groups + g];
            let rstd = stats.rstd[s * groups + g];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = g * cg + ci;
                for t in 0..l {
                    let idx = base + ci * l + t;
                    let xhat = (x[idx] - mean) * rstd;
                    let dxhat = dy[idx] * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ch] += dy[idx] * xhat;
                    dbeta[ch] += dy[idx];
                }
            }
            let inv = 1.0 / span as f64;
            for ci in 0..cg {
                let ch = g * cg + ci;
                for t in 0..l {
                    let idx = base + ci * l + t;
                    let xhat = (x[idx] - mean) * rstd;
                    let dxhat = dy[idx] * gamma[ch];
                    dx[idx] = rstd * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Group normalization of a single `c×t` map.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape("group_norm", x.shape(), &[0, 0]));
    }
    let (c, t) = (x.shape()[0], x.shape()[1]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("group_norm affine", x.shape(), gamma.shape()));
    }
    let (out, _) = group_norm_forward(x.data(), (1, c, t), groups, gamma.data(), beta.data(), eps)?;
    Tensor::new(vec![c, t], out)
}

/// Row-wise layer normalization of `x: n×m`.
pub fn layer_norm_forward(x: &[f64], m: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, NormStats) {
    let n = x.len() / m;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n),
        rstd: Vec::with_capacity(n),
    };
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..m {
            out[i * m + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

pub fn layer_norm_backward(
    x: &[f64],
    dy: &[f64],
    m: usize,
    gamma: &[f64],
    stats: &NormStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / m;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; m];
    let mut dbeta = vec![0.0; m];
    let inv = 1.0 / m as f64;
    for i in 0..n {
        let (mean, rstd) = (stats.mean[i], stats.rstd[i]);
        let row = &x[i * m..(i + 1) * m];
        let drow = &dy[i * m..(i + 1) * m];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..m {
            let xhat = (row[j] - mean) * rstd;
            let dxhat = drow[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
        }
        for j in 0..m {
            let xhat = (row[j] - mean) * rstd;
            let dxhat = drow[j] * gamma[j];
            dx[i * m + j] = rstd * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    /// `⌊(len + 2·padding − kernel)/stride⌋ + 1`, or `None` when non-positive.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

pub fn conv1d_forward(x: &[f64], n: usize, len: usize, w: &[f64], b: &[f64], spec: Conv1dSpec) -> Vec<f64> {
    let lo = spec.out_len(len).expect("validated by caller");
    let (ci_n, co_n, k) = (spec.in_ch, spec.out_ch, spec.kernel);
    let mut out = vec![0.0; n * co_n * lo];
    for s in 0..n {
        for co in 0..co_n {
            for t in 0..lo {
                let mut acc = b[co];
                let start = (t * spec.stride) as isize - spec.padding as isize;
                for ci in 0..ci_n {
                    let xrow = &x[(s * ci_n + ci) * len..(s * ci_n + ci + 1) * len];
                    let wrow = &w[(co * ci_n + ci) * k..(co * ci_n + ci + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let pos = start + kk as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += wv * xrow[pos as usize];
                        }
                    }
                }
                out[(s * co_n + co) * lo + t] = acc;
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is empty unless `need_dx`.
pub fn conv1d_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    len: usize,
    w: &[f64],
    spec: Conv1dSpec,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let lo = spec.out_len(len).expect("validated by caller");
    let (ci_n, co_n, k) = (spec.in_ch, spec.out_ch, spec.kernel);
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co_n];
    for s in 0..n {
        for co in 0..co_n {
            for t in 0..lo {
                let g = dy[(s * co_n + co) * lo + t];
                db[co] += g;
                let start = (t * spec.stride) as isize - spec.padding as isize;
                for ci in 0..ci_n {
                    let xbase = (s * ci_n + ci) * len;
                    let wbase = (co * ci_n + ci) * k;
                    for kk in 0..k {
                        let pos = start + kk as isize;
                        if pos >= 0 && (pos as usize) < len {
                            let p = pos as usize;
                            dw[wbase + kk] += g * x[xbase + p];
                            if need_dx {
                                dx[xbase + p] += g * w[wbase + kk];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_len(&self, len: usize) -> Option<usize> {
        Conv1dSpec {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
        .out_len(len)
    }
}

pub fn conv2d_forward(x: &[f64], n: usize, h: usize, w_: usize, w: &[f64], b: &[f64], spec: Conv2dSpec) -> Vec<f64> {
    let ho = spec.out_len(h).expect("validated by caller");
    let wo = spec.out_len(w_).expect("validated by caller");
    let (ci_n, co_n, k) = (spec.in_ch, spec.out_ch, spec.kernel);
    let mut out = vec![0.0; n * co_n * ho * wo];
    for s in 0..n {
        for co in 0..co_n {
            let obase = (s * co_n + co) * ho * wo;
            out[obase..obase + ho * wo].iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..ci_n {
                let xbase = (s * ci_n + ci) * h * w_;
                let wbase = (co * ci_n + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w_;
                            let orow = obase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix >= 0 && (ix as usize) < w_ {
                                    out[orow + ox] += wv * x[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    h: usize,
    w_: usize,
    w: &[f64],
    spec: Conv2dSpec,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ho = spec.out_len(h).expect("validated by caller");
    let wo = spec.out_len(w_).expect("validated by caller");
    let (ci_n, co_n, k) = (spec.in_ch, spec.out_ch, spec.kernel);
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co_n];
    for s in 0..n {
        for co in 0..co_n {
            let obase = (s * co_n + co) * ho * wo;
            db[co] += dy[obase..obase + ho * wo].iter().sum::<f64>();
            for ci in 0..ci_n {
                let xbase = (s * ci_n + ci) * h * w_;
                let wbase = (co * ci_n + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + ky * k + kx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w_;
                            let orow = obase + oy * wo;
                            for ox in 0..wo {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if ix >= 0 && (ix as usize) < w_ {
                                    let g = dy[orow + ox];
                                    acc += g * x[xrow + ix as usize];
                                    if need_dx {
                                        dx[xrow + ix as usize] += g * wv;
                                    }
                                }
                            }
                        }
                        dw[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Shape of a batched multi-head attention call: `segments` independent
/// sequences of `seq_len` rows each, `hidden` columns split into `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub segments: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Scaled dot-product attention. `mask[i·L + j]` true means row `i` may
/// attend to column `j`; masked pairs are never evaluated. Returns the output
/// and the probability tensor `segments × heads × L × L`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        segments,
        seq_len: l,
        hidden,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; segments * l * hidden];
    let mut probs = vec![0.0; segments * heads * l * l];
    let mut scores = vec![0.0; l];
    for s in 0..segments {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &q[(s * l + i) * hidden + off..(s * l + i) * hidden + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..l {
                    if mask.is_some_and(|m| !m[i * l + j]) {
                        continue;
                    }
                    let kj = &k[(s * l + j) * hidden + off..(s * l + j) * hidden + off + dh];
                    let sc = dot(qi, kj) * scale;
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let prow = &mut probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                let mut sum = 0.0;
                for j in 0..l {
                    if mask.is_some_and(|m| !m[i * l + j]) {
                        continue;
                    }
                    let e = (scores[j] - max).exp();
                    prow[j] = e;
                    sum += e;
                }
                let orow = &mut out[(s * l + i) * hidden + off..(s * l + i) * hidden + off + dh];
                for j in 0..l {
                    if mask.is_some_and(|m| !m[i * l + j]) {
                        continue;
                    }
                    prow[j] /= sum;
                    let vj = &v[(s * l + j) * hidden + off..(s * l + j) * hidden + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += prow[j] * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        segments,
        seq_len: l,
        hidden,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; l];
    for s in 0..segments {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let ri = (s * l + i) * hidden + off;
                let prow = &probs[((s * heads + h) * l + i) * l..((s * heads + h) * l + i + 1) * l];
                let dout_i = &dout[ri..ri + dh];
                let mut weighted = 0.0;
                for j in 0..l {
                    if mask.is_some_and(|m| !m[i * l + j]) {
                        continue;
                    }
                    let rj = (s * l + j) * hidden + off;
                    dp[j] = dot(dout_i, &v[rj..rj + dh]);
                    weighted += prow[j] * dp[j];
                    for (d, &g) in dv[rj..rj + dh].iter_mut().zip(dout_i) {
                        *d += prow[j] * g;
                    }
                }
                for j in 0..l {
                    if mask.is_some_and(|m| !m[i * l + j]) {
                        continue;
                    }
                    let rj = (s * l + j) * hidden + off;
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    for d in 0..dh {
                        dq[ri + d] += ds * k[rj + d];
                        dk[rj + d] += ds * q[ri + d];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_map_cases() {
        let y = linear_map(&t(&[&[1.0, 2.0]]), &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let x = t(&[&[0.3, -7.0], &[5.0, 1.5], &[0.0, 2.0]]);
        let y = linear_map(&x, &Tensor::zeros(&[2, 2]), &Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[3.0, 4.0]);
        }

        let y = linear_map(
            &t(&[&[1.0, 2.0]]),
            &t(&[&[1.0, 0.0], &[1.0, 1.0]]),
            &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_map_shape_error_names_both_shapes() {
        let err = linear_map(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(100.0) - 100.0).abs() < 1e-12);
        // 0.5·(1 + erf(1/√2)) = Φ(1), evaluated with a high-precision series.
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn group_norm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let x = Tensor::full(&[4, 5], 2.5);
        let y = group_norm(&x, 2, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let shifted = x.map(|v| v + 3.25);
        let a = group_norm(&x, 2, &ones, &zeros, 1e-5).unwrap();
        let b = group_norm(&shifted, 2, &ones, &zeros, 1e-5).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let y = group_norm(
            &t(&[&[1.0, 3.0]]),
            1,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let x = Tensor::zeros(&[3, 2]);
        let err = group_norm(&x, 2, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn softmax_xent_cases() {
        assert!((softmax_xent(&[0.5; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(softmax_xent(&[0.0, 1e6, 0.0], 1).unwrap().abs() < 1e-12);
        assert!((softmax_xent(&[1.0, 2.0], 0).unwrap() - 1.313_261_687_518_222_8).abs() < 1e-12);
        assert!(matches!(softmax_xent(&[1.0, 2.0], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn softmax_normalized_and_shift_invariant() {
        let l = [0.3, -2.0, 5.5, 1.0, 0.0];
        let p = softmax(&l);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = l.iter().map(|v| v + 123.0).collect();
        let q = softmax(&shifted);
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_out_len_table_default() {
        let spec = Conv1dSpec {
            in_ch: 1,
            out_ch: 8,
            kernel: 15,
            stride: 8,
            padding: 7,
        };
        assert_eq!(spec.out_len(16), Some(2));
        assert_eq!(spec.out_len(200), Some(25));
        let tiny = Conv1dSpec { kernel: 5, padding: 0, stride: 1, in_ch: 1, out_ch: 1 };
        assert_eq!(tiny.out_len(4), None);
    }

    #[test]
    fn masked_attention_rows_sum_to_one() {
        let dims = AttnDims {
            segments: 1,
            seq_len: 3,
            hidden: 4,
            heads: 2,
        };
        let q: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let k: Vec<f64> = (0..12).map(|i| (i as f64 * 0.3).sin()).collect();
        let mask = [true, false, false, true, true, false, true, true, true];
        let (_, probs) = attention_forward(&q, &k, &q, dims, Some(&mask));
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(probs[1], 0.0);
    }
}
