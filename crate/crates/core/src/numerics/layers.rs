//! Parameterized building blocks shared by the signal encoder and the
//! next-scale transformer. Parameters live in a [`ParamStore`] under
//! dotted names; these helpers only know the naming scheme.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

use super::{ParamStore, Tape, Tensor, Var};

pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) {
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

pub fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, eps: f64) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.gamma"))?;
    let b = tape.param(store, &format!("{name}.beta"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Width settings of a pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub eps: f64,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

pub fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: BlockDims, std: f64, rng: &mut R) {
    let h = dims.hidden;
    init_layer_norm(store, &format!("{prefix}.ln1"), h);
    for part in ["q", "k", "v", "proj"] {
        init_linear(store, &format!("{prefix}.attn.{part}"), h, h, std, rng);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), h);
    init_linear(store, &format!("{prefix}.mlp.fc1"), h, dims.mlp, std, rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), dims.mlp, h, std, rng);
}

/// Output of one block plus the attention node (its aux holds the
/// probabilities).
pub struct BlockOut {
    pub out: Var,
    pub attention: Var,
}

/// Pre-norm block over `segments × seq_len` rows. `residual_scale`, when
/// given, multiplies each residual branch row-wise (stochastic depth).
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    dims: BlockDims,
    seq_len: usize,
    mask: Option<Arc<Vec<bool>>>,
    residual_scale: Option<(&[f64], &[f64])>,
) -> Result<BlockOut> {
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x, dims.eps)?;
    let q = linear(tape, store, &format!("{prefix}.attn.q"), h)?;
    let k = linear(tape, store, &format!("{prefix}.attn.k"), h)?;
    let v = linear(tape, store, &format!("{prefix}.attn.v"), h)?;
    let attention = tape.attention(q, k, v, dims.heads, seq_len, mask)?;
    let mut a = linear(tape, store, &format!("{prefix}.attn.proj"), attention)?;
    if let Some((s, _)) = residual_scale {
        a = tape.scale_rows(a, s)?;
    }
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln2"), x, dims.eps)?;
    let m = linear(tape, store, &format!("{prefix}.mlp.fc1"), h)?;
    let m = tape.gelu(m);
    let mut m = linear(tape, store, &format!("{prefix}.mlp.fc2"), m)?;
    if let Some((_, s)) = residual_scale {
        m = tape.scale_rows(m, s)?;
    }
    let out = tape.add(x, m)?;
    Ok(BlockOut { out, attention })
}
