//! Next-scale prediction: a decoder-only transformer that predicts every
//! token of scale `k` at once from the start token and the coarser scales.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::layers::{self, BlockDims};
use crate::numerics::{cosine_lr, ops, AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{bilinear_resize, Codebook, FeatureMap, ResidualStack, ScaleSchedule, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NspConfig {
    pub depth: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub schedule: ScaleSchedule,
    pub vocab: usize,
    /// Width of the code vectors fed back as inputs.
    pub code_dim: usize,
    /// Width of the condition embedding.
    pub embed_dim: usize,
    pub cond_drop_rate: f64,
    pub cfg_ratio: f64,
    pub top_k: usize,
    pub norm_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl NspConfig {
    pub fn reference() -> Self {
        NspConfig {
            depth: 16,
            hidden: 1024,
            mlp: 4096,
            heads: 16,
            schedule: ScaleSchedule::reference(),
            vocab: 4096,
            code_dim: 32,
            embed_dim: 200,
            cond_drop_rate: 0.1,
            cfg_ratio: 4.0,
            top_k: 900,
            norm_eps: 1e-6,
            epochs: 30,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 2e-5,
                min_lr: 2e-6,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.05,
                warmup_epochs: 0,
            },
        }
    }

    pub fn desk(schedule: ScaleSchedule, vocab: usize, code_dim: usize, embed_dim: usize) -> Self {
        NspConfig {
            depth: 2,
            hidden: 64,
            mlp: 256,
            heads: 4,
            schedule,
            vocab,
            code_dim,
            embed_dim,
            top_k: vocab.min(900),
            epochs: 200,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-3,
                min_lr: 1e-4,
                weight_decay: 0.0,
                ..Self::reference().optimizer
            },
            ..Self::reference()
        }
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden,
            mlp: self.mlp,
            heads: self.heads,
            eps: self.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if !(0.0..1.0).contains(&self.cond_drop_rate) {
            return Err(Error::Config(format!("condition drop rate {} outside [0, 1)", self.cond_drop_rate)));
        }
        if self.vocab == 0 || self.code_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("vocabulary, code and embedding widths must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.vocab {
            return Err(Error::Config(format!("top-k {} outside 1..={}", self.top_k, self.vocab)));
        }
        Ok(())
    }
}

/// Boolean attention mask with its block layout.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub block_sizes: Vec<usize>,
    /// `len × len`, row-major; `true` where attention is allowed.
    pub allowed: Vec<bool>,
}

impl BlockMask {
    pub fn len(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len() + col]
    }

    /// Leading `n`×`n` corner.
    pub fn prefix(&self, n: usize) -> Vec<bool> {
        let l = self.len();
        (0..n).flat_map(|r| self.allowed[r * l..r * l + n].iter().copied()).collect()
    }
}

/// Every position sees its own block and all earlier blocks. With
/// `include_start` a one-position start block precedes one block per scale;
/// without it the first scale's block stands in for the start token.
pub fn build_block_causal_mask(schedule: &ScaleSchedule, include_start: bool) -> BlockMask {
    let mut block_sizes: Vec<usize> = Vec::with_capacity(schedule.len() + 1);
    if include_start {
        block_sizes.push(1);
    }
    block_sizes.extend((0..schedule.len()).map(|k| schedule.tokens_at(k)));
    let l: usize = block_sizes.iter().sum();
    let mut block_of = Vec::with_capacity(l);
    for (b, &n) in block_sizes.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, n));
    }
    let mut allowed = vec![false; l * l];
    for r in 0..l {
        for c in 0..l {
            allowed[r * l + c] = block_of[c] <= block_of[r];
        }
    }
    BlockMask { block_sizes, allowed }
}

/// `F̃_{k−1} = resize(F_{k−1}, (h_k, w_k))` for `k = 2..K`.
pub fn next_scale_inputs(stack: &ResidualStack, schedule: &ScaleSchedule) -> Result<Vec<FeatureMap>> {
    if stack.schedule != *schedule || stack.residuals.len() != schedule.len() {
        return Err(Error::Config("token stack was encoded with a different scale schedule".into()));
    }
    let fin = schedule.final_size();
    let d = stack.residuals.first().map_or(0, FeatureMap::dim);
    let mut acc = FeatureMap::zeros(fin.0, fin.1, d);
    let mut out = Vec::with_capacity(schedule.len().saturating_sub(1));
    for k in 0..schedule.len() - 1 {
        acc = acc.add(&bilinear_resize(&stack.residuals[k], fin))?;
        out.push(bilinear_resize(&acc, schedule.sizes()[k + 1]));
    }
    Ok(out)
}

pub fn init_nsp_params(cfg: &NspConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let std = 0.02;
    layers::init_linear(&mut p, "nsp.cond", cfg.embed_dim, cfg.hidden, (1.0 / cfg.embed_dim as f64).sqrt(), &mut rng);
    p.insert("nsp.null", Tensor::randn(&[1, cfg.hidden], 1.0, &mut rng));
    layers::init_linear(&mut p, "nsp.word", cfg.code_dim, cfg.hidden, (1.0 / cfg.code_dim as f64).sqrt(), &mut rng);
    p.insert("nsp.level", Tensor::randn(&[cfg.schedule.len(), cfg.hidden], std, &mut rng));
    p.insert("nsp.pos", Tensor::randn(&[cfg.schedule.total_tokens(), cfg.hidden], std, &mut rng));
    for l in 0..cfg.depth {
        layers::init_block(&mut p, &format!("nsp.blocks.{l}"), cfg.block_dims(), std, &mut rng);
    }
    if cfg.depth > 0 {
        layers::init_layer_norm(&mut p, "nsp.ln_f", cfg.hidden);
    }
    layers::init_linear(&mut p, "nsp.head", cfg.hidden, cfg.vocab, std, &mut rng);
    Ok(p)
}

/// `[s] = e·W + b`.
pub fn make_start_token(e: &[f64], params: &ParamStore) -> Result<Vec<f64>> {
    let w = params.get("nsp.cond.w")?;
    let b = params.get("nsp.cond.b")?;
    if e.len() != w.rows() {
        return Err(Error::shape("make_start_token", &[e.len()], w.shape()));
    }
    let x = Tensor::new(vec![1, e.len()], e.to_vec())?;
    Ok(ops::linear_map(&x, w, b)?.into_data())
}

/// One sequence to score: a condition (or the null condition) and the
/// coarse-scale inputs available so far.
pub struct SequenceInput<'a> {
    pub cond: Option<&'a [f64]>,
    /// `F̃_1 … F̃_{n−1}` for an `n`-block prefix.
    pub inputs: &'a [FeatureMap],
}

/// Logits for an `n_blocks` prefix of each sequence, `batch·L × V` with
/// `L = Σ_{k<n_blocks} h_k·w_k`. Rows of block `b` predict scale `b + 1`.
pub fn forward_logits(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &NspConfig,
    batch: &[SequenceInput<'_>],
    n_blocks: usize,
) -> Result<Var> {
    let sched = &cfg.schedule;
    if n_blocks == 0 || n_blocks > sched.len() {
        return Err(Error::Index {
            what: "scale block",
            index: n_blocks,
            len: sched.len(),
        });
    }
    let offsets = sched.offsets();
    let n1 = sched.tokens_at(0);
    let l = offsets[n_blocks];
    let b = batch.len();

    let mut conds = Vec::new();
    let mut words = Vec::with_capacity(b * (l - n1) * cfg.code_dim);
    for (i, s) in batch.iter().enumerate() {
        if s.inputs.len() < n_blocks - 1 {
            return Err(Error::Config(format!(
                "sequence {i} has {} coarse inputs, {} needed",
                s.inputs.len(),
                n_blocks - 1
            )));
        }
        if let Some(e) = s.cond {
            if e.len() != cfg.embed_dim {
                return Err(Error::shape("condition", &[cfg.embed_dim], &[e.len()]));
            }
            conds.extend_from_slice(e);
        }
        for (k, f) in s.inputs[..n_blocks - 1].iter().enumerate() {
            if (f.h, f.w) != sched.sizes()[k + 1] || f.dim() != cfg.code_dim {
                return Err(Error::shape("scale input", &[sched.sizes()[k + 1].0, sched.sizes()[k + 1].1, cfg.code_dim], f.values.shape()));
            }
            words.extend_from_slice(f.values.data());
        }
    }
    let n_cond = conds.len() / cfg.embed_dim;

    // Start rows: projected conditions followed by the null token.
    let null = tape.param(store, "nsp.null")?;
    let start_table = if n_cond > 0 {
        let e = tape.constant(Tensor::new(vec![n_cond, cfg.embed_dim], conds)?);
        let s = layers::linear(tape, store, "nsp.cond", e)?;
        tape.concat_rows(&[s, null])?
    } else {
        null
    };
    let mut pool = vec![start_table];
    let word_base = n_cond + 1;
    if l > n1 {
        let x = tape.constant(Tensor::new(vec![b * (l - n1), cfg.code_dim], words)?);
        pool.push(layers::linear(tape, store, "nsp.word", x)?);
    }
    let pool = if pool.len() == 1 { pool[0] } else { tape.concat_rows(&pool)? };

    let mut idx = Vec::with_capacity(b * l);
    let mut level_idx = Vec::with_capacity(b * l);
    let mut cond_row = 0;
    for (i, s) in batch.iter().enumerate() {
        let start = if s.cond.is_some() {
            cond_row += 1;
            cond_row - 1
        } else {
            n_cond
        };
        idx.extend(std::iter::repeat_n(start, n1));
        idx.extend((0..l - n1).map(|j| word_base + i * (l - n1) + j));
        for k in 0..n_blocks {
            level_idx.extend(std::iter::repeat_n(k, sched.tokens_at(k)));
        }
    }
    let x = tape.gather_rows(pool, &idx)?;
    let level = tape.param(store, "nsp.level")?;
    let level = tape.gather_rows(level, &level_idx)?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = tape.param(store, "nsp.pos")?;
    let pos = tape.gather_rows(pos, &pos_idx)?;
    let mut x = tape.add(x, level)?;
    x = tape.add(x, pos)?;

    let mask = Arc::new(build_block_causal_mask(sched, false).prefix(l));
    for layer in 0..cfg.depth {
        let out = layers::block_forward(
            tape,
            store,
            &format!("nsp.blocks.{layer}"),
            x,
            cfg.block_dims(),
            l,
            Some(mask.clone()),
            None,
        )?;
        x = out.out;
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite { stage: "nsp", layer });
        }
    }
    if cfg.depth > 0 {
        x = layers::layer_norm(tape, store, "nsp.ln_f", x, cfg.norm_eps)?;
    }
    let logits = layers::linear(tape, store, "nsp.head", x)?;
    if !tape.value(logits).is_finite() {
        return Err(Error::NonFinite {
            stage: "nsp",
            layer: cfg.depth,
        });
    }
    Ok(logits)
}

/// A training pair: condition embedding and the target token stack.
#[derive(Clone, Debug)]
pub struct NspSample {
    pub cond: Vec<f64>,
    pub stack: ResidualStack,
    pub inputs: Vec<FeatureMap>,
}

impl NspSample {
    pub fn new(cond: Vec<f64>, stack: ResidualStack) -> Result<Self> {
        let inputs = next_scale_inputs(&stack, &stack.schedule)?;
        Ok(NspSample { cond, stack, inputs })
    }
}

/// Mean cross-entropy over every target token; `dropped[i]` swaps sample
/// `i`'s condition for the null token.
pub fn loss_graph(tape: &mut Tape, store: &ParamStore, cfg: &NspConfig, batch: &[&NspSample], dropped: &[bool]) -> Result<(Var, Var)> {
    if dropped.len() != batch.len() {
        return Err(Error::shape("condition drop flags", &[batch.len()], &[dropped.len()]));
    }
    let mut targets = Vec::with_capacity(batch.len() * cfg.schedule.total_tokens());
    let mut seqs = Vec::with_capacity(batch.len());
    for (s, &drop) in batch.iter().zip(dropped) {
        if s.stack.schedule != cfg.schedule {
            return Err(Error::Config("token stack schedule differs from the model schedule".into()));
        }
        targets.extend(s.stack.flat_tokens());
        seqs.push(SequenceInput {
            cond: (!drop).then_some(s.cond.as_slice()),
            inputs: &s.inputs,
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Index {
            what: "token",
            index: t,
            len: cfg.vocab,
        });
    }
    let logits = forward_logits(tape, store, cfg, &seqs, cfg.schedule.len())?;
    Ok((tape.softmax_xent_rows(logits, &targets)?, logits))
}

/// `uncond + g·(cond − uncond)`, returning an input unchanged at `g ∈ {0, 1}`.
pub fn cfg_mix(cond: &[f64], uncond: &[f64], g: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::shape("cfg_mix", &[cond.len()], &[uncond.len()]));
    }
    Ok(if g == 1.0 {
        cond.to_vec()
    } else if g == 0.0 {
        uncond.to_vec()
    } else {
        cond.iter().zip(uncond).map(|(c, u)| u + g * (c - u)).collect()
    })
}

/// Samples from the softmax over the `k` largest logits; equal logits keep
/// the lower index. `k = 1` is argmax and draws nothing from `rng`.
pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> Result<usize> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top-k {k} outside 1..={}", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if k == 1 {
        return Ok(order[0]);
    }
    let kept: Vec<f64> = order[..k].iter().map(|&i| logits[i]).collect();
    let p = ops::softmax(&kept);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, pj) in p.iter().enumerate() {
        acc += pj;
        if u < acc {
            return Ok(order[j]);
        }
    }
    Ok(order[k - 1])
}

/// Independent stream per `(seed, scale, position)`.
pub fn token_rng(seed: u64, scale: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scale as u64) << 40) | position as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub guidance: f64,
    pub top_k: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub stack: ResidualStack,
    /// Decoded image of the full cumulative feature.
    pub image: Image,
    /// Decoded `F_k` for `k = 1..K`.
    pub intermediates: Vec<Image>,
    pub steps: usize,
}

/// Token stack for one condition, scale by scale.
pub fn generate_tokens(e: &[f64], cfg: &NspConfig, params: &ParamStore, codebook: &Codebook, opts: &GenerateOptions) -> Result<(ResidualStack, usize)> {
    let sched = &cfg.schedule;
    if codebook.len() != cfg.vocab || codebook.dim() != cfg.code_dim {
        return Err(Error::Config(format!(
            "codebook is {}×{}, model expects {}×{}",
            codebook.len(),
            codebook.dim(),
            cfg.vocab,
            cfg.code_dim
        )));
    }
    let fin = sched.final_size();
    let offsets = sched.offsets();
    let mut acc = FeatureMap::zeros(fin.0, fin.1, cfg.code_dim);
    let mut inputs: Vec<FeatureMap> = Vec::with_capacity(sched.len());
    let mut tokens: Vec<Vec<u32>> = Vec::with_capacity(sched.len());
    let mut steps = 0;
    for k in 0..sched.len() {
        let mut tape = Tape::new();
        let mut seqs = vec![SequenceInput {
            cond: Some(e),
            inputs: &inputs,
        }];
        let guided = opts.guidance != 1.0;
        if guided {
            seqs.push(SequenceInput { cond: None, inputs: &inputs });
        }
        let logits = forward_logits(&mut tape, params, cfg, &seqs, k + 1)?;
        let lv = tape.value(logits);
        let l = offsets[k + 1];
        let (h, w) = sched.sizes()[k];
        let mut scale_tokens = Vec::with_capacity(h * w);
        for pos in 0..h * w {
            let row = offsets[k] + pos;
            let cond = lv.row(row);
            let mixed = if guided {
                cfg_mix(cond, lv.row(l + row), opts.guidance)?
            } else {
                cond.to_vec()
            };
            let t = sample_top_k(&mixed, opts.top_k, &mut token_rng(opts.seed, k, pos))?;
            scale_tokens.push(t as u32);
        }
        steps += 1;
        let r = codebook.lookup(&scale_tokens, h, w)?;
        acc = acc.add(&bilinear_resize(&r, fin))?;
        if k + 1 < sched.len() {
            inputs.push(bilinear_resize(&acc, sched.sizes()[k + 1]));
        }
        tokens.push(scale_tokens);
    }
    Ok((ResidualStack::from_tokens(tokens, sched, codebook)?, steps))
}

/// Full generation with the coarse-to-fine decoded sequence.
pub fn generate(e: &[f64], cfg: &NspConfig, params: &ParamStore, tokenizer: &Tokenizer, opts: &GenerateOptions) -> Result<Generation> {
    let (stack, steps) = generate_tokens(e, cfg, params, &tokenizer.codebook(), opts)?;
    let mut intermediates = Vec::with_capacity(stack.residuals.len());
    for k in 1..=stack.residuals.len() {
        let f = crate::tokenizer::cumulative_feature(&stack, k)?;
        intermediates.push(tokenizer.decode_feature(&f)?);
    }
    let image = intermediates.last().cloned().expect("at least one scale");
    Ok(Generation {
        stack,
        image,
        intermediates,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NspEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub token_accuracy: f64,
}

pub struct NspOutcome {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub curve: Vec<NspEpoch>,
    pub step_losses: Vec<f64>,
}

fn argmax_hits(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count()
}

/// Teacher-forced training with condition dropout.
pub fn train_nsp(samples: &[NspSample], cfg: &NspConfig, mut params: ParamStore, seed: u64) -> Result<NspOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("next-scale training set is empty".into()));
    }
    let mut optimizer = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut last_good = params.clone();
    let per_sample = cfg.schedule.total_tokens();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut hits = 0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let refs: Vec<&NspSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let dropped: Vec<bool> = chunk.iter().map(|_| rng.random::<f64>() < cfg.cond_drop_rate).collect();
            let mut tape = Tape::new();
            let (loss, logits) = loss_graph(&mut tape, &params, cfg, &refs, &dropped)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "nsp",
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            let targets: Vec<usize> = refs.iter().flat_map(|s| s.stack.flat_tokens()).collect();
            hits += argmax_hits(tape.value(logits), &targets);
            step_losses.push(value);
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let grads = tape.param_grads(&grads);
            let o = &cfg.optimizer;
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lr = cosine_lr(progress, cfg.epochs as f64, o.warmup_epochs as f64, o.lr, o.min_lr);
            optimizer.update(&mut params, &grads, lr, |_| 1.0);
        }
        let row = NspEpoch {
            epoch,
            loss: total / samples.len() as f64,
            token_accuracy: hits as f64 / (samples.len() * per_sample) as f64,
        };
        log::info!("nsp epoch {epoch}: loss {:.4} token acc {:.4}", row.loss, row.token_accuracy);
        curve.push(row);
        last_good = params.clone();
    }
    Ok(NspOutcome {
        params,
        optimizer,
        curve,
        step_losses,
    })
}

/// Parameter count of a configuration, from the shapes it would allocate.
pub fn parameter_count(cfg: &NspConfig) -> Result<usize> {
    Ok(init_nsp_params(cfg, 0)?.numel())
}
