//! Multi-scale residual vector quantization of image feature maps.
//!
//! An image is encoded by a small convolutional stack into a feature map
//! `F: h×w×d`. The map is quantized coarse to fine: at scale `k` the current
//! residual is resampled to `h_k×w_k`, snapped to the nearest codes, and the
//! upsampled quantized map is subtracted. Summing the upsampled code maps of
//! the first `k` scales gives the cumulative feature `F_k`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::optim::AdamWConfig;
use crate::numerics::{AdamW, ParamStore, Resampler, Tape, Tensor, Var};

/// Ordered token-grid resolutions, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(sizes: Vec<(usize, usize)>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("scale schedule is empty".into()));
        }
        if sizes[0].0 == 0 || sizes[0].1 == 0 {
            return Err(Error::Config("scale extents must be at least 1".into()));
        }
        for pair in sizes.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h1 < h0 || w1 < w0 || h1 * w1 <= h0 * w0 {
                return Err(Error::Config(format!(
                    "scale schedule must be strictly finer at each step: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(ScaleSchedule { sizes })
    }

    /// Square scales `s×s`.
    pub fn squares(sides: &[usize]) -> Result<Self> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    /// The ten-scale ladder ending at 16×16.
    pub fn reference() -> Self {
        Self::squares(&[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]).expect("valid")
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn final_size(&self) -> (usize, usize) {
        *self.sizes.last().expect("non-empty")
    }

    pub fn tokens_at(&self, k: usize) -> usize {
        self.sizes[k].0 * self.sizes[k].1
    }

    pub fn total_tokens(&self) -> usize {
        (0..self.len()).map(|k| self.tokens_at(k)).sum()
    }

    /// First token offset of each scale, plus the total at the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for k in 0..self.len() {
            off.push(off[k] + self.tokens_at(k));
        }
        off
    }
}

/// `h×w` grid of `d`-dimensional vectors, one row per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != h * w {
            return Err(Error::shape("feature map", &[h * w], values.shape()));
        }
        Ok(FeatureMap { h, w, values })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        FeatureMap {
            h,
            w,
            values: Tensor::zeros(&[h * w, d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    fn combine(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<FeatureMap> {
        if (self.h, self.w) != (other.h, other.w) || self.dim() != other.dim() {
            return Err(Error::shape("feature map", self.values.shape(), other.values.shape()));
        }
        let data = self.values.data().iter().zip(other.values.data()).map(|(&a, &b)| f(a, b)).collect();
        FeatureMap::new(self.h, self.w, Tensor::new(self.values.shape().to_vec(), data)?)
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.combine(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.combine(other, |a, b| a - b)
    }
}

/// Separable half-pixel bilinear resize; identity when the size is unchanged.
pub fn bilinear_resize(map: &FeatureMap, target: (usize, usize)) -> FeatureMap {
    if (map.h, map.w) == target {
        return map.clone();
    }
    let r = Resampler::new((map.h, map.w), target);
    let data = r.apply(map.values.data(), map.dim());
    FeatureMap {
        h: target.0,
        w: target.1,
        values: Tensor::new(vec![target.0 * target.1, map.dim()], data).expect("resampled shape"),
    }
}

/// `V` code vectors of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codes: Tensor,
}

impl Codebook {
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.shape().len() != 2 {
            return Err(Error::shape("codebook", codes.shape(), &[0, 0]));
        }
        Ok(Codebook { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        self.codes.row(i)
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    /// Nearest code under Euclidean distance; ties go to the lowest index.
    pub fn quantize_vector(&self, v: &[f64]) -> (usize, &[f64]) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.len() {
            let d: f64 = self.code(i).iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        (best, self.code(best))
    }

    /// Code rows for a token grid.
    pub fn lookup(&self, tokens: &[u32], h: usize, w: usize) -> Result<FeatureMap> {
        let mut data = Vec::with_capacity(tokens.len() * self.dim());
        for &t in tokens {
            if t as usize >= self.len() {
                return Err(Error::Index {
                    what: "codebook",
                    index: t as usize,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.code(t as usize));
        }
        FeatureMap::new(h, w, Tensor::new(vec![h * w, self.dim()], data)?)
    }
}

/// Per-scale token grids and the code maps they select.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    pub schedule: ScaleSchedule,
    pub tokens: Vec<Vec<u32>>,
    pub residuals: Vec<FeatureMap>,
}

impl ResidualStack {
    pub fn from_tokens(tokens: Vec<Vec<u32>>, schedule: &ScaleSchedule, codebook: &Codebook) -> Result<Self> {
        if tokens.len() != schedule.len() {
            return Err(Error::Config(format!(
                "{} token grids for a {}-scale schedule",
                tokens.len(),
                schedule.len()
            )));
        }
        let mut residuals = Vec::with_capacity(tokens.len());
        for (k, grid) in tokens.iter().enumerate() {
            let (h, w) = schedule.sizes()[k];
            if grid.len() != h * w {
                return Err(Error::shape("token grid", &[h, w], &[grid.len()]));
            }
            residuals.push(codebook.lookup(grid, h, w)?);
        }
        Ok(ResidualStack {
            schedule: schedule.clone(),
            tokens,
            residuals,
        })
    }

    pub fn flat_tokens(&self) -> Vec<usize> {
        self.tokens.iter().flatten().map(|&t| t as usize).collect()
    }

    /// Per scale: `h_k`, `w_k` as u32 then `h_k·w_k` u32 indices, all
    /// little-endian, row-major.
    pub fn write_tokens(&self, out: &mut Vec<u8>) {
        for (k, grid) in self.tokens.iter().enumerate() {
            let (h, w) = self.schedule.sizes()[k];
            out.extend_from_slice(&(h as u32).to_le_bytes());
            out.extend_from_slice(&(w as u32).to_le_bytes());
            for &t in grid {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }

    /// Parses [`ResidualStack::write_tokens`] output for `scales` scales.
    pub fn read_tokens(bytes: &[u8], scales: usize) -> Result<(ScaleSchedule, Vec<Vec<u32>>)> {
        let mut pos = 0;
        let mut next = || -> Result<u32> {
            let b = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::format("token grid", "truncated"))?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let mut sizes = Vec::with_capacity(scales);
        let mut grids = Vec::with_capacity(scales);
        for _ in 0..scales {
            let (h, w) = (next()? as usize, next()? as usize);
            let grid = (0..h * w).map(|_| next()).collect::<Result<Vec<_>>>()?;
            sizes.push((h, w));
            grids.push(grid);
        }
        Ok((ScaleSchedule::new(sizes)?, grids))
    }
}

/// Result of the residual quantization loop.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stack: ResidualStack,
    /// What remains of `F` after subtracting every upsampled code map.
    pub remainder: FeatureMap,
}

pub fn encode_tokens(f: &FeatureMap, schedule: &ScaleSchedule, codebook: &Codebook) -> Result<Encoded> {
    if schedule.final_size() != (f.h, f.w) {
        return Err(Error::Config(format!(
            "schedule ends at {:?} but the feature map is {}x{}",
            schedule.final_size(),
            f.h,
            f.w
        )));
    }
    if codebook.is_empty() || codebook.dim() != f.dim() {
        return Err(Error::shape("encode_tokens", f.values.shape(), codebook.codes().shape()));
    }
    let mut r = f.clone();
    let mut tokens = Vec::with_capacity(schedule.len());
    let mut residuals = Vec::with_capacity(schedule.len());
    for &(hk, wk) in schedule.sizes() {
        let down = bilinear_resize(&r, (hk, wk));
        let grid: Vec<u32> = (0..hk * wk)
            .map(|i| codebook.quantize_vector(down.cell(i)).0 as u32)
            .collect();
        let rk = codebook.lookup(&grid, hk, wk)?;
        r = r.sub(&bilinear_resize(&rk, (f.h, f.w)))?;
        tokens.push(grid);
        residuals.push(rk);
    }
    Ok(Encoded {
        stack: ResidualStack {
            schedule: schedule.clone(),
            tokens,
            residuals,
        },
        remainder: r,
    })
}

/// `F_k = Σ_{i≤k} up(R_i, (h, w))` for 1-based `k`.
pub fn cumulative_feature(stack: &ResidualStack, k: usize) -> Result<FeatureMap> {
    if k == 0 || k > stack.residuals.len() {
        return Err(Error::Index {
            what: "cumulative scale",
            index: k,
            len: stack.residuals.len(),
        });
    }
    let target = stack.schedule.final_size();
    let mut acc = bilinear_resize(&stack.residuals[0], target);
    for rk in &stack.residuals[1..k] {
        acc = acc.add(&bilinear_resize(rk, target))?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Autoencoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub hidden: usize,
    pub code_dim: usize,
    pub vocab: usize,
    pub schedule: ScaleSchedule,
    pub commitment: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Re-seed unused codes from encoder outputs after each epoch. Unstable
    /// with many scales: full-size copies make the summed codes overshoot.
    pub restart_dead_codes: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 16,
            image_channels: 3,
            hidden: 16,
            code_dim: 8,
            vocab: 64,
            schedule: ScaleSchedule::squares(&[1, 2, 3, 4]).expect("valid"),
            commitment: 0.25,
            epochs: 60,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                min_lr: 3e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.0,
                warmup_epochs: 0,
            },
            restart_dead_codes: false,
        }
    }
}

impl TokenizerConfig {
    /// Number of stride-2 stages between image and feature grid.
    pub fn downsamplings(&self) -> Result<usize> {
        let (fh, fw) = self.schedule.final_size();
        if fh != fw {
            return Err(Error::Config("the tokenizer expects a square final scale".into()));
        }
        let mut size = fh;
        let mut n = 0;
        while size < self.image_size {
            size *= 2;
            n += 1;
        }
        if size != self.image_size {
            return Err(Error::Config(format!(
                "image size {} is not a power-of-two multiple of the final scale {fh}",
                self.image_size
            )));
        }
        Ok(n)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.schedule.final_size()
    }
}

pub const CODEBOOK: &str = "tok.codebook";

pub fn init_tokenizer_params(cfg: &TokenizerConfig, seed: u64) -> Result<ParamStore> {
    let n_down = cfg.downsamplings()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let mut conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64| {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        p.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, &mut rng));
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    };
    let (c, h, d) = (cfg.image_channels, cfg.hidden, cfg.code_dim);
    conv(&mut p, "tok.enc.in", c, h, 3, 1.0);
    for i in 0..n_down {
        conv(&mut p, &format!("tok.enc.down{i}"), h, h, 3, 1.0);
    }
    conv(&mut p, "tok.enc.out", h, d, 1, 0.5);
    conv(&mut p, "tok.dec.in", d, h, 1, 1.0);
    for i in 0..n_down {
        conv(&mut p, &format!("tok.dec.up{i}"), h, h, 3, 1.0);
    }
    conv(&mut p, "tok.dec.out", h, c, 3, 0.5);
    p.insert(CODEBOOK, Tensor::randn(&[cfg.vocab, d], 0.5, &mut rng));
    Ok(p)
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, b, stride, k / 2)
}

/// Images `n×c×s×s` to feature rows `(n·h·w)×d`.
pub fn encoder_forward(tape: &mut Tape, store: &ParamStore, cfg: &TokenizerConfig, x: Var) -> Result<Var> {
    let mut h = conv(tape, store, "tok.enc.in", x, 1)?;
    h = tape.gelu(h);
    for i in 0..cfg.downsamplings()? {
        h = conv(tape, store, &format!("tok.enc.down{i}"), h, 2)?;
        h = tape.gelu(h);
    }
    let f = conv(tape, store, "tok.enc.out", h, 1)?;
    tape.nchw_to_rows(f)
}

/// Feature rows `(n·h·w)×d` to images `n×c×s×s` in `[0, 1]`.
pub fn decoder_forward(tape: &mut Tape, store: &ParamStore, cfg: &TokenizerConfig, rows: Var, n: usize) -> Result<Var> {
    let (fh, fw) = cfg.feature_size();
    let x = tape.rows_to_nchw(rows, n, fh, fw)?;
    let mut h = conv(tape, store, "tok.dec.in", x, 1)?;
    h = tape.gelu(h);
    let (mut sh, mut sw) = (fh, fw);
    for i in 0..cfg.downsamplings()? {
        let up = Arc::new(Resampler::new((sh, sw), (sh * 2, sw * 2)));
        let r = tape.nchw_to_rows(h)?;
        let r = tape.resample_rows(r, n, up)?;
        sh *= 2;
        sw *= 2;
        h = tape.rows_to_nchw(r, n, sh, sw)?;
        h = conv(tape, store, &format!("tok.dec.up{i}"), h, 1)?;
        h = tape.gelu(h);
    }
    let out = conv(tape, store, "tok.dec.out", h, 1)?;
    let out = tape.sigmoid(out);
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite {
            stage: "decoder",
            layer: cfg.downsamplings()? + 1,
        });
    }
    Ok(out)
}

fn stack_images(images: &[&Image], cfg: &TokenizerConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    let mut data = Vec::with_capacity(images.len() * cfg.image_channels * s * s);
    for img in images {
        if (img.channels, img.height, img.width) != (cfg.image_channels, s, s) {
            return Err(Error::shape(
                "tokenizer image",
                &[cfg.image_channels, s, s],
                &[img.channels, img.height, img.width],
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), cfg.image_channels, s, s], data)
}

fn split_images(t: &Tensor, cfg: &TokenizerConfig) -> Vec<Image> {
    let per = cfg.image_channels * cfg.image_size * cfg.image_size;
    t.data()
        .chunks(per)
        .map(|c| Image::new(cfg.image_channels, cfg.image_size, cfg.image_size, c.to_vec()).expect("shape"))
        .collect()
}

/// Trained (or initialized) tokenizer: encoder, decoder and codebook.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub params: ParamStore,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, params: ParamStore) -> Result<Self> {
        cfg.downsamplings()?;
        let cb = params.get(CODEBOOK)?;
        if cb.shape() != [cfg.vocab, cfg.code_dim] {
            return Err(Error::shape("codebook", cb.shape(), &[cfg.vocab, cfg.code_dim]));
        }
        Ok(Tokenizer { cfg, params })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook::new(self.params.get(CODEBOOK).expect("validated").clone()).expect("matrix")
    }

    pub fn encode_feature(&self, img: &Image) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let x = tape.constant(stack_images(&[img], &self.cfg)?);
        let f = encoder_forward(&mut tape, &self.params, &self.cfg, x)?;
        let (h, w) = self.cfg.feature_size();
        FeatureMap::new(h, w, tape.value(f).clone())
    }

    pub fn encode_image(&self, img: &Image) -> Result<ResidualStack> {
        let f = self.encode_feature(img)?;
        Ok(encode_tokens(&f, &self.cfg.schedule, &self.codebook())?.stack)
    }

    pub fn decode_feature(&self, f: &FeatureMap) -> Result<Image> {
        if (f.h, f.w) != self.cfg.feature_size() || f.dim() != self.cfg.code_dim {
            return Err(Error::shape(
                "decode_feature",
                &[f.h, f.w, f.dim()],
                &[self.cfg.feature_size().0, self.cfg.feature_size().1, self.cfg.code_dim],
            ));
        }
        let mut tape = Tape::new();
        let rows = tape.constant(f.values.clone());
        let out = decoder_forward(&mut tape, &self.params, &self.cfg, rows, 1)?;
        Ok(split_images(tape.value(out), &self.cfg).remove(0))
    }

    /// Decode of the full cumulative feature of the image's own tokens.
    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        let stack = self.encode_image(img)?;
        self.decode_feature(&cumulative_feature(&stack, stack.schedule.len())?)
    }
}

/// Loss terms of one tokenizer batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VqLosses {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl VqLosses {
    pub fn total(&self, beta: f64) -> f64 {
        self.recon + self.codebook + beta * self.commitment
    }
}

/// Builds the straight-through loss graph for a batch. Returns the loss
/// node, the component values, the encoder-output node, the quantized
/// node, and the per-scale tokens of every image.
pub struct VqGraph {
    pub loss: Var,
    pub losses: VqLosses,
    pub features: Var,
    pub quantized: Var,
    pub tokens: Vec<Vec<Vec<u32>>>,
}

pub fn vq_loss_graph(tape: &mut Tape, store: &ParamStore, cfg: &TokenizerConfig, images: &[&Image]) -> Result<VqGraph> {
    let n = images.len();
    let x = tape.constant(stack_images(images, cfg)?);
    let f = encoder_forward(tape, store, cfg, x)?;
    let (h, w) = cfg.feature_size();
    let hw = h * w;
    let d = cfg.code_dim;
    let codebook = Codebook::new(store.get(CODEBOOK)?.clone())?;

    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let rows = Tensor::new(vec![hw, d], tape.value(f).data()[i * hw * d..(i + 1) * hw * d].to_vec())?;
        let enc = encode_tokens(&FeatureMap::new(h, w, rows)?, &cfg.schedule, &codebook)?;
        tokens.push(enc.stack.tokens);
    }

    let cb = tape.param(store, CODEBOOK)?;
    let mut quantized: Option<Var> = None;
    for (k, &(hk, wk)) in cfg.schedule.sizes().iter().enumerate() {
        let idx: Vec<usize> = tokens.iter().flat_map(|t| t[k].iter().map(|&v| v as usize)).collect();
        let codes = tape.gather_rows(cb, &idx)?;
        let up = tape.resample_rows(codes, n, Arc::new(Resampler::new((hk, wk), (h, w))))?;
        quantized = Some(match quantized {
            None => up,
            Some(acc) => tape.add(acc, up)?,
        });
    }
    let q = quantized.expect("non-empty schedule");

    // Straight-through: decoder sees q's value, gradients flow to f.
    let gap = {
        let qv = tape.value(q).data();
        let fv = tape.value(f).data();
        Tensor::new(tape.shape(f).to_vec(), qv.iter().zip(fv).map(|(a, b)| a - b).collect())?
    };
    let gap = tape.constant(gap);
    let st = tape.add(f, gap)?;
    let recon = decoder_forward(tape, store, cfg, st, n)?;
    let diff = tape.sub(recon, x)?;
    let recon_loss = tape.mean_square(diff);

    let f_sg = tape.detach(f);
    let q_sg = tape.detach(q);
    let cdiff = tape.sub(q, f_sg)?;
    let codebook_loss = tape.mean_square(cdiff);
    let mdiff = tape.sub(f, q_sg)?;
    let commit_loss = tape.mean_square(mdiff);
    let commit_scaled = tape.scale(commit_loss, cfg.commitment);
    let partial = tape.add(recon_loss, codebook_loss)?;
    let loss = tape.add(partial, commit_scaled)?;
    Ok(VqGraph {
        loss,
        losses: VqLosses {
            recon: tape.scalar(recon_loss),
            codebook: tape.scalar(codebook_loss),
            commitment: tape.scalar(commit_loss),
        },
        features: f,
        quantized: q,
        tokens,
    })
}

/// One row of the tokenizer training curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VqEpoch {
    pub epoch: usize,
    pub recon_mse: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub dead_codes: usize,
}

/// Trains the autoencoder and codebook on `images`.
pub fn train_vqvae(
    images: &[Image],
    cfg: &TokenizerConfig,
    mut params: ParamStore,
    seed: u64,
) -> Result<(ParamStore, Vec<VqEpoch>)> {
    if images.is_empty() {
        return Err(Error::Config("tokenizer training set is empty".into()));
    }
    let mut curve = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((params, curve));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15);
    seed_codebook(images, cfg, &mut params, &mut rng)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = images.len().div_ceil(batch);
    let mut last_good = params.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut usage = vec![0usize; cfg.vocab];
        let mut sums = VqLosses::default();
        let mut last_features: Option<Tensor> = None;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
            let mut tape = Tape::new();
            let graph = vq_loss_graph(&mut tape, &params, cfg, &refs)?;
            let total = tape.scalar(graph.loss);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    stage: "tokenizer",
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            for t in graph.tokens.iter().flatten().flatten() {
                usage[*t as usize] += 1;
            }
            let w = chunk.len() as f64;
            sums.recon += graph.losses.recon * w;
            sums.codebook += graph.losses.codebook * w;
            sums.commitment += graph.losses.commitment * w;
            let grads = tape.backward(graph.loss)?;
            let grads = tape.param_grads(&grads);
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let o = &cfg.optimizer;
            let lr = crate::numerics::cosine_lr(progress, cfg.epochs as f64, o.warmup_epochs as f64, o.lr, o.min_lr);
            opt.update(&mut params, &grads, lr, |_| 1.0);
            last_features = Some(tape.value(graph.features).clone());
        }
        let dead: Vec<usize> = (0..cfg.vocab).filter(|&i| usage[i] == 0).collect();
        if cfg.restart_dead_codes && !dead.is_empty() && epoch + 1 < cfg.epochs {
            if let Some(feats) = last_features {
                log::warn!("tokenizer epoch {epoch}: restarting {} unused codes", dead.len());
                restart_codes(&mut params, &mut opt, &dead, &feats, &mut rng);
            }
        }
        let n = images.len() as f64;
        curve.push(VqEpoch {
            epoch,
            recon_mse: sums.recon / n,
            codebook: sums.codebook / n,
            commitment: sums.commitment / n,
            dead_codes: dead.len(),
        });
        last_good = params.clone();
    }
    Ok((params, curve))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    order.shuffle(rng);
}

/// Initializes the codebook from encoder outputs of a random image subset,
/// with code magnitudes spread over the residual scales.
fn seed_codebook(images: &[Image], cfg: &TokenizerConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let take = images.len().min(cfg.batch_size.max(1));
    let picked = sample(rng, images.len(), take).into_vec();
    let refs: Vec<&Image> = picked.iter().map(|&i| &images[i]).collect();
    let mut tape = Tape::new();
    let x = tape.constant(stack_images(&refs, cfg)?);
    let f = encoder_forward(&mut tape, params, cfg, x)?;
    let feats = tape.value(f).clone();
    let all: Vec<usize> = (0..cfg.vocab).collect();
    let mut dummy = AdamW::new(cfg.optimizer.clone());
    restart_codes(params, &mut dummy, &all, &feats, rng);
    Ok(())
}

fn restart_codes(params: &mut ParamStore, opt: &mut AdamW, codes: &[usize], feats: &Tensor, rng: &mut ChaCha8Rng) {
    let d = feats.cols();
    let rows = feats.rows();
    let cb = params.get_mut(CODEBOOK).expect("codebook present");
    for (n, &c) in codes.iter().enumerate() {
        let r = rng.random_range(0..rows);
        // Later restarts get shrunk copies so fine-scale residuals have codes.
        let shrink = 0.5f64.powi((n % 4) as i32);
        for j in 0..d {
            cb.data_mut()[c * d + j] = feats.at2(r, j) * shrink + 1e-3 * (rng.random::<f64>() - 0.5);
        }
        if let Some(st) = opt.state.get_mut(CODEBOOK) {
            for j in 0..d {
                st.m[c * d + j] = 0.0;
                st.v[c * d + j] = 0.0;
            }
        }
    }
    params.bump_version();
}

/// Gradients of the batch loss for every tokenizer parameter.
pub fn vq_gradients(
    store: &ParamStore,
    cfg: &TokenizerConfig,
    images: &[&Image],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let g = vq_loss_graph(&mut tape, store, cfg, images)?;
    let grads = tape.backward(g.loss)?;
    Ok((tape.scalar(g.loss), tape.param_grads(&grads)))
}
