//! Signal epochs to embeddings: temporal patching, a convolutional patch
//! encoder, trainable temporal and spatial position tables, and a
//! transformer encoder with mean pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{self, BlockDims};
use crate::numerics::ops::Conv1dSpec;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Coarse scalp region of an electrode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Frontal,
    Temporal,
    Central,
    Parietal,
    Occipital,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Frontal,
        Region::Temporal,
        Region::Central,
        Region::Parietal,
        Region::Occipital,
    ];

    /// Maps a 10-20 style name by its letter prefix. Longest prefixes are
    /// tested first so `FC3` is central and `PO7` occipital.
    pub fn from_channel_name(name: &str) -> Option<Region> {
        let prefix: String = name
            .chars()
            .take_while(|c| c.is_ascii_alphabetic())
            .collect::<String>()
            .to_ascii_uppercase();
        let prefix = prefix.trim_end_matches('Z');
        match prefix {
            "FT" | "T" | "TP" => Some(Region::Temporal),
            "FC" | "C" | "CP" => Some(Region::Central),
            "PO" | "O" | "I" => Some(Region::Occipital),
            "P" => Some(Region::Parietal),
            "FP" | "AF" | "F" => Some(Region::Frontal),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Region> {
        Region::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Frontal => "frontal",
            Region::Temporal => "temporal",
            Region::Central => "central",
            Region::Parietal => "parietal",
            Region::Occipital => "occipital",
        }
    }
}

/// Multi-trial, multi-channel epochs sharing one time axis.
///
/// Values are in millivolts. Sample `i` sits at `start_ms + 1000·i/sample_rate`
/// relative to stimulus onset.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    pub subject_id: String,
    pub channels: Vec<String>,
    /// Explicit region labels; `None` falls back to the channel name.
    pub regions: Vec<Option<Region>>,
    pub sample_rate: f64,
    pub start_ms: f64,
    pub n_samples: usize,
    /// `trials × channels × samples`, row-major.
    pub data: Vec<f64>,
    pub stimulus_ids: Vec<u32>,
    pub repetition_index: Vec<u32>,
}

impl EpochSet {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_trials(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn epoch_len(&self) -> usize {
        self.n_channels() * self.n_samples
    }

    pub fn epoch(&self, trial: usize) -> &[f64] {
        let n = self.epoch_len();
        &self.data[trial * n..(trial + 1) * n]
    }

    pub fn region_of(&self, channel: usize) -> Option<Region> {
        self.regions
            .get(channel)
            .copied()
            .flatten()
            .or_else(|| Region::from_channel_name(&self.channels[channel]))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::Config(format!("sample rate must be positive, got {}", self.sample_rate)));
        }
        if self.channels.is_empty() || self.n_samples == 0 {
            return Err(Error::Config("epoch set has no channels or samples".into()));
        }
        if self.regions.len() != self.channels.len() {
            return Err(Error::shape("epoch regions", &[self.channels.len()], &[self.regions.len()]));
        }
        if self.repetition_index.len() != self.stimulus_ids.len() {
            return Err(Error::shape("epoch labels", &[self.stimulus_ids.len()], &[self.repetition_index.len()]));
        }
        if self.data.len() != self.n_trials() * self.epoch_len() {
            return Err(Error::shape(
                "epoch data",
                &[self.n_trials(), self.n_channels(), self.n_samples],
                &[self.data.len()],
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    /// Length of the pre-stimulus window whose mean is subtracted; 0 disables.
    pub baseline_ms: f64,
    /// Divisor applied after decimation, in the data's unit.
    pub scale_mv: f64,
    pub average_repetitions: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_rate: 200.0,
            baseline_ms: 200.0,
            scale_mv: 0.1,
            average_repetitions: false,
        }
    }
}

fn whole(x: f64) -> Option<usize> {
    let r = x.round();
    ((x - r).abs() < 1e-9 && r >= 0.0).then_some(r as usize)
}

/// Baseline correction, bin-average decimation, amplitude scaling and
/// optional averaging of repeated stimuli. Output starts at stimulus onset.
pub fn preprocess(raw: &EpochSet, cfg: &PreprocessConfig) -> Result<EpochSet> {
    raw.validate()?;
    let factor = whole(raw.sample_rate / cfg.target_rate).filter(|&f| f >= 1).ok_or_else(|| {
        Error::Config(format!(
            "sample rate {} is not an integer multiple of target rate {}",
            raw.sample_rate, cfg.target_rate
        ))
    })?;
    if !(cfg.scale_mv > 0.0) {
        return Err(Error::Config("amplitude scale must be positive".into()));
    }
    let per_ms = raw.sample_rate / 1000.0;
    let onset = whole(-raw.start_ms * per_ms)
        .ok_or_else(|| Error::Preprocess(format!("epoch start {} ms does not fall on a sample", raw.start_ms)))?;
    let n_base = whole(cfg.baseline_ms * per_ms)
        .ok_or_else(|| Error::Preprocess(format!("baseline {} ms is not a whole number of samples", cfg.baseline_ms)))?;
    if n_base > onset {
        return Err(Error::Preprocess(format!(
            "baseline needs {n_base} pre-stimulus samples but only {onset} are present"
        )));
    }
    if onset >= raw.n_samples {
        return Err(Error::Preprocess("no post-stimulus samples".into()));
    }
    let t_out = (raw.n_samples - onset) / factor;
    if t_out == 0 {
        return Err(Error::Preprocess("too few post-stimulus samples for one decimation bin".into()));
    }
    let c = raw.n_channels();
    let mut data = Vec::with_capacity(raw.n_trials() * c * t_out);
    for trial in 0..raw.n_trials() {
        let ep = raw.epoch(trial);
        for ch in 0..c {
            let row = &ep[ch * raw.n_samples..(ch + 1) * raw.n_samples];
            // Sums are taken relative to a reference sample so a flat signal
            // cancels exactly.
            let reference = row[onset - n_base];
            let base = if n_base > 0 {
                row[onset - n_base..onset].iter().map(|v| v - reference).sum::<f64>() / n_base as f64
            } else {
                -reference
            };
            for t in 0..t_out {
                let bin = &row[onset + t * factor..onset + (t + 1) * factor];
                let mean = bin.iter().map(|v| v - reference).sum::<f64>() / factor as f64;
                data.push((mean - base) / cfg.scale_mv);
            }
        }
    }
    let mut out = EpochSet {
        subject_id: raw.subject_id.clone(),
        channels: raw.channels.clone(),
        regions: raw.regions.clone(),
        sample_rate: cfg.target_rate,
        start_ms: 0.0,
        n_samples: t_out,
        data,
        stimulus_ids: raw.stimulus_ids.clone(),
        repetition_index: raw.repetition_index.clone(),
    };
    if cfg.average_repetitions {
        out = average_repetitions(&out);
    }
    Ok(out)
}

/// Averages trials sharing a stimulus id, in order of first appearance.
/// `repetition_index` of each output trial holds the number averaged.
pub fn average_repetitions(set: &EpochSet) -> EpochSet {
    let n = set.epoch_len();
    let mut ids: Vec<u32> = Vec::new();
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    for trial in 0..set.n_trials() {
        let id = set.stimulus_ids[trial];
        let slot = match ids.iter().position(|&x| x == id) {
            Some(s) => s,
            None => {
                ids.push(id);
                sums.push(vec![0.0; n]);
                counts.push(0);
                ids.len() - 1
            }
        };
        sums[slot].iter_mut().zip(set.epoch(trial)).for_each(|(s, &v)| *s += v);
        counts[slot] += 1;
    }
    let mut data = Vec::with_capacity(ids.len() * n);
    for (s, &k) in sums.iter().zip(&counts) {
        data.extend(s.iter().map(|v| v / k as f64));
    }
    EpochSet {
        data,
        stimulus_ids: ids,
        repetition_index: counts,
        ..set.clone()
    }
}

/// Non-overlapping windows of one epoch, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub window: usize,
    pub n_channels: usize,
    pub n_time: usize,
    /// `(n_channels·n_time) × window`.
    pub patches: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.n_channels * self.n_time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        &self.patches[p * self.window..(p + 1) * self.window]
    }

    pub fn channel_index(&self, p: usize) -> usize {
        p / self.n_time
    }

    pub fn time_index(&self, p: usize) -> usize {
        p % self.n_time
    }
}

/// Splits each channel of a `channels × samples` epoch into `⌊T/w⌋` windows;
/// trailing samples are dropped.
pub fn patchify(epoch: &[f64], channels: usize, samples: usize, window: usize) -> Result<PatchGrid> {
    if epoch.len() != channels * samples {
        return Err(Error::shape("patchify", &[channels, samples], &[epoch.len()]));
    }
    if window == 0 || window > samples {
        return Err(Error::Config(format!("patch window {window} must be in 1..={samples}")));
    }
    let n_time = samples / window;
    let mut patches = Vec::with_capacity(channels * n_time * window);
    for ch in 0..channels {
        let row = &epoch[ch * samples..(ch + 1) * samples];
        patches.extend_from_slice(&row[..n_time * window]);
    }
    Ok(PatchGrid {
        window,
        n_channels: channels,
        n_time,
        patches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub window: usize,
    pub conv_in: Vec<usize>,
    pub conv_out: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub norm_groups: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub mlp: usize,
    pub heads: usize,
    pub drop_path: f64,
    /// Per-layer learning-rate decay; 1.0 disables it.
    pub layer_decay: f64,
    pub group_norm_eps: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// The full-size layout: 63 channels at 200 samples, a three-block conv
    /// stack, twelve 200-wide layers with ten heads.
    pub fn reference() -> Self {
        EncoderConfig {
            n_channels: 63,
            n_samples: 200,
            window: 200,
            conv_in: vec![1, 8, 8],
            conv_out: vec![8, 8, 8],
            kernels: vec![15, 3, 3],
            strides: vec![8, 1, 1],
            paddings: vec![7, 1, 1],
            norm_groups: 4,
            hidden: 200,
            embed_dim: 200,
            layers: 12,
            mlp: 800,
            heads: 10,
            drop_path: 0.1,
            layer_decay: 0.8,
            group_norm_eps: 1e-5,
            layer_norm_eps: 1e-6,
        }
    }

    /// Small layout for the synthetic runs; stochastic depth and layer decay off.
    pub fn desk(n_channels: usize, n_samples: usize, embed_dim: usize) -> Self {
        EncoderConfig {
            n_channels,
            n_samples,
            window: 16,
            hidden: 32,
            embed_dim,
            layers: 2,
            mlp: 64,
            heads: 4,
            drop_path: 0.0,
            layer_decay: 1.0,
            ..Self::reference()
        }
    }

    pub fn n_time(&self) -> usize {
        self.n_samples / self.window
    }

    pub fn n_patches(&self) -> usize {
        self.n_channels * self.n_time()
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden,
            mlp: self.mlp,
            heads: self.heads,
            eps: self.layer_norm_eps,
        }
    }

    fn conv_specs(&self) -> Vec<Conv1dSpec> {
        (0..self.kernels.len())
            .map(|i| Conv1dSpec {
                in_ch: self.conv_in[i],
                out_ch: self.conv_out[i],
                kernel: self.kernels[i],
                stride: self.strides[i],
                padding: self.paddings[i],
            })
            .collect()
    }

    /// Length of the temporal-encoder output per conv channel.
    pub fn conv_output_len(&self) -> Result<usize> {
        let mut len = self.window;
        for (i, spec) in self.conv_specs().iter().enumerate() {
            len = spec.out_len(len).ok_or_else(|| {
                Error::Config(format!("temporal conv layer {i} has no output for input length {len}"))
            })?;
        }
        Ok(len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernels.len();
        if n == 0 || [self.conv_in.len(), self.conv_out.len(), self.strides.len(), self.paddings.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Config("temporal conv layer lists must have equal, non-zero length".into()));
        }
        if self.conv_in[0] != 1 || (1..n).any(|i| self.conv_in[i] != self.conv_out[i - 1]) {
            return Err(Error::Config("temporal conv channels do not chain from a single input".into()));
        }
        if self.conv_out.iter().any(|&c| c % self.norm_groups != 0) {
            return Err(Error::Config(format!(
                "conv channels {:?} not divisible into {} norm groups",
                self.conv_out, self.norm_groups
            )));
        }
        if self.embed_dim == 0 || self.window == 0 || self.window > self.n_samples {
            return Err(Error::Config("embedding dimension and window must be positive, window <= samples".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config("drop path rate must be in [0, 1)".into()));
        }
        self.block_dims().validate()?;
        self.conv_output_len()?;
        Ok(())
    }

    /// Learning-rate multiplier for a parameter under layer-wise decay.
    pub fn lr_scale(&self, name: &str) -> f64 {
        if self.layer_decay == 1.0 {
            return 1.0;
        }
        let depth = self.layers as i32;
        if let Some(rest) = name.strip_prefix("enc.blocks.") {
            let l: i32 = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            self.layer_decay.powi(depth - l)
        } else if name.starts_with("enc.ln_f") || name.starts_with("enc.head") {
            1.0
        } else {
            self.layer_decay.powi(depth + 1)
        }
    }
}

pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (i, spec) in cfg.conv_specs().iter().enumerate() {
        let std = (2.0 / (spec.in_ch * spec.kernel) as f64).sqrt();
        p.insert(format!("enc.conv{i}.w"), Tensor::randn(&[spec.out_ch, spec.in_ch, spec.kernel], std, &mut rng));
        p.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[spec.out_ch]));
        layers::init_layer_norm(&mut p, &format!("enc.gn{i}"), spec.out_ch);
    }
    let flat = cfg.conv_out.last().copied().unwrap_or(1) * cfg.conv_output_len()?;
    layers::init_linear(&mut p, "enc.patch_proj", flat, cfg.hidden, (1.0 / flat as f64).sqrt(), &mut rng);
    p.insert("enc.te", Tensor::randn(&[cfg.n_time(), cfg.hidden], 0.02, &mut rng));
    p.insert("enc.se", Tensor::randn(&[cfg.n_channels, cfg.hidden], 0.02, &mut rng));
    for l in 0..cfg.layers {
        layers::init_block(&mut p, &format!("enc.blocks.{l}"), cfg.block_dims(), 0.02 * 5.0, &mut rng);
    }
    if cfg.layers > 0 {
        layers::init_layer_norm(&mut p, "enc.ln_f", cfg.hidden);
    }
    layers::init_linear(&mut p, "enc.head", cfg.hidden, cfg.embed_dim, (1.0 / cfg.hidden as f64).sqrt(), &mut rng);
    Ok(p)
}

/// Per-patch conv → group norm → GELU blocks, then flatten and project.
/// `patches: n×1×w` to `n×hidden`.
pub fn temporal_encode(tape: &mut Tape, store: &ParamStore, cfg: &EncoderConfig, patches: Var) -> Result<Var> {
    let mut h = patches;
    for (i, spec) in cfg.conv_specs().iter().enumerate() {
        let w = tape.param(store, &format!("enc.conv{i}.w"))?;
        let b = tape.param(store, &format!("enc.conv{i}.b"))?;
        h = tape
            .conv1d(h, w, b, spec.stride, spec.padding)
            .map_err(|_| Error::Config(format!("temporal conv layer {i} has no output")))?;
        let g = tape.param(store, &format!("enc.gn{i}.gamma"))?;
        let bt = tape.param(store, &format!("enc.gn{i}.beta"))?;
        h = tape.group_norm(h, cfg.norm_groups, g, bt, cfg.group_norm_eps)?;
        h = tape.gelu(h);
    }
    let s = tape.shape(h).to_vec();
    let flat = tape.reshape(h, &[s[0], s[1] * s[2]])?;
    layers::linear(tape, store, "enc.patch_proj", flat)
}

/// `out[j,k] = e[j,k] + te_k + se_j` over a grid of patch embeddings laid
/// out channel-major (`n_channels·n_time × d`).
pub fn add_positional(embeds: &Tensor, te: &Tensor, se: &Tensor, n_channels: usize, n_time: usize) -> Result<Tensor> {
    if embeds.rows() != n_channels * n_time {
        return Err(Error::shape("add_positional", embeds.shape(), &[n_channels * n_time]));
    }
    if te.rows() < n_time || se.rows() < n_channels {
        return Err(Error::Index {
            what: "positional table",
            index: n_time.max(n_channels),
            len: te.rows().min(se.rows()),
        });
    }
    let d = embeds.cols();
    if te.cols() != d || se.cols() != d {
        return Err(Error::shape("add_positional", embeds.shape(), te.shape()));
    }
    let mut out = embeds.clone();
    for j in 0..n_channels {
        for k in 0..n_time {
            let r = j * n_time + k;
            for c in 0..d {
                out.data_mut()[r * d + c] += te.at2(k, c) + se.at2(j, c);
            }
        }
    }
    Ok(out)
}

/// Nodes of one batched encoder pass.
pub struct EncoderTrace {
    /// `batch × embed_dim`.
    pub embeddings: Var,
    /// Transformer outputs per patch, `batch·patches × hidden`.
    pub patch_states: Var,
    pub attention: Vec<Var>,
}

/// Options for a training-mode pass.
pub struct DropPath<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

/// Encodes a batch of preprocessed epochs (each `channels × samples`).
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    epochs: &[&[f64]],
    drop: Option<DropPath<'_>>,
) -> Result<EncoderTrace> {
    let p = cfg.n_patches();
    let mut patch_data = Vec::with_capacity(epochs.len() * p * cfg.window);
    for ep in epochs {
        let grid = patchify(ep, cfg.n_channels, cfg.n_samples, cfg.window)?;
        patch_data.extend_from_slice(&grid.patches);
    }
    let b = epochs.len();
    let patches = tape.constant(Tensor::new(vec![b * p, 1, cfg.window], patch_data)?);
    let e = temporal_encode(tape, store, cfg, patches)?;

    let nt = cfg.n_time();
    let time_idx: Vec<usize> = (0..b * p).map(|r| (r % p) % nt).collect();
    let chan_idx: Vec<usize> = (0..b * p).map(|r| (r % p) / nt).collect();
    let te = tape.param(store, "enc.te")?;
    let se = tape.param(store, "enc.se")?;
    let te_rows = tape.gather_rows(te, &time_idx)?;
    let se_rows = tape.gather_rows(se, &chan_idx)?;
    let mut x = tape.add(e, te_rows)?;
    x = tape.add(x, se_rows)?;

    let mut drop = drop.filter(|_| cfg.drop_path > 0.0);
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let scales = drop.as_mut().map(|d| {
            let keep = 1.0 - cfg.drop_path;
            let mut draw = || -> Vec<f64> {
                (0..b)
                    .flat_map(|_| {
                        let s = if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                        std::iter::repeat_n(s, p)
                    })
                    .collect()
            };
            (draw(), draw())
        });
        let out = layers::block_forward(
            tape,
            store,
            &format!("enc.blocks.{l}"),
            x,
            cfg.block_dims(),
            p,
            None,
            scales.as_ref().map(|(a, m)| (a.as_slice(), m.as_slice())),
        )?;
        if !tape.value(out.out).is_finite() {
            return Err(Error::NonFinite { stage: "encoder", layer: l });
        }
        attention.push(out.attention);
        x = out.out;
    }
    if cfg.layers > 0 {
        x = layers::layer_norm(tape, store, "enc.ln_f", x, cfg.layer_norm_eps)?;
    }
    let pooled = tape.segment_mean(x, p)?;
    let embeddings = layers::linear(tape, store, "enc.head", pooled)?;
    if !tape.value(embeddings).is_finite() {
        return Err(Error::NonFinite {
            stage: "encoder",
            layer: cfg.layers,
        });
    }
    Ok(EncoderTrace {
        embeddings,
        patch_states: x,
        attention,
    })
}

/// Single-epoch embedding.
pub fn encode(epoch: &[f64], cfg: &EncoderConfig, params: &ParamStore) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let trace = encode_batch(&mut tape, params, cfg, &[epoch], None)?;
    Ok(tape.value(trace.embeddings).data().to_vec())
}

/// Embeddings of many epochs, evaluated in chunks.
pub fn encode_all(epochs: &[&[f64]], cfg: &EncoderConfig, params: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(epochs.len());
    for chunk in epochs.chunks(32) {
        let mut tape = Tape::new();
        let trace = encode_batch(&mut tape, params, cfg, chunk, None)?;
        out.extend(tape.value(trace.embeddings).data().chunks(cfg.embed_dim).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Per-layer attention probabilities (`heads × patches × patches`).
pub fn attention_maps(epoch: &[f64], cfg: &EncoderConfig, params: &ParamStore) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let trace = encode_batch(&mut tape, params, cfg, &[epoch], None)?;
    Ok(trace
        .attention
        .iter()
        .map(|&a| {
            let t = tape.aux(a).expect("attention saves probabilities");
            t.reshape(&t.shape()[1..]).expect("drop batch axis")
        })
        .collect())
}

/// Per-channel embeddings in the output space: the head applied to each
/// channel's transformer states averaged over time. `channels × embed_dim`.
pub fn channel_embeddings(epoch: &[f64], cfg: &EncoderConfig, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let trace = encode_batch(&mut tape, params, cfg, &[epoch], None)?;
    let per_channel = tape.segment_mean(trace.patch_states, cfg.n_time())?;
    let out = layers::linear(&mut tape, params, "enc.head", per_channel)?;
    Ok(tape.value(out).clone())
}

/// Mean embedding of the given channels, projected like [`channel_embeddings`].
pub fn region_embedding(channel_embeds: &Tensor, channels: &[usize]) -> Result<Vec<f64>> {
    if channels.is_empty() {
        return Err(Error::Metric("empty channel group".into()));
    }
    let d = channel_embeds.cols();
    let mut out = vec![0.0; d];
    for &c in channels {
        out.iter_mut().zip(channel_embeds.row(c)).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|v| *v /= channels.len() as f64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rate: f64, start_ms: f64, samples: usize, rows: Vec<f64>, ids: Vec<u32>) -> EpochSet {
        let c = rows.len() / samples / ids.len();
        EpochSet {
            subject_id: "s".into(),
            channels: (0..c).map(|i| format!("C{i}")).collect(),
            regions: vec![None; c],
            sample_rate: rate,
            start_ms,
            n_samples: samples,
            data: rows,
            repetition_index: vec![0; ids.len()],
            stimulus_ids: ids,
        }
    }

    #[test]
    fn region_prefixes() {
        assert_eq!(Region::from_channel_name("Fp1"), Some(Region::Frontal));
        assert_eq!(Region::from_channel_name("AF7"), Some(Region::Frontal));
        assert_eq!(Region::from_channel_name("Fz"), Some(Region::Frontal));
        assert_eq!(Region::from_channel_name("FT9"), Some(Region::Temporal));
        assert_eq!(Region::from_channel_name("TP10"), Some(Region::Temporal));
        assert_eq!(Region::from_channel_name("FC3"), Some(Region::Central));
        assert_eq!(Region::from_channel_name("Cz"), Some(Region::Central));
        assert_eq!(Region::from_channel_name("CP2"), Some(Region::Central));
        assert_eq!(Region::from_channel_name("P7"), Some(Region::Parietal));
        assert_eq!(Region::from_channel_name("PO8"), Some(Region::Occipital));
        assert_eq!(Region::from_channel_name("Oz"), Some(Region::Occipital));
        assert_eq!(Region::from_channel_name("EOG"), None);
    }

    #[test]
    fn preprocess_output_length_at_200hz() {
        // 1000 Hz, −200..1000 ms.
        let raw = set(1000.0, -200.0, 1200, vec![0.0; 1200], vec![0]);
        let out = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.n_samples, 200);
        assert_eq!(out.sample_rate, 200.0);
    }

    #[test]
    fn constant_signal_equal_to_baseline_is_zeroed() {
        let raw = set(1000.0, -200.0, 1200, vec![0.037; 2400], vec![3]);
        let out = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_decimation_and_scaling() {
        let raw = set(400.0, 0.0, 4, vec![1.0, 1.0, 3.0, 3.0], vec![0]);
        let cfg = PreprocessConfig {
            target_rate: 200.0,
            baseline_ms: 0.0,
            scale_mv: 0.1,
            average_repetitions: false,
        };
        let out = preprocess(&raw, &cfg).unwrap();
        assert_eq!(out.data.len(), 2);
        assert!((out.data[0] - 10.0).abs() < 1e-12 && (out.data[1] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn preprocess_errors() {
        let raw = set(1000.0, -100.0, 1100, vec![0.0; 1100], vec![0]);
        assert!(matches!(preprocess(&raw, &PreprocessConfig::default()), Err(Error::Preprocess(_))));
        let raw = set(1000.0, -200.0, 1200, vec![0.0; 1200], vec![0]);
        let cfg = PreprocessConfig {
            target_rate: 300.0,
            ..PreprocessConfig::default()
        };
        assert!(matches!(preprocess(&raw, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn repetitions_are_averaged() {
        let raw = set(200.0, 0.0, 2, vec![1.0, 2.0, 9.0, 9.0, 3.0, 4.0], vec![7, 8, 7]);
        let cfg = PreprocessConfig {
            target_rate: 200.0,
            baseline_ms: 0.0,
            scale_mv: 1.0,
            average_repetitions: true,
        };
        let out = preprocess(&raw, &cfg).unwrap();
        assert_eq!(out.stimulus_ids, vec![7, 8]);
        assert_eq!(out.repetition_index, vec![2, 1]);
        assert_eq!(out.data, vec![2.0, 3.0, 9.0, 9.0]);
    }

    #[test]
    fn patch_counts() {
        let ep: Vec<f64> = (0..16).map(f64::from).collect();
        let g = patchify(&ep, 2, 8, 4).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.patch(2), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!((g.channel_index(2), g.time_index(2)), (1, 0));

        let ep: Vec<f64> = (0..9).map(f64::from).collect();
        let g = patchify(&ep, 1, 9, 4).unwrap();
        assert_eq!(g.len(), 2);
        assert!(!g.patches.contains(&8.0));

        let g = patchify(&vec![0.0; 63 * 200], 63, 200, 200).unwrap();
        assert_eq!(g.len(), 63);
        assert!(matches!(patchify(&ep, 1, 9, 10), Err(Error::Config(_))));
    }

    #[test]
    fn positional_sums() {
        let e = Tensor::full(&[6, 2], 0.3);
        let zeros_t = Tensor::zeros(&[3, 2]);
        let zeros_s = Tensor::zeros(&[2, 2]);
        assert_eq!(add_positional(&e, &zeros_t, &zeros_s, 2, 3).unwrap(), e);

        let te = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0]).unwrap();
        let se = Tensor::new(vec![2, 2], vec![0.0, 2.0, 3.0, 0.0]).unwrap();
        let out = add_positional(&Tensor::zeros(&[6, 2]), &te, &se, 2, 3).unwrap();
        assert_eq!(out.row(4), &[3.5, 0.5]);

        // j=2, k=1 in 1-based terms: channel index 1, time index 0.
        let mut e = Tensor::zeros(&[2, 2]);
        e.data_mut()[2..].copy_from_slice(&[1.0, 1.0]);
        let te = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let se = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(add_positional(&e, &te, &se, 2, 1).unwrap().row(1), &[2.0, 2.0]);
        assert!(add_positional(&Tensor::zeros(&[4, 2]), &te, &se, 2, 2).is_err());
    }

    #[test]
    fn reference_config_runs_to_200_dims() {
        let cfg = EncoderConfig::reference();
        cfg.validate().unwrap();
        let p = init_encoder_params(&cfg, 0).unwrap();
        let ep: Vec<f64> = (0..63 * 200).map(|i| ((i as f64) * 0.01).sin()).collect();
        let e = encode(&ep, &cfg, &p).unwrap();
        assert_eq!(e.len(), 200);
    }

    #[test]
    fn conv_stack_too_long_for_window_is_rejected() {
        let cfg = EncoderConfig {
            window: 4,
            kernels: vec![15, 3, 3],
            paddings: vec![0, 1, 1],
            ..EncoderConfig::desk(2, 8, 4)
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("layer 0"), "{msg}");
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_channels: 2,
            n_samples: 8,
            window: 4,
            conv_in: vec![1],
            conv_out: vec![4],
            kernels: vec![3],
            strides: vec![2],
            paddings: vec![1],
            norm_groups: 2,
            hidden: 4,
            embed_dim: 4,
            layers: 1,
            mlp: 8,
            heads: 2,
            ..EncoderConfig::desk(2, 8, 4)
        }
    }

    fn wave(n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.7 + phase).sin() + 0.1 * i as f64).collect()
    }

    #[test]
    fn idempotent_when_baseline_is_zero_and_rates_match() {
        let post = wave(10, 0.3);
        let mut row = vec![0.0; 4];
        row.extend_from_slice(&post);
        let raw = set(200.0, -20.0, 14, row, vec![0]);
        let cfg = PreprocessConfig {
            target_rate: 200.0,
            baseline_ms: 20.0,
            scale_mv: 1.0,
            average_repetitions: false,
        };
        let out = preprocess(&raw, &cfg).unwrap();
        assert_eq!(out.data, post);
    }

    #[test]
    fn conv_output_length_for_reference_first_layer() {
        let cfg = EncoderConfig {
            window: 16,
            conv_in: vec![1],
            conv_out: vec![8],
            kernels: vec![15],
            strides: vec![8],
            paddings: vec![7],
            ..EncoderConfig::desk(2, 16, 4)
        };
        assert_eq!(cfg.conv_output_len().unwrap(), 2);
    }

    #[test]
    fn zero_patch_with_zero_biases_embeds_to_zero() {
        let cfg = tiny();
        let mut p = init_encoder_params(&cfg, 1).unwrap();
        // group norm of an all-zero map is zero, so only beta would leak through.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 1, 4]));
        let e = temporal_encode(&mut tape, &p, &cfg, x).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
        p.get_mut("enc.patch_proj.b").unwrap().data_mut()[0] = 0.5;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4]));
        let e = temporal_encode(&mut tape, &p, &cfg, x).unwrap();
        assert_eq!(tape.value(e).data()[0], 0.5);
    }

    #[test]
    fn zero_depth_identity_head_mean_pools() {
        let cfg = EncoderConfig { layers: 0, ..tiny() };
        let mut p = init_encoder_params(&cfg, 2).unwrap();
        p.insert("enc.head.w", Tensor::identity(4));
        let ep = wave(16, 0.0);
        let e = encode(&ep, &cfg, &p).unwrap();

        let mut tape = Tape::new();
        let grid = patchify(&ep, 2, 8, 4).unwrap();
        let x = tape.constant(Tensor::new(vec![4, 1, 4], grid.patches.clone()).unwrap());
        let pe = temporal_encode(&mut tape, &p, &cfg, x).unwrap();
        let ctx = add_positional(tape.value(pe), p.get("enc.te").unwrap(), p.get("enc.se").unwrap(), 2, 2).unwrap();
        for c in 0..4 {
            let mean = (0..4).map(|r| ctx.at2(r, c)).sum::<f64>() / 4.0;
            assert!((e[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_patches_with_tables_leaves_embedding_unchanged() {
        let cfg = EncoderConfig {
            n_channels: 3,
            n_samples: 12,
            ..tiny()
        };
        let p = init_encoder_params(&cfg, 3).unwrap();
        let ep = wave(36, 1.0);
        let e0 = encode(&ep, &cfg, &p).unwrap();

        // Channels (2,0,1), time windows (1,2,0).
        let chan = [2usize, 0, 1];
        let time = [1usize, 2, 0];
        let mut permuted = vec![0.0; 36];
        for (new_c, &old_c) in chan.iter().enumerate() {
            for (new_t, &old_t) in time.iter().enumerate() {
                let src = &ep[old_c * 12 + old_t * 4..old_c * 12 + old_t * 4 + 4];
                permuted[new_c * 12 + new_t * 4..new_c * 12 + new_t * 4 + 4].copy_from_slice(src);
            }
        }
        let mut q = p.clone();
        let se = p.get("enc.se").unwrap();
        let te = p.get("enc.te").unwrap();
        let se_rows: Vec<Vec<f64>> = chan.iter().map(|&c| se.row(c).to_vec()).collect();
        let te_rows: Vec<Vec<f64>> = time.iter().map(|&t| te.row(t).to_vec()).collect();
        q.insert("enc.se", Tensor::from_rows(&se_rows).unwrap());
        q.insert("enc.te", Tensor::from_rows(&te_rows).unwrap());
        let e1 = encode(&permuted, &cfg, &q).unwrap();
        let diff = e0.iter().zip(&e1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        assert!(e0.iter().zip(&encode(&permuted, &cfg, &p).unwrap()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = EncoderConfig { layers: 2, ..tiny() };
        let p = init_encoder_params(&cfg, 4).unwrap();
        for map in attention_maps(&wave(16, 0.2), &cfg, &p).unwrap() {
            assert_eq!(map.shape(), &[2, 4, 4]);
            for row in map.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut p = init_encoder_params(&cfg, 5).unwrap();
        // Perturb norm affine terms away from the identity so every path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, t) in p.iter_mut() {
            if name.contains("gamma") || name.contains("beta") || name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v += 0.3 * (rng.random::<f64>() - 0.5));
            }
        }
        let a = wave(16, 0.0);
        let b = wave(16, 2.0);
        let weights = [0.7, -1.3, 0.4, 2.1, -0.2, 0.9, 1.1, -0.6];
        let loss = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
            let trace = encode_batch(tape, store, &cfg, &[&a, &b], None)?;
            let w = tape.constant(Tensor::new(vec![2, 4], weights.to_vec())?);
            let prod = tape.mul(trace.embeddings, w)?;
            Ok(tape.sum(prod))
        };
        let mut tape = Tape::new();
        let l = loss(&mut tape, &p).unwrap();
        let grads = tape.param_grads(&tape.backward(l).unwrap());
        let fd = crate::numerics::fd_gradient_oracle(
            |store| {
                let mut t = Tape::new();
                let l = loss(&mut t, store)?;
                Ok(t.scalar(l))
            },
            &p,
            &[],
            1e-5,
        )
        .unwrap();
        for (name, g) in &grads {
            let err = crate::numerics::relative_error(g.data(), fd[name].data());
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn layer_decay_scales() {
        let cfg = EncoderConfig {
            layer_decay: 0.8,
            layers: 2,
            ..tiny()
        };
        assert_eq!(cfg.lr_scale("enc.head.w"), 1.0);
        assert!((cfg.lr_scale("enc.blocks.1.ln1.gamma") - 0.8).abs() < 1e-15);
        assert!((cfg.lr_scale("enc.blocks.0.ln1.gamma") - 0.64).abs() < 1e-15);
        assert!((cfg.lr_scale("enc.te") - 0.512).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn patch_count_law(c in 1usize..6, t in 1usize..64, w in 1usize..64) {
            proptest::prop_assume!(w <= t);
            let g = patchify(&vec![0.0; c * t], c, t, w).unwrap();
            proptest::prop_assert_eq!(g.len(), c * (t / w));
            proptest::prop_assert_eq!(g.patches.len(), c * (t / w) * w);
        }
    }
}
