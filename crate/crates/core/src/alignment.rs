//! Contrastive alignment of signal embeddings to frozen image embeddings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, DropPath, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, RetrievalResult};
use crate::numerics::{cosine_lr, AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};

pub const LOG_TAU: &str = "align.log_tau";

/// Paired rows of signal and image embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub eeg: Tensor,
    pub image: Tensor,
}

impl PairBatch {
    pub fn new(eeg: Tensor, image: Tensor) -> Result<Self> {
        if eeg.shape().len() != 2 || eeg.shape() != image.shape() {
            return Err(Error::shape("pair batch", eeg.shape(), image.shape()));
        }
        Ok(PairBatch { eeg, image })
    }

    pub fn len(&self) -> usize {
        self.eeg.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Symmetric cross-entropy over the cosine-similarity matrix scaled by
/// `exp(−log_tau)`, averaged over both directions.
pub fn clip_loss_graph(tape: &mut Tape, e: Var, z: Var, log_tau: Var) -> Result<Var> {
    let b = tape.shape(e)[0];
    let en = tape.l2_normalize_rows(e, "eeg embedding")?;
    let zn = tape.l2_normalize_rows(z, "image embedding")?;
    let s = tape.matmul_nt(en, zn)?;
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(s, inv_tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let rows = tape.softmax_xent_rows(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.softmax_xent_rows(lt, &targets)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5))
}

/// Mean squared coordinate difference, optionally after row normalization.
pub fn mse_loss_graph(tape: &mut Tape, e: Var, z: Var, normalize: bool) -> Result<Var> {
    let (e, z) = if normalize {
        (
            tape.l2_normalize_rows(e, "eeg embedding")?,
            tape.l2_normalize_rows(z, "image embedding")?,
        )
    } else {
        (e, z)
    };
    let d = tape.sub(e, z)?;
    Ok(tape.mean_square(d))
}

pub fn combined_loss_graph(tape: &mut Tape, e: Var, z: Var, log_tau: Var, lambda: f64, normalize_mse: bool) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let clip = clip_loss_graph(tape, e, z, log_tau)?;
    let mse = mse_loss_graph(tape, e, z, normalize_mse)?;
    let a = tape.scale(clip, lambda);
    let b = tape.scale(mse, 1.0 - lambda);
    tape.add(a, b)
}

fn check_tau(tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(tau.ln())
}

pub fn clip_loss(batch: &PairBatch, tau: f64) -> Result<f64> {
    let lt = check_tau(tau)?;
    let mut tape = Tape::new();
    let e = tape.constant(batch.eeg.clone());
    let z = tape.constant(batch.image.clone());
    let t = tape.constant(Tensor::scalar(lt));
    let l = clip_loss_graph(&mut tape, e, z, t)?;
    Ok(tape.scalar(l))
}

/// Raw mean over all `B·d` coordinates of `(e − z)²`.
pub fn mse_loss(batch: &PairBatch) -> Result<f64> {
    let n = batch.eeg.len() as f64;
    Ok(batch
        .eeg
        .data()
        .iter()
        .zip(batch.image.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `λ·clip + (1−λ)·mse`, with the MSE term on raw or row-normalized embeddings.
pub fn combined_loss(batch: &PairBatch, lambda: f64, tau: f64, normalize_mse: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    let lt = check_tau(tau)?;
    let mut tape = Tape::new();
    let e = tape.constant(batch.eeg.clone());
    let z = tape.constant(batch.image.clone());
    let t = tape.constant(Tensor::scalar(lt));
    let l = combined_loss_graph(&mut tape, e, z, t, lambda, normalize_mse)?;
    Ok(tape.scalar(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub lambda: f64,
    pub init_tau: f64,
    pub learn_tau: bool,
    /// Row-normalize both embeddings inside the MSE term.
    pub normalize_mse: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl AlignmentConfig {
    /// Full-size optimizer settings.
    pub fn reference() -> Self {
        AlignmentConfig {
            lambda: 0.8,
            init_tau: 0.07,
            learn_tau: true,
            normalize_mse: true,
            epochs: 50,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 2e-3,
                min_lr: 1e-5,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.05,
                warmup_epochs: 5,
            },
        }
    }

    pub fn desk() -> Self {
        AlignmentConfig {
            epochs: 60,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                warmup_epochs: 3,
                ..Self::reference().optimizer
            },
            ..Self::reference()
        }
    }
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Training pairs and a held-out retrieval split.
pub struct AlignmentData<'a> {
    pub train_epochs: Vec<&'a [f64]>,
    pub train_images: Vec<&'a [f64]>,
    pub val_epochs: Vec<&'a [f64]>,
    /// Gallery rows for validation retrieval.
    pub val_gallery: Tensor,
    /// Gallery row matching each validation epoch.
    pub val_targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub tau: f64,
}

pub struct AlignOutcome {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub curve: Vec<AlignEpoch>,
    pub step_losses: Vec<f64>,
}

pub fn init_alignment_params(params: &mut ParamStore, cfg: &AlignmentConfig) -> Result<()> {
    params.insert(LOG_TAU, Tensor::scalar(check_tau(cfg.init_tau)?));
    Ok(())
}

pub fn tau(params: &ParamStore) -> Result<f64> {
    Ok(params.get(LOG_TAU)?.data()[0].exp())
}

/// Top-1/top-5 of the validation epochs against the gallery.
pub fn validate(data: &AlignmentData<'_>, enc: &EncoderConfig, params: &ParamStore) -> Result<Option<RetrievalResult>> {
    if data.val_epochs.is_empty() {
        return Ok(None);
    }
    let embeds = encoder::encode_all(&data.val_epochs, enc, params)?;
    let q = Tensor::from_rows(&embeds)?;
    let k = 5.min(data.val_gallery.rows());
    metrics::retrieval_topk(&q, &data.val_gallery, &data.val_targets, k).map(Some)
}

/// Fine-tunes the encoder (and temperature) on the combined objective.
/// `params` must hold encoder parameters; the temperature is added if absent.
pub fn train_alignment(
    data: &AlignmentData<'_>,
    enc: &EncoderConfig,
    mut params: ParamStore,
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<AlignOutcome> {
    let n = data.train_epochs.len();
    if n == 0 || data.train_images.len() != n {
        return Err(Error::Config(format!(
            "alignment needs matching non-empty pairs, got {n} epochs and {} images",
            data.train_images.len()
        )));
    }
    if data.train_images.iter().any(|z| z.len() != enc.embed_dim) {
        return Err(Error::Config(format!("image embeddings must have dimension {}", enc.embed_dim)));
    }
    if !params.contains(LOG_TAU) {
        init_alignment_params(&mut params, cfg)?;
    }
    let mut optimizer = AdamW::new(cfg.optimizer.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11_9e);
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let mut last_good = params.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let eps: Vec<&[f64]> = chunk.iter().map(|&i| data.train_epochs[i]).collect();
            let mut zs = Vec::with_capacity(chunk.len() * enc.embed_dim);
            for &i in chunk {
                zs.extend_from_slice(data.train_images[i]);
            }
            let mut tape = Tape::new();
            let trace = encoder::encode_batch(&mut tape, &params, enc, &eps, Some(DropPath { rng: &mut rng }))?;
            let z = tape.constant(Tensor::new(vec![chunk.len(), enc.embed_dim], zs)?);
            let lt = if cfg.learn_tau {
                tape.param(&params, LOG_TAU)?
            } else {
                tape.constant(params.get(LOG_TAU)?.clone())
            };
            let loss = combined_loss_graph(&mut tape, trace.embeddings, z, lt, cfg.lambda, cfg.normalize_mse)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    stage: "alignment",
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            step_losses.push(value);
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let grads = tape.param_grads(&grads);
            let o = &cfg.optimizer;
            let progress = epoch as f64 + step as f64 / steps_per_epoch as f64;
            let lr = cosine_lr(progress, cfg.epochs as f64, o.warmup_epochs as f64, o.lr, o.min_lr);
            optimizer.update(&mut params, &grads, lr, |name| enc.lr_scale(name));
        }
        let val = validate(data, enc, &params)?;
        let row = AlignEpoch {
            epoch,
            train_loss: total / n as f64,
            val_top1: val.as_ref().map_or(f64::NAN, |r| r.top1),
            val_top5: val.as_ref().map_or(f64::NAN, |r| r.top5),
            tau: tau(&params)?,
        };
        log::info!(
            "align epoch {epoch}: loss {:.4} top1 {:.4} top5 {:.4} tau {:.4}",
            row.train_loss,
            row.val_top1,
            row.val_top5,
            row.tau
        );
        curve.push(row);
        last_good = params.clone();
    }
    Ok(AlignOutcome {
        params,
        optimizer,
        curve,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient_oracle, relative_error};
    use rand::Rng;

    fn batch(e: &[Vec<f64>], z: &[Vec<f64>]) -> PairBatch {
        PairBatch::new(Tensor::from_rows(e).unwrap(), Tensor::from_rows(z).unwrap()).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
        (0..b).map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect()
    }

    #[test]
    fn clip_examples() {
        let one = batch(&[vec![0.3, -2.0]], &[vec![5.0, 1.0]]);
        assert_eq!(clip_loss(&one, 0.07).unwrap(), 0.0);

        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = batch(&e, &e);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((clip_loss(&b, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn mse_examples() {
        let e = vec![vec![0.5, -1.0], vec![2.0, 0.0]];
        assert_eq!(mse_loss(&batch(&e, &e)).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = e.iter().map(|r| r.iter().map(|v| v + 1.0).collect()).collect();
        assert_eq!(mse_loss(&batch(&shifted, &e)).unwrap(), 1.0);
        assert_eq!(mse_loss(&batch(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]])).unwrap(), 12.5);
    }

    #[test]
    fn combined_endpoints_and_plug_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&random_rows(&mut rng, 4, 3), &random_rows(&mut rng, 4, 3));
        let clip = clip_loss(&b, 0.5).unwrap();
        assert_eq!(combined_loss(&b, 1.0, 0.5, true).unwrap(), clip);
        assert_eq!(combined_loss(&b, 0.0, 0.5, false).unwrap(), mse_loss(&b).unwrap());

        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let z = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let b = batch(&e, &e);
        let want = 0.8 * (1.0 + (-1.0f64).exp()).ln() + 0.2 * 0.0;
        assert!((combined_loss(&b, 0.8, 1.0, false).unwrap() - want).abs() < 1e-12);
        let b = batch(&e, &z);
        assert!(matches!(combined_loss(&b, 0.8, 1.0, false), Err(Error::ZeroNorm { row: 0, .. })));
    }

    #[test]
    fn joint_permutation_and_row_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in 1..=8 {
            let e = random_rows(&mut rng, b, 5);
            let z = random_rows(&mut rng, b, 5);
            let base = clip_loss(&batch(&e, &z), 0.3).unwrap();
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut rng);
            let pe: Vec<Vec<f64>> = perm.iter().map(|&i| e[i].clone()).collect();
            let pz: Vec<Vec<f64>> = perm.iter().map(|&i| z[i].clone()).collect();
            assert!((clip_loss(&batch(&pe, &pz), 0.3).unwrap() - base).abs() < 1e-12);
            let mut se = e.clone();
            se[0].iter_mut().for_each(|v| *v *= 3.7);
            assert!((clip_loss(&batch(&se, &z), 0.3).unwrap() - base).abs() < 1e-12);
            assert!(base >= 0.0);
        }
    }

    #[test]
    fn raising_diagonal_similarity_lowers_loss() {
        // Pull each e_i toward z_i: diagonal cosines rise, and with orthonormal
        // z the off-diagonals stay fixed when e_i moves within span(z_i, u).
        let z = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let mut prev = f64::INFINITY;
        for t in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let e = vec![vec![t, 0.0, 1.0], vec![0.0, t, 1.0]];
            let l = clip_loss(&batch(&e, &z), 0.5).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn gradients_through_tau_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        p.insert("e", Tensor::from_rows(&random_rows(&mut rng, 4, 3)).unwrap());
        p.insert("z", Tensor::from_rows(&random_rows(&mut rng, 4, 3)).unwrap());
        p.insert(LOG_TAU, Tensor::scalar(0.2f64.ln()));
        for normalize in [true, false] {
            let f = |tape: &mut Tape, s: &ParamStore| -> Result<Var> {
                let e = tape.param(s, "e")?;
                let z = tape.param(s, "z")?;
                let t = tape.param(s, LOG_TAU)?;
                combined_loss_graph(tape, e, z, t, 0.8, normalize)
            };
            let mut tape = Tape::new();
            let l = f(&mut tape, &p).unwrap();
            let g = tape.param_grads(&tape.backward(l).unwrap());
            let fd = fd_gradient_oracle(
                |s| {
                    let mut t = Tape::new();
                    let l = f(&mut t, s)?;
                    Ok(t.scalar(l))
                },
                &p,
                &[],
                1e-5,
            )
            .unwrap();
            for (name, gv) in &g {
                let err = relative_error(gv.data(), fd[name].data());
                assert!(err < 1e-6, "{name}: {err}");
            }
        }
    }

    fn tiny_setup() -> (EncoderConfig, ParamStore, Vec<f64>, Vec<f64>) {
        let enc = EncoderConfig {
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
        };
        let p = encoder::init_encoder_params(&enc, 0).unwrap();
        let ep: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).sin()).collect();
        (enc, p, ep, vec![0.5, -0.2, 0.1, 0.9])
    }

    #[test]
    fn zero_epochs_and_zero_lr() {
        let (enc, p, ep, z) = tiny_setup();
        let data = AlignmentData {
            train_epochs: vec![&ep],
            train_images: vec![&z],
            val_epochs: vec![],
            val_gallery: Tensor::zeros(&[1, 4]),
            val_targets: vec![],
        };
        let cfg = AlignmentConfig {
            epochs: 0,
            ..AlignmentConfig::desk()
        };
        let out = train_alignment(&data, &enc, p.clone(), &cfg, 0).unwrap();
        assert!(out.curve.is_empty());
        for (name, t) in p.iter() {
            assert_eq!(out.params.get(name).unwrap(), t);
        }

        let cfg = AlignmentConfig {
            epochs: 3,
            optimizer: AdamWConfig {
                lr: 0.0,
                min_lr: 0.0,
                ..AlignmentConfig::desk().optimizer
            },
            ..AlignmentConfig::desk()
        };
        let out = train_alignment(&data, &enc, p, &cfg, 0).unwrap();
        assert_eq!(out.step_losses.len(), 3);
        assert!(out.step_losses.windows(2).all(|w| w[0] == w[1]));
    }
}
