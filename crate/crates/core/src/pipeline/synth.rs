//! Class-structured synthetic signals and images.
//!
//! Each class has a prototype image (soft colored blobs) and a prototype
//! source waveform set. A trial is the fixed mixing matrix applied to its
//! class sources plus Gaussian noise, recorded with a per-channel DC offset
//! and a pre-stimulus baseline at the raw rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{EpochSet, Region};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{FeatureExtractor, RandomProjection};
use crate::numerics::Tensor;

use super::container::{Dataset, DatasetMeta, Pair, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub pairs_per_class: usize,
    /// Trailing pairs of each class held out for evaluation.
    pub held_out_per_class: usize,
    pub channels: usize,
    /// Post-stimulus samples after preprocessing.
    pub samples: usize,
    pub raw_rate: f64,
    pub target_rate: f64,
    pub baseline_ms: f64,
    pub sources: usize,
    pub amplitude_mv: f64,
    pub noise_level: f64,
    pub image_size: usize,
    pub image_channels: usize,
    pub image_jitter: f64,
    pub embed_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 16,
            pairs_per_class: 8,
            held_out_per_class: 2,
            channels: 8,
            samples: 64,
            raw_rate: 400.0,
            target_rate: 200.0,
            baseline_ms: 50.0,
            sources: 4,
            amplitude_mv: 0.05,
            noise_level: 0.1,
            image_size: 16,
            image_channels: 3,
            image_jitter: 0.02,
            embed_dim: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.classes, self.pairs_per_class, self.channels, self.samples, self.sources, self.image_size, self.embed_dim]
            .contains(&0)
        {
            return Err(Error::Config("synthetic dataset counts must be at least 1".into()));
        }
        if self.held_out_per_class >= self.pairs_per_class {
            return Err(Error::Config("held-out pairs must leave at least one training pair per class".into()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config("synthetic images have 1 or 3 channels".into()));
        }
        if self.decimation()? == 0 {
            return Err(Error::Config("raw rate must be at least the target rate".into()));
        }
        self.baseline_samples()?;
        Ok(())
    }

    pub fn decimation(&self) -> Result<usize> {
        let r = self.raw_rate / self.target_rate;
        if (r - r.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("raw rate {} is not a multiple of {}", self.raw_rate, self.target_rate)));
        }
        Ok(r.round() as usize)
    }

    pub fn baseline_samples(&self) -> Result<usize> {
        let n = self.baseline_ms * self.raw_rate / 1000.0;
        if (n - n.round()).abs() > 1e-9 || n < 0.0 {
            return Err(Error::Config(format!("baseline {} ms is not a whole number of raw samples", self.baseline_ms)));
        }
        Ok(n.round() as usize)
    }

    /// Seed of the frozen image-embedding projection for a dataset seed.
    pub fn embed_seed(seed: u64) -> u64 {
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xe3b
    }
}

const NAMES: [(&str, Region); 16] = [
    ("Fp1", Region::Frontal),
    ("F3", Region::Frontal),
    ("T7", Region::Temporal),
    ("C3", Region::Central),
    ("Cz", Region::Central),
    ("P3", Region::Parietal),
    ("O1", Region::Occipital),
    ("O2", Region::Occipital),
    ("Fp2", Region::Frontal),
    ("F4", Region::Frontal),
    ("T8", Region::Temporal),
    ("C4", Region::Central),
    ("P4", Region::Parietal),
    ("PO7", Region::Occipital),
    ("PO8", Region::Occipital),
    ("Pz", Region::Parietal),
];

fn channel_layout(n: usize) -> (Vec<String>, Vec<Option<Region>>) {
    (0..n)
        .map(|i| match NAMES.get(i) {
            Some(&(name, region)) => (name.to_string(), Some(region)),
            None => (format!("E{i}"), Some(Region::ALL[i % Region::ALL.len()])),
        })
        .unzip()
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn prototype_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let (c, s) = (cfg.image_channels, cfg.image_size);
    let bg: Vec<f64> = (0..c).map(|_| 0.1 + 0.2 * rng.random::<f64>()).collect();
    let mut data: Vec<f64> = bg.iter().flat_map(|&v| std::iter::repeat_n(v, s * s)).collect();
    let scale = s as f64 / 16.0;
    for _ in 0..3 {
        let cy = rng.random::<f64>() * s as f64;
        let cx = rng.random::<f64>() * s as f64;
        let sigma = (1.5 + 2.0 * rng.random::<f64>()) * scale;
        let color: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..c {
                    let p = &mut data[ch * s * s + y * s + x];
                    *p = (1.0 - a) * *p + a * color[ch];
                }
            }
        }
    }
    Image {
        channels: c,
        height: s,
        width: s,
        data,
    }
}

/// Source waveforms `sources × post_samples` (raw rate), a few smooth
/// oscillations under an onset envelope.
fn prototype_sources(cfg: &SynthConfig, post: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; cfg.sources * post];
    for s in 0..cfg.sources {
        for _ in 0..2 {
            let f = 2.0 + 10.0 * rng.random::<f64>();
            let phase = std::f64::consts::TAU * rng.random::<f64>();
            let amp = gauss(rng);
            for t in 0..post {
                let sec = t as f64 / cfg.raw_rate;
                let env = 1.0 - (-sec / 0.03).exp();
                out[s * post + t] += amp * env * (std::f64::consts::TAU * f * sec + phase).sin();
            }
        }
    }
    out
}

/// Frozen image-embedding map of a dataset.
pub fn image_embedder(cfg: &SynthConfig, seed: u64) -> Result<RandomProjection> {
    RandomProjection::new(
        "image_embed",
        cfg.image_channels,
        cfg.image_size,
        cfg.image_size,
        cfg.embed_dim,
        SynthConfig::embed_seed(seed),
    )
}

pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let factor = cfg.decimation()?;
    let n_base = cfg.baseline_samples()?;
    let post = cfg.samples * factor;
    let n_raw = n_base + post;
    let (channels, regions) = channel_layout(cfg.channels);

    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing: Vec<f64> = (0..cfg.channels * cfg.sources)
        .map(|_| gauss(&mut proto_rng) / (cfg.sources as f64).sqrt())
        .collect();
    let offsets: Vec<f64> = (0..cfg.channels).map(|_| 0.02 * gauss(&mut proto_rng)).collect();
    let mut images_proto = Vec::with_capacity(cfg.classes);
    let mut sources = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        images_proto.push(prototype_image(cfg, &mut proto_rng));
        sources.push(prototype_sources(cfg, post, &mut proto_rng));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let n_pairs = cfg.classes * cfg.pairs_per_class;
    let mut data = Vec::with_capacity(n_pairs * cfg.channels * n_raw);
    let mut images = Vec::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let sigma = cfg.noise_level * cfg.amplitude_mv;
    for class in 0..cfg.classes {
        let src = &sources[class];
        for j in 0..cfg.pairs_per_class {
            let i = class * cfg.pairs_per_class + j;
            for ch in 0..cfg.channels {
                for t in 0..n_raw {
                    let clean = if t < n_base {
                        0.0
                    } else {
                        let tp = t - n_base;
                        (0..cfg.sources)
                            .map(|s| mixing[ch * cfg.sources + s] * src[s * post + tp])
                            .sum::<f64>()
                    };
                    data.push(offsets[ch] + cfg.amplitude_mv * clean + sigma * gauss(&mut noise_rng));
                }
            }
            let proto = &images_proto[class];
            let pix = proto
                .data
                .iter()
                .map(|&p| (p + cfg.image_jitter * gauss(&mut noise_rng)).clamp(0.0, 1.0))
                .collect();
            images.push(Image::new(proto.channels, proto.height, proto.width, pix)?);
            pairs.push(Pair {
                subject: 0,
                trial: i as u32,
                image: i as u32,
                class: class as u32,
                split: if j + cfg.held_out_per_class >= cfg.pairs_per_class {
                    Split::Test
                } else {
                    Split::Train
                },
            });
        }
    }
    let embedder = image_embedder(cfg, seed)?;
    let rows: Vec<Vec<f64>> = images.iter().map(|img| embedder.extract(img)).collect::<Result<_>>()?;
    let subject = EpochSet {
        subject_id: "sub-01".into(),
        channels,
        regions,
        sample_rate: cfg.raw_rate,
        start_ms: -cfg.baseline_ms,
        n_samples: n_raw,
        data,
        stimulus_ids: (0..n_pairs as u32).collect(),
        repetition_index: vec![1; n_pairs],
    };
    Ok(Dataset {
        meta: DatasetMeta {
            name: "synthetic".into(),
            classes: cfg.classes,
            seed,
            notes: format!("{} pairs per class, noise {}", cfg.pairs_per_class, cfg.noise_level),
        },
        subjects: vec![subject],
        images,
        image_embeds: Tensor::from_rows(&rows)?,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{preprocess, PreprocessConfig};

    fn preprocessed(ds: &Dataset, cfg: &SynthConfig) -> EpochSet {
        preprocess(
            &ds.subjects[0],
            &PreprocessConfig {
                target_rate: cfg.target_rate,
                baseline_ms: cfg.baseline_ms,
                scale_mv: 0.1,
                average_repetitions: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn shape_and_round_trip() {
        let cfg = SynthConfig::default();
        let ds = synth_dataset(&cfg, 3).unwrap();
        assert_eq!(ds.pairs.len(), 128);
        assert_eq!(ds.pairs_in(Split::Test).len(), 32);
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        let pre = preprocessed(&ds, &cfg);
        assert_eq!((pre.n_channels(), pre.n_samples), (8, 64));
        assert_eq!(synth_dataset(&cfg, 3).unwrap(), ds);
    }

    #[test]
    fn zero_noise_makes_class_trials_identical() {
        let cfg = SynthConfig {
            noise_level: 0.0,
            classes: 3,
            pairs_per_class: 3,
            held_out_per_class: 1,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg, 1).unwrap();
        let s = &ds.subjects[0];
        for c in 0..3 {
            assert_eq!(s.epoch(c * 3), s.epoch(c * 3 + 1));
            assert_eq!(s.epoch(c * 3), s.epoch(c * 3 + 2));
        }
        assert_ne!(s.epoch(0), s.epoch(3));
    }

    /// Solves `a·x = b` for symmetric positive definite `a` by Gaussian
    /// elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let n = a.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                for k in 0..b[row].len() {
                    b[row][k] -= f * b[col][k];
                }
            }
        }
        for col in (0..n).rev() {
            for k in 0..b[col].len() {
                let s: f64 = (col + 1..n).map(|j| a[col][j] * b[j][k]).sum();
                b[col][k] = (b[col][k] - s) / a[col][col];
            }
        }
        b
    }

    #[test]
    fn ridge_probe_separates_classes() {
        let cfg = SynthConfig::default();
        let ds = synth_dataset(&cfg, 0).unwrap();
        let pre = preprocessed(&ds, &cfg);
        let n = pre.n_trials();
        let x: Vec<&[f64]> = (0..n).map(|i| pre.epoch(i)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        // Dual ridge: α = (XXᵀ + λI)⁻¹ Y, scores = XXᵀ α.
        let lambda = 1.0;
        let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(x[i], x[j])).collect()).collect();
        let mut reg = gram.clone();
        for (i, row) in reg.iter_mut().enumerate() {
            row[i] += lambda;
        }
        let y: Vec<Vec<f64>> = ds
            .pairs
            .iter()
            .map(|p| (0..cfg.classes).map(|c| if c as u32 == p.class { 1.0 } else { 0.0 }).collect())
            .collect();
        let alpha = solve(reg, y);
        let mut correct = 0;
        for i in 0..n {
            let scores: Vec<f64> = (0..cfg.classes).map(|c| (0..n).map(|j| gram[i][j] * alpha[j][c]).sum()).collect();
            let best = (0..cfg.classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            correct += (best as u32 == ds.pairs[i].class) as usize;
        }
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.9, "{acc}");
    }
}
