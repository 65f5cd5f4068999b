//! Stage runners. Each stage reads its prerequisites from the run
//! directory and writes its own outputs there.
//!
//! ```text
//! out/
//!   config.json  dataset.avds
//!   tokenizer.ckpt  align.ckpt  nsp.ckpt
//!   tokenizer_curve.csv  align_curve.csv  nsp_curve.csv
//!   generate/manifest.csv  generate/sample_NNN/{scale_KK.png,scale_KK.tok,final.png,tokens.bin}
//!   eval/{per_sample.csv,recon.csv,retrieval.csv,summary.json}
//!   analyze/region_scale.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{self, AlignEpoch, AlignmentData};
use crate::encoder::{self, preprocess, EpochSet, Region};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{self, FeatureExtractor, RandomProjection, RegionScaleMatrix};
use crate::nsp::{self, GenerateOptions, NspEpoch, NspSample};
use crate::numerics::{AdamW, ParamStore, Tensor};
use crate::tokenizer::{self, Tokenizer, VqEpoch};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::container::{Dataset, Pair, Split};
use super::report::{fmt, write_json, Csv};
use super::synth::{image_embedder, synth_dataset};

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.avds")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.ckpt"))
    }

    pub fn curve(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_curve.csv"))
    }

    pub fn generate_dir(&self) -> PathBuf {
        self.root.join("generate")
    }

    pub fn manifest(&self) -> PathBuf {
        self.generate_dir().join("manifest.csv")
    }

    pub fn sample_dir(&self, i: usize) -> PathBuf {
        self.generate_dir().join(format!("sample_{i:03}"))
    }

    pub fn scale_png(&self, i: usize, k: usize) -> PathBuf {
        self.sample_dir(i).join(format!("scale_{k:02}.png"))
    }

    pub fn final_png(&self, i: usize) -> PathBuf {
        self.sample_dir(i).join("final.png")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn analyze_dir(&self) -> PathBuf {
        self.root.join("analyze")
    }

    pub fn region_scale(&self) -> PathBuf {
        self.analyze_dir().join("region_scale.csv")
    }
}

fn require(path: &Path, stage: &'static str, command: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage {
            stage,
            command,
            path: path.to_path_buf(),
        })
    }
}

fn load_checkpoint(cfg: &RunConfig, layout: &Layout, stage: &'static str, command: &'static str) -> Result<Checkpoint> {
    let path = layout.checkpoint(stage);
    require(&path, stage, command)?;
    let ck = Checkpoint::load(&path)?;
    if ck.config_hash != cfg.hash()? {
        log::warn!("{} was written under a different configuration", path.display());
    }
    Ok(ck)
}

fn save_checkpoint(
    cfg: &RunConfig,
    layout: &Layout,
    stage: &str,
    epochs: usize,
    params: ParamStore,
    optimizer: Option<AdamW>,
) -> Result<()> {
    Checkpoint {
        config_hash: cfg.hash()?,
        epoch: epochs as u64,
        meta: serde_json::json!({ "stage": stage, "seed": cfg.seed }),
        params,
        optimizer,
    }
    .save(&layout.checkpoint(stage))
}

fn begin(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&layout.root)?;
    cfg.save(&layout.config())
}

fn map_items<T, R, F>(sequential: bool, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    if sequential {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    } else {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Loaded dataset with preprocessed epochs and the split bookkeeping.
pub struct Prepared {
    pub dataset: Dataset,
    /// Preprocessed epochs, one set per subject.
    pub epochs: Vec<EpochSet>,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
    /// One image embedding per class, from that class's first test pair.
    pub gallery: Tensor,
    pub gallery_classes: Vec<u32>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig, layout: &Layout) -> Result<Self> {
        let path = layout.dataset();
        require(&path, "synth", "synth")?;
        Self::new(cfg, Dataset::load(&path)?)
    }

    pub fn new(cfg: &RunConfig, dataset: Dataset) -> Result<Self> {
        dataset.validate()?;
        let epochs = dataset
            .subjects
            .iter()
            .map(|s| preprocess(s, &cfg.preprocess))
            .collect::<Result<Vec<_>>>()?;
        for set in &epochs {
            if set.n_channels() != cfg.encoder.n_channels || set.n_samples != cfg.encoder.n_samples {
                return Err(Error::shape(
                    "preprocessed epochs",
                    &[cfg.encoder.n_channels, cfg.encoder.n_samples],
                    &[set.n_channels(), set.n_samples],
                ));
            }
        }
        let train = dataset.pairs_in(Split::Train);
        let test = dataset.pairs_in(Split::Test);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("dataset needs both train and test pairs".into()));
        }
        let mut first: BTreeMap<u32, Pair> = BTreeMap::new();
        for p in &test {
            first.entry(p.class).or_insert(*p);
        }
        let rows: Vec<Vec<f64>> = first.values().map(|p| dataset.image_embed(p).to_vec()).collect();
        Ok(Prepared {
            gallery: Tensor::from_rows(&rows)?,
            gallery_classes: first.keys().copied().collect(),
            dataset,
            epochs,
            train,
            test,
        })
    }

    pub fn epoch(&self, p: &Pair) -> &[f64] {
        self.epochs[p.subject as usize].epoch(p.trial as usize)
    }

    pub fn image(&self, p: &Pair) -> &Image {
        &self.dataset.images[p.image as usize]
    }

    /// Gallery row of each pair's class.
    pub fn targets(&self, pairs: &[Pair]) -> Result<Vec<usize>> {
        pairs
            .iter()
            .map(|p| {
                self.gallery_classes
                    .binary_search(&p.class)
                    .map_err(|_| Error::Config(format!("class {} has no gallery image", p.class)))
            })
            .collect()
    }

    /// Channel indices per region, in [`Region::ALL`] order, skipping
    /// regions without channels.
    pub fn region_channels(&self, subject: usize) -> Vec<(Region, Vec<usize>)> {
        let set = &self.epochs[subject];
        Region::ALL
            .iter()
            .map(|&r| (r, (0..set.n_channels()).filter(|&c| set.region_of(c) == Some(r)).collect::<Vec<_>>()))
            .filter(|(_, chans)| !chans.is_empty())
            .collect()
    }
}

pub fn run_synth(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    begin(cfg, layout)?;
    let ds = synth_dataset(&cfg.synth, cfg.seed)?;
    ds.save(&layout.dataset())?;
    log::info!("synth: {} pairs written to {}", ds.pairs.len(), layout.dataset().display());
    Ok(ds)
}

pub fn run_train_tokenizer(cfg: &RunConfig, layout: &Layout) -> Result<Vec<VqEpoch>> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let images: Vec<Image> = prep.train.iter().map(|p| prep.image(p).clone()).collect();
    let init = tokenizer::init_tokenizer_params(&cfg.tokenizer, cfg.seed)?;
    let (params, curve) = tokenizer::train_vqvae(&images, &cfg.tokenizer, init, cfg.seed)?;
    let mut csv = Csv::new(&["epoch", "recon_mse", "codebook", "commitment", "dead_codes"]);
    for e in &curve {
        csv.push(vec![
            e.epoch.to_string(),
            fmt(e.recon_mse),
            fmt(e.codebook),
            fmt(e.commitment),
            e.dead_codes.to_string(),
        ])?;
    }
    csv.write(&layout.curve("tokenizer"))?;
    save_checkpoint(cfg, layout, "tokenizer", curve.len(), params, None)?;
    Ok(curve)
}

pub fn load_tokenizer(cfg: &RunConfig, layout: &Layout) -> Result<Tokenizer> {
    let ck = load_checkpoint(cfg, layout, "tokenizer", "train-tokenizer")?;
    Tokenizer::new(cfg.tokenizer.clone(), ck.params)
}

pub fn run_train_align(cfg: &RunConfig, layout: &Layout) -> Result<Vec<AlignEpoch>> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let data = AlignmentData {
        train_epochs: prep.train.iter().map(|p| prep.epoch(p)).collect(),
        train_images: prep.train.iter().map(|p| prep.dataset.image_embed(p)).collect(),
        val_epochs: prep.test.iter().map(|p| prep.epoch(p)).collect(),
        val_gallery: prep.gallery.clone(),
        val_targets: prep.targets(&prep.test)?,
    };
    let init = encoder::init_encoder_params(&cfg.encoder, cfg.seed)?;
    let out = alignment::train_alignment(&data, &cfg.encoder, init, &cfg.alignment, cfg.seed)?;
    let mut csv = Csv::new(&["epoch", "train_loss", "val_top1", "val_top5", "tau"]);
    for e in &out.curve {
        csv.push(vec![e.epoch.to_string(), fmt(e.train_loss), fmt(e.val_top1), fmt(e.val_top5), fmt(e.tau)])?;
    }
    csv.write(&layout.curve("align"))?;
    save_checkpoint(cfg, layout, "align", out.curve.len(), out.params, Some(out.optimizer))?;
    Ok(out.curve)
}

pub fn load_encoder(cfg: &RunConfig, layout: &Layout) -> Result<ParamStore> {
    Ok(load_checkpoint(cfg, layout, "align", "train-align")?.params)
}

pub fn run_train_nsp(cfg: &RunConfig, layout: &Layout) -> Result<Vec<NspEpoch>> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let tok = load_tokenizer(cfg, layout)?;
    let enc = load_encoder(cfg, layout)?;
    let samples = map_items(cfg.sequential, &prep.train, |_, p| {
        let cond = encoder::encode(prep.epoch(p), &cfg.encoder, &enc)?;
        NspSample::new(cond, tok.encode_image(prep.image(p))?)
    })?;
    let init = nsp::init_nsp_params(&cfg.nsp, cfg.seed)?;
    let out = nsp::train_nsp(&samples, &cfg.nsp, init, cfg.seed)?;
    let mut csv = Csv::new(&["epoch", "loss", "token_accuracy"]);
    for e in &out.curve {
        csv.push(vec![e.epoch.to_string(), fmt(e.loss), fmt(e.token_accuracy)])?;
    }
    csv.write(&layout.curve("nsp"))?;
    save_checkpoint(cfg, layout, "nsp", out.curve.len(), out.params, Some(out.optimizer))?;
    Ok(out.curve)
}

pub fn load_nsp(cfg: &RunConfig, layout: &Layout) -> Result<ParamStore> {
    Ok(load_checkpoint(cfg, layout, "nsp", "train-nsp")?.params)
}

/// Sampling seed of the `i`-th generated sample.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ ((i as u64 + 1) << 32)
}

fn scale_grid_bytes(h: usize, w: usize, grid: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * grid.len());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &t in grid {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Generates one image per held-out pair and dumps every scale.
pub fn run_generate(cfg: &RunConfig, layout: &Layout) -> Result<usize> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let tok = load_tokenizer(cfg, layout)?;
    let enc = load_encoder(cfg, layout)?;
    let model = load_nsp(cfg, layout)?;
    let dir = layout.generate_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let k_total = cfg.nsp.schedule.len();
    let rows = map_items(cfg.sequential, &prep.test, |i, p| {
        let e = encoder::encode(prep.epoch(p), &cfg.encoder, &enc)?;
        let opts = GenerateOptions {
            guidance: cfg.generate.guidance,
            top_k: cfg.generate.top_k,
            seed: sample_seed(cfg.seed, i),
        };
        let g = nsp::generate(&e, &cfg.nsp, &model, &tok, &opts)?;
        let sd = layout.sample_dir(i);
        std::fs::create_dir_all(&sd)?;
        let mut rows = Vec::with_capacity(k_total + 1);
        let rel = |path: &Path| path.strip_prefix(&dir).expect("inside generate dir").display().to_string();
        for (k, img) in g.intermediates.iter().enumerate() {
            let png = layout.scale_png(i, k + 1);
            img.write_png(&png)?;
            let (h, w) = cfg.nsp.schedule.sizes()[k];
            let tok_path = sd.join(format!("scale_{:02}.tok", k + 1));
            std::fs::write(&tok_path, scale_grid_bytes(h, w, &g.stack.tokens[k]))?;
            rows.push(vec![i.to_string(), p.class.to_string(), (k + 1).to_string(), rel(&png), rel(&tok_path)]);
        }
        g.image.write_png(&layout.final_png(i))?;
        let mut all = Vec::new();
        g.stack.write_tokens(&mut all);
        let all_path = sd.join("tokens.bin");
        std::fs::write(&all_path, all)?;
        rows.push(vec![i.to_string(), p.class.to_string(), "final".into(), rel(&layout.final_png(i)), rel(&all_path)]);
        Ok(rows)
    })?;
    let mut csv = Csv::new(&["sample", "class", "scale", "file", "token_file"]);
    for row in rows.into_iter().flatten() {
        csv.push(row)?;
    }
    csv.write(&layout.manifest())?;
    log::info!("generate: {} samples × {} scales", prep.test.len(), k_total);
    Ok(prep.test.len())
}

/// Final generated images in held-out pair order.
pub fn load_generated(layout: &Layout, n: usize) -> Result<Vec<Image>> {
    require(&layout.manifest(), "generate", "generate")?;
    (0..n).map(|i| Image::read_png(&layout.final_png(i))).collect()
}

/// Built-in feature spaces: the frozen image-embedding map and a pixel
/// projection.
pub fn extractors(cfg: &RunConfig, data_seed: u64) -> Result<Vec<RandomProjection>> {
    let s = &cfg.synth;
    Ok(vec![
        image_embedder(s, data_seed)?,
        RandomProjection::new(
            "pixel_projection",
            s.image_channels,
            s.image_size,
            s.image_size,
            cfg.metrics.feature_dim,
            cfg.metrics.feature_seed,
        )?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    pub pixcorr: f64,
    pub ssim: f64,
    pub two_way: BTreeMap<String, f64>,
    pub top1: f64,
    pub top5: f64,
    pub n_way: usize,
}

/// Scores reconstructions against ground truth and evaluates zero-shot
/// retrieval of held-out signals.
pub fn evaluate(cfg: &RunConfig, prep: &Prepared, enc: &ParamStore, recon: &[Image]) -> Result<(EvalSummary, Csv)> {
    let truth: Vec<Image> = prep.test.iter().map(|p| prep.image(p).clone()).collect();
    let fx = extractors(cfg, prep.dataset.meta.seed)?;
    let refs: Vec<&dyn FeatureExtractor> = fx.iter().map(|f| f as &dyn FeatureExtractor).collect();
    let report = metrics::recon_report(recon, &truth, &refs)?;
    let mut per = Csv::new(&["sample", "class", "pixcorr", "ssim"]);
    for (i, (r, t)) in recon.iter().zip(&truth).enumerate() {
        per.push(vec![
            i.to_string(),
            prep.test[i].class.to_string(),
            fmt(metrics::pixcorr(r, t)?),
            fmt(metrics::ssim(r, t)?),
        ])?;
    }
    let epochs: Vec<&[f64]> = prep.test.iter().map(|p| prep.epoch(p)).collect();
    let queries = Tensor::from_rows(&encoder::encode_all(&epochs, &cfg.encoder, enc)?)?;
    let ret = metrics::retrieval_topk(&queries, &prep.gallery, &prep.targets(&prep.test)?, 5)?;
    let summary = EvalSummary {
        config_hash: cfg.hash_hex()?,
        seed: cfg.seed,
        samples: recon.len(),
        pixcorr: report.pixcorr,
        ssim: report.ssim,
        two_way: report.two_way.into_iter().collect(),
        top1: ret.top1,
        top5: ret.top5,
        n_way: ret.n_way,
    };
    Ok((summary, per))
}

pub fn run_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalSummary> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let enc = load_encoder(cfg, layout)?;
    load_checkpoint(cfg, layout, "nsp", "train-nsp")?;
    let recon = load_generated(layout, prep.test.len())?;
    let (summary, per) = evaluate(cfg, &prep, &enc, &recon)?;
    let dir = layout.eval_dir();
    std::fs::create_dir_all(&dir)?;
    per.write(&dir.join("per_sample.csv"))?;
    let mut header = vec!["seed".to_string(), "samples".into(), "pixcorr".into(), "ssim".into()];
    header.extend(summary.two_way.keys().map(|k| format!("two_way_{k}")));
    let mut recon_csv = Csv::new(&header);
    let mut row = vec![summary.seed.to_string(), summary.samples.to_string(), fmt(summary.pixcorr), fmt(summary.ssim)];
    row.extend(summary.two_way.values().map(|&v| fmt(v)));
    recon_csv.push(row)?;
    recon_csv.write(&dir.join("recon.csv"))?;
    let mut ret = Csv::new(&["seed", "queries", "n_way", "top1", "top5"]);
    ret.push(vec![
        summary.seed.to_string(),
        summary.samples.to_string(),
        summary.n_way.to_string(),
        fmt(summary.top1),
        fmt(summary.top5),
    ])?;
    ret.write(&dir.join("retrieval.csv"))?;
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "eval: pixcorr {:.4} ssim {:.4} top1 {:.4} ({}-way)",
        summary.pixcorr,
        summary.ssim,
        summary.top1,
        summary.n_way
    );
    Ok(summary)
}

/// Region × scale similarity averaged over held-out samples. Scale images
/// are the per-scale dumps of the generate stage.
pub fn run_analyze(cfg: &RunConfig, layout: &Layout) -> Result<RegionScaleMatrix> {
    begin(cfg, layout)?;
    let prep = Prepared::load(cfg, layout)?;
    let enc = load_encoder(cfg, layout)?;
    require(&layout.manifest(), "generate", "generate")?;
    let embedder = image_embedder(&cfg.synth, prep.dataset.meta.seed)?;
    let k_total = cfg.nsp.schedule.len();
    let per_sample = map_items(cfg.sequential, &prep.test, |i, p| {
        let ce = encoder::channel_embeddings(prep.epoch(p), &cfg.encoder, &enc)?;
        let regions: Vec<(String, Vec<f64>)> = prep
            .region_channels(p.subject as usize)
            .into_iter()
            .map(|(r, chans)| Ok((r.name().to_string(), encoder::region_embedding(&ce, &chans)?)))
            .collect::<Result<_>>()?;
        let scales: Vec<Vec<f64>> = (1..=k_total)
            .map(|k| embedder.extract(&Image::read_png(&layout.scale_png(i, k))?))
            .collect::<Result<_>>()?;
        metrics::region_scale_similarity(&regions, &scales)
    })?;
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Metric("no held-out samples to analyze".into()))?;
    let n = per_sample.len() as f64;
    let mean = |pick: fn(&RegionScaleMatrix) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut acc = vec![vec![0.0; k_total]; first.regions.len()];
        for m in &per_sample {
            for (a, row) in acc.iter_mut().zip(pick(m)) {
                a.iter_mut().zip(row).for_each(|(x, v)| *x += v);
            }
        }
        acc.iter_mut().flatten().for_each(|x| *x /= n);
        acc
    };
    let sims = mean(|m| &m.sims);
    let deltas = sims
        .iter()
        .map(|row| {
            let mut prev = 0.0;
            row.iter()
                .map(|&v| {
                    let d = v - prev;
                    prev = v;
                    d
                })
                .collect()
        })
        .collect();
    let matrix = RegionScaleMatrix {
        regions: first.regions.clone(),
        sims,
        deltas,
    };
    std::fs::create_dir_all(layout.analyze_dir())?;
    std::fs::write(layout.region_scale(), matrix.to_csv())?;
    Ok(matrix)
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig, layout: &Layout) -> Result<EvalSummary> {
    run_synth(cfg, layout)?;
    run_train_tokenizer(cfg, layout)?;
    run_train_align(cfg, layout)?;
    run_train_nsp(cfg, layout)?;
    run_generate(cfg, layout)?;
    let summary = run_eval(cfg, layout)?;
    run_analyze(cfg, layout)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_prerequisites_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = RunConfig::desk();
        match run_train_align(&cfg, &layout) {
            Err(Error::MissingStage { stage, command, .. }) => assert_eq!((stage, command), ("synth", "synth")),
            other => panic!("{:?}", other.map(|_| ())),
        }
        run_synth(&cfg, &layout).unwrap();
        match run_train_nsp(&cfg, &layout) {
            Err(e @ Error::MissingStage { .. }) => assert!(e.to_string().contains("eegvis train-tokenizer")),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn self_comparison_scores_one() {
        let cfg = RunConfig::desk();
        let prep = Prepared::new(&cfg, synth_dataset(&cfg.synth, 0).unwrap()).unwrap();
        let enc = encoder::init_encoder_params(&cfg.encoder, 0).unwrap();
        let truth: Vec<Image> = prep.test.iter().map(|p| prep.image(p).clone()).collect();
        let (s, _) = evaluate(&cfg, &prep, &enc, &truth).unwrap();
        assert_eq!(s.pixcorr, 1.0);
        assert!((s.ssim - 1.0).abs() < 1e-12);
        assert!(s.two_way.values().all(|&v| v == 1.0), "{:?}", s.two_way);
        assert_eq!(s.n_way, 16);
    }
}
