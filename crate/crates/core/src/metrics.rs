//! Retrieval, reconstruction and region analysis metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::Metric("zero-norm vector in cosine (left)".into()));
    }
    if nb == 0.0 {
        return Err(Error::Metric("zero-norm vector in cosine (right)".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `s[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor, what: (&str, &str)) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_matrix", a.shape(), b.shape()));
    }
    let unit = |t: &Tensor, name: &str| -> Result<Vec<Vec<f64>>> {
        (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let n = norm(r);
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::Metric(format!("{name} row {i} has zero norm")));
                }
                Ok(r.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let ua = unit(a, what.0)?;
    let ub = unit(b, what.1)?;
    let mut out = Vec::with_capacity(ua.len() * ub.len());
    for x in &ua {
        for y in &ub {
            out.push(x.iter().zip(y).map(|(p, q)| p * q).sum());
        }
    }
    Tensor::new(vec![ua.len(), ub.len()], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub top1: f64,
    pub top5: f64,
    /// Hit rate at the requested `k`.
    pub topk: f64,
    pub k: usize,
    /// 1-based rank of the true match per query.
    pub ranks: Vec<usize>,
    pub n_way: usize,
}

/// Ranks the gallery by cosine similarity to each query; `targets[i]` is the
/// gallery row matching query `i`. Equal scores rank the lower index first.
pub fn retrieval_topk(queries: &Tensor, gallery: &Tensor, targets: &[usize], k: usize) -> Result<RetrievalResult> {
    let m = gallery.rows();
    if targets.len() != queries.rows() {
        return Err(Error::shape("retrieval_topk", queries.shape(), &[targets.len()]));
    }
    if k == 0 || k > m {
        return Err(Error::Config(format!("retrieval k={k} outside 1..={m}")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(Error::Index {
            what: "gallery",
            index: t,
            len: m,
        });
    }
    let s = cosine_matrix(queries, gallery, ("query", "gallery"))?;
    let ranks: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = s.row(i);
            let own = row[t];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > own || (v == own && j < t))
                .count()
        })
        .collect();
    let rate = |kk: usize| ranks.iter().filter(|&&r| r <= kk).count() as f64 / ranks.len().max(1) as f64;
    Ok(RetrievalResult {
        top1: rate(1),
        top5: rate(5.min(m)),
        topk: rate(k),
        k,
        ranks,
        n_way: m,
    })
}

/// Pearson correlation of two equal-length sequences.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("pearson", &[a.len()], &[b.len()]));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("correlation undefined for a constant image".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pixel-wise correlation over all channels.
pub fn pixcorr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "pixcorr")?;
    pearson(&a.data, &b.data)
}

fn same_shape(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::shape(op, &[a.channels, a.height, a.width], &[b.channels, b.height, b.width]));
    }
    Ok(())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

fn ssim_window(x: &[f64], y: &[f64], weights: &[f64]) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (mut mx, mut my) = (0.0, 0.0);
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        mx += w * a;
        my += w * b;
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for ((a, b), w) in x.iter().zip(y).zip(weights) {
        vx += w * (a - mx) * (a - mx);
        vy += w * (b - my) * (b - my);
        cxy += w * (a - mx) * (b - my);
    }
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM on luminance over every position where an 11×11 Gaussian
/// window fits. Smaller images use one uniform window over the whole image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w) = (a.height, a.width);
    let la = a.luminance();
    let lb = b.luminance();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let u = vec![1.0 / (h * w) as f64; h * w];
        return Ok(ssim_window(&la, &lb, &u));
    }
    let weights = gaussian_window();
    let n = SSIM_WINDOW;
    let mut pa = vec![0.0; n * n];
    let mut pb = vec![0.0; n * n];
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - n {
        for c in 0..=w - n {
            for i in 0..n {
                let src = (r + i) * w + c;
                pa[i * n..(i + 1) * n].copy_from_slice(&la[src..src + n]);
                pb[i * n..(i + 1) * n].copy_from_slice(&lb[src..src + n]);
            }
            total += ssim_window(&pa, &pb, &weights);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Bidirectional forced choice: how often the true partner beats each
/// distractor, ties scored 0.5, averaged over both directions.
pub fn two_way_identification(recon: &Tensor, truth: &Tensor) -> Result<f64> {
    if recon.shape() != truth.shape() {
        return Err(Error::shape("two_way_identification", recon.shape(), truth.shape()));
    }
    let n = recon.rows();
    if n < 2 {
        return Err(Error::Metric("two-way identification needs at least 2 rows".into()));
    }
    let s = cosine_matrix(recon, truth, ("reconstruction", "truth"))?;
    let score = |own: f64, other: f64| {
        if own > other {
            1.0
        } else if own == other {
            0.5
        } else {
            0.0
        }
    };
    let mut forward = 0.0;
    let mut backward = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            forward += score(s.at2(i, i), s.at2(i, j));
            backward += score(s.at2(i, i), s.at2(j, i));
        }
    }
    let pairs = (n * (n - 1)) as f64;
    Ok(0.5 * (forward + backward) / pairs)
}

/// Region × scale cosine similarities with stepwise increments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScaleMatrix {
    pub regions: Vec<String>,
    /// `regions × scales`.
    pub sims: Vec<Vec<f64>>,
    /// `delta[r][k] = sims[r][k] − sims[r][k−1]`, with `sims[r][−1] = 0`.
    pub deltas: Vec<Vec<f64>>,
}

impl RegionScaleMatrix {
    pub fn scales(&self) -> usize {
        self.sims.first().map_or(0, Vec::len)
    }

    /// CSV rows `region,scale,sim,delta,cumulative_delta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,scale,sim,delta,cumulative_delta\n");
        for (r, name) in self.regions.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..self.scales() {
                acc += self.deltas[r][k];
                out.push_str(&format!(
                    "{name},{},{},{},{}\n",
                    k + 1,
                    fmt(self.sims[r][k]),
                    fmt(self.deltas[r][k]),
                    fmt(acc)
                ));
            }
        }
        out
    }
}

/// Shortest round-trip decimal form.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Cosine of each region embedding against each scale's image embedding.
pub fn region_scale_similarity(regions: &[(String, Vec<f64>)], scale_embeds: &[Vec<f64>]) -> Result<RegionScaleMatrix> {
    if scale_embeds.is_empty() {
        return Err(Error::Metric("no scales to compare against".into()));
    }
    let mut names = Vec::with_capacity(regions.len());
    let mut sims = Vec::with_capacity(regions.len());
    let mut deltas = Vec::with_capacity(regions.len());
    for (name, emb) in regions {
        if emb.is_empty() {
            return Err(Error::Metric(format!("region {name} has no channels")));
        }
        let row: Vec<f64> = scale_embeds
            .iter()
            .map(|s| cosine(emb, s).map_err(|e| Error::Metric(format!("region {name}: {e}"))))
            .collect::<Result<_>>()?;
        let mut prev = 0.0;
        let d: Vec<f64> = row
            .iter()
            .map(|&v| {
                let out = v - prev;
                prev = v;
                out
            })
            .collect();
        names.push(name.clone());
        sims.push(row);
        deltas.push(d);
    }
    Ok(RegionScaleMatrix {
        regions: names,
        sims,
        deltas,
    })
}

/// Maps an image to a feature vector for identification metrics.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &str;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Fixed Gaussian projection of centered pixels.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    name: String,
    dims: (usize, usize, usize),
    weights: Tensor,
}

impl RandomProjection {
    pub fn new(name: &str, channels: usize, height: usize, width: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let n = channels * height * width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::randn(&[n, out_dim], 1.0 / (n as f64).sqrt(), &mut rng);
        Ok(RandomProjection {
            name: name.to_string(),
            dims: (channels, height, width),
            weights,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        if (image.channels, image.height, image.width) != self.dims {
            return Err(Error::shape(
                "feature extractor",
                &[self.dims.0, self.dims.1, self.dims.2],
                &[image.channels, image.height, image.width],
            ));
        }
        let centered: Vec<f64> = image.data.iter().map(|v| v - 0.5).collect();
        let (n, m) = (self.weights.rows(), self.weights.cols());
        Ok(crate::numerics::ops::matmul(&centered, self.weights.data(), 1, n, m))
    }
}

pub fn extract_all(fx: &dyn FeatureExtractor, images: &[Image]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = images.iter().map(|i| fx.extract(i)).collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub pixcorr: f64,
    pub ssim: f64,
    /// `(extractor name, rate)`.
    pub two_way: Vec<(String, f64)>,
}

/// Mean PixCorr and SSIM over aligned pairs plus two-way identification
/// per feature space.
pub fn recon_report(recon: &[Image], truth: &[Image], extractors: &[&dyn FeatureExtractor]) -> Result<ReconReport> {
    if recon.len() != truth.len() || recon.is_empty() {
        return Err(Error::shape("recon_report", &[recon.len()], &[truth.len()]));
    }
    let n = recon.len() as f64;
    let mut pc = 0.0;
    let mut ss = 0.0;
    for (r, t) in recon.iter().zip(truth) {
        pc += pixcorr(r, t)?;
        ss += ssim(r, t)?;
    }
    let mut two_way = Vec::with_capacity(extractors.len());
    for fx in extractors {
        let a = extract_all(*fx, recon)?;
        let b = extract_all(*fx, truth)?;
        two_way.push((fx.name().to_string(), two_way_identification(&a, &b)?));
    }
    Ok(ReconReport {
        pixcorr: pc / n,
        ssim: ss / n,
        two_way,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
