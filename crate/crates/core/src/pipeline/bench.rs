//! Inference efficiency: parameter counts, autoregressive steps, latency
//! per image at batch size 1, peak resident memory and analytic FLOPs.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::nsp::{self, build_block_causal_mask, GenerateOptions, NspConfig};
use crate::numerics::ParamStore;
use crate::tokenizer::Tokenizer;

use super::config::{BenchConfig, RunConfig};
use super::report::write_json;
use super::stages::{load_encoder, load_nsp, load_tokenizer, Layout, Prepared};

/// Trained components needed to turn one epoch into one image.
pub struct Models<'a> {
    pub encoder_cfg: &'a EncoderConfig,
    pub encoder: &'a ParamStore,
    pub nsp_cfg: &'a NspConfig,
    pub nsp: &'a ParamStore,
    pub tokenizer: &'a Tokenizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEstimate {
    /// `(component, multiply-adds × 2)` summed over all steps and passes.
    pub components: Vec<(String, f64)>,
    pub total: f64,
    /// Forward passes per step: 2 with guidance, else 1.
    pub passes_per_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schedule: Vec<(usize, usize)>,
    pub steps: usize,
    /// Parameters used at inference; the learned temperature is not counted.
    pub parameters: BTreeMap<String, usize>,
    pub parameters_total: usize,
    pub warmups: usize,
    pub runs: usize,
    pub repeats: usize,
    /// Median of the per-repeat medians.
    pub latency_ms: f64,
    pub repeat_medians_ms: Vec<f64>,
    /// `(max − min) / median` over the per-repeat medians.
    pub spread: f64,
    /// `VmHWM` in KiB, where the platform exposes it.
    pub peak_rss_kib: Option<u64>,
    pub flops_estimate: FlopEstimate,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|rest| rest.split_whitespace().next()?.parse().ok())
}

/// Dense-equivalent FLOPs of one generation without key/value caching:
/// each step reruns the transformer on the whole prefix, and masked
/// attention entries are not counted.
pub fn nsp_flops(cfg: &NspConfig, guided: bool) -> FlopEstimate {
    let sched = &cfg.schedule;
    let offsets = sched.offsets();
    let mask = build_block_causal_mask(sched, false);
    let (h, d, v, m) = (cfg.hidden as f64, cfg.code_dim as f64, cfg.vocab as f64, cfg.mlp as f64);
    let passes = if guided { 2 } else { 1 };
    let mut parts: BTreeMap<&str, f64> = BTreeMap::new();
    for k in 0..sched.len() {
        let len = offsets[k + 1];
        let l = len as f64;
        let allowed = mask.prefix(len).iter().filter(|&&a| a).count() as f64;
        let depth = cfg.depth as f64;
        let p = passes as f64;
        *parts.entry("condition").or_default() += p * 2.0 * cfg.embed_dim as f64 * h;
        *parts.entry("scale_input").or_default() += p * 2.0 * (len - sched.tokens_at(0)) as f64 * d * h;
        *parts.entry("attention_projections").or_default() += p * depth * 2.0 * l * h * 4.0 * h;
        *parts.entry("attention_scores").or_default() += p * depth * 2.0 * 2.0 * allowed * h;
        *parts.entry("mlp").or_default() += p * depth * 2.0 * 2.0 * l * h * m;
        *parts.entry("head").or_default() += p * 2.0 * l * h * v;
    }
    let components: Vec<(String, f64)> = parts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    FlopEstimate {
        total: components.iter().map(|(_, v)| v).sum(),
        components,
        passes_per_step: passes,
    }
}

/// Times `epoch → embedding → tokens → image` at batch size 1.
pub fn bench_models(models: &Models<'_>, epoch: &[f64], opts: &GenerateOptions, bench: &BenchConfig) -> Result<BenchReport> {
    if bench.runs == 0 || bench.repeats == 0 {
        return Err(Error::Config("bench needs at least one run and repeat".into()));
    }
    let once = || -> Result<usize> {
        let e = encoder::encode(epoch, models.encoder_cfg, models.encoder)?;
        let g = nsp::generate(&e, models.nsp_cfg, models.nsp, models.tokenizer, opts)?;
        Ok(g.steps)
    };
    let mut steps = 0;
    let mut repeat_medians = Vec::with_capacity(bench.repeats);
    for _ in 0..bench.repeats {
        for _ in 0..bench.warmups {
            steps = once()?;
        }
        let mut times = Vec::with_capacity(bench.runs);
        for _ in 0..bench.runs {
            let t = Instant::now();
            steps = once()?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        repeat_medians.push(median(&times));
    }
    let latency = median(&repeat_medians);
    let lo = repeat_medians.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = repeat_medians.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut parameters = BTreeMap::new();
    parameters.insert("encoder".to_string(), models.encoder.subset("enc.").numel());
    parameters.insert("tokenizer".to_string(), models.tokenizer.params.numel());
    parameters.insert("nsp".to_string(), models.nsp.numel());
    Ok(BenchReport {
        schedule: models.nsp_cfg.schedule.sizes().to_vec(),
        steps,
        parameters_total: parameters.values().sum(),
        parameters,
        warmups: bench.warmups,
        runs: bench.runs,
        repeats: bench.repeats,
        latency_ms: latency,
        repeat_medians_ms: repeat_medians,
        spread: (hi - lo) / latency,
        peak_rss_kib: peak_rss_kib(),
        flops_estimate: nsp_flops(models.nsp_cfg, opts.guidance != 1.0),
    })
}

/// Benchmarks the trained checkpoints on the first held-out epoch and
/// writes `bench.json`.
pub fn run_bench(cfg: &RunConfig, layout: &Layout) -> Result<BenchReport> {
    cfg.validate()?;
    let prep = Prepared::load(cfg, layout)?;
    let tok = load_tokenizer(cfg, layout)?;
    let enc = load_encoder(cfg, layout)?;
    let model = load_nsp(cfg, layout)?;
    let models = Models {
        encoder_cfg: &cfg.encoder,
        encoder: &enc,
        nsp_cfg: &cfg.nsp,
        nsp: &model,
        tokenizer: &tok,
    };
    let opts = GenerateOptions {
        guidance: cfg.generate.guidance,
        top_k: cfg.generate.top_k,
        seed: cfg.seed,
    };
    let report = bench_models(&models, prep.epoch(&prep.test[0]), &opts, &cfg.bench)?;
    write_json(&layout.root.join("bench.json"), &report)?;
    log::info!(
        "bench: {} steps, {} parameters, {:.3} ms/image (spread {:.3})",
        report.steps,
        report.parameters_total,
        report.latency_ms,
        report.spread
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ScaleSchedule;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn deeper_models_count_more_parameters() {
        let cfg = NspConfig::desk(ScaleSchedule::squares(&[1, 2, 4]).unwrap(), 16, 4, 8);
        let deeper = NspConfig { depth: cfg.depth * 2, ..cfg.clone() };
        assert!(nsp::parameter_count(&deeper).unwrap() > nsp::parameter_count(&cfg).unwrap());
    }

    #[test]
    fn flops_double_with_guidance_and_grow_with_scales() {
        let small = NspConfig::desk(ScaleSchedule::squares(&[1, 2]).unwrap(), 16, 4, 8);
        let big = NspConfig::desk(ScaleSchedule::squares(&[1, 2, 4]).unwrap(), 16, 4, 8);
        let a = nsp_flops(&small, false).total;
        assert!((nsp_flops(&small, true).total - 2.0 * a).abs() < 1e-6 * a);
        assert!(nsp_flops(&big, false).total > a);
    }

    #[test]
    fn peak_memory_is_reported_on_linux() {
        if cfg!(target_os = "linux") {
            assert!(peak_rss_kib().unwrap() > 0);
        }
    }
}
