//! Multi-seed runs with mean and sample standard deviation per metric.

use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::metrics::mean_sd;

use super::config::RunConfig;
use super::report::{fmt, Csv};
use super::stages::{run_all, EvalSummary, Layout};

/// Metric rows `(name, value per seed)` of a set of summaries.
pub fn metric_table(summaries: &[EvalSummary]) -> Vec<(String, Vec<f64>)> {
    let mut rows = vec![
        ("top1".to_string(), summaries.iter().map(|s| s.top1).collect()),
        ("top5".to_string(), summaries.iter().map(|s| s.top5).collect()),
        ("pixcorr".to_string(), summaries.iter().map(|s| s.pixcorr).collect()),
        ("ssim".to_string(), summaries.iter().map(|s| s.ssim).collect::<Vec<_>>()),
    ];
    if let Some(first) = summaries.first() {
        for name in first.two_way.keys() {
            rows.push((
                format!("two_way_{name}"),
                summaries.iter().map(|s| s.two_way.get(name).copied().unwrap_or(f64::NAN)).collect(),
            ));
        }
    }
    rows
}

/// `metric,mean,sd,seed_<s>...`
pub fn sweep_csv(seeds: &[u64], summaries: &[EvalSummary]) -> Result<Csv> {
    let mut header = vec!["metric".to_string(), "mean".into(), "sd".into()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    let mut csv = Csv::new(&header);
    for (name, values) in metric_table(summaries) {
        let (m, sd) = mean_sd(&values);
        let mut row = vec![name, fmt(m), fmt(sd)];
        row.extend(values.iter().map(|&v| fmt(v)));
        csv.push(row)?;
    }
    Ok(csv)
}

/// Runs every stage once per seed under `root/seed_<s>` and writes
/// `root/sweep.csv`. Seeds run in parallel unless the config is sequential.
pub fn run_sweep(cfg: &RunConfig, root: &Path, seeds: &[u64]) -> Result<Vec<EvalSummary>> {
    std::fs::create_dir_all(root)?;
    let one = |&seed: &u64| {
        let c = RunConfig { seed, ..cfg.clone() };
        run_all(&c, &Layout::new(root.join(format!("seed_{seed}"))))
    };
    let summaries: Vec<EvalSummary> = if cfg.sequential {
        seeds.iter().map(one).collect::<Result<_>>()?
    } else {
        seeds.par_iter().map(one).collect::<Result<_>>()?
    };
    sweep_csv(seeds, &summaries)?.write(&root.join("sweep.csv"))?;
    Ok(summaries)
}
