use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eegvis_core::pipeline::{bench, stages, sweep, RunConfig};
use eegvis_core::tokenizer::ScaleSchedule;
use eegvis_core::Result;

/// Signal-to-image decoding pipeline on synthetic data.
///
/// Settings resolve as built-in defaults, then the `--config` file, then
/// command-line flags.
#[derive(Parser)]
#[command(name = "eegvis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    /// Disable all intra-run parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    /// Square scale sides, e.g. `1,2,4`; sets tokenizer and transformer.
    #[arg(long, global = true, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset.
    Synth,
    TrainTokenizer,
    TrainAlign,
    TrainNsp,
    /// Generate images for the held-out pairs with per-scale dumps.
    Generate,
    /// Reconstruction and retrieval metrics.
    Eval,
    /// Region × scale similarity table.
    Analyze,
    /// Latency, parameter and step accounting.
    Bench,
    /// Every stage for each seed, with mean and sd per metric.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Every stage in order.
    RunAll,
    /// Print the resolved configuration as JSON.
    Config,
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.sequential {
        cfg.sequential = true;
    }
    if let Some(sides) = &c.schedule {
        cfg = cfg.with_schedule(ScaleSchedule::squares(sides)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    if cfg.sequential {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    }
    let layout = stages::Layout::new(&cli.common.out);
    match cli.command {
        Command::Synth => drop(stages::run_synth(&cfg, &layout)?),
        Command::TrainTokenizer => {
            let curve = stages::run_train_tokenizer(&cfg, &layout)?;
            if let Some(last) = curve.last() {
                println!("tokenizer: recon mse {:.6}, dead codes {}", last.recon_mse, last.dead_codes);
            }
        }
        Command::TrainAlign => {
            let curve = stages::run_train_align(&cfg, &layout)?;
            if let Some(last) = curve.last() {
                println!("align: val top-1 {:.4}, top-5 {:.4}", last.val_top1, last.val_top5);
            }
        }
        Command::TrainNsp => {
            let curve = stages::run_train_nsp(&cfg, &layout)?;
            if let Some(last) = curve.last() {
                println!("nsp: loss {:.6}, token accuracy {:.4}", last.loss, last.token_accuracy);
            }
        }
        Command::Generate => {
            let n = stages::run_generate(&cfg, &layout)?;
            println!("generated {n} samples into {}", layout.generate_dir().display());
        }
        Command::Eval | Command::RunAll => {
            let s = if matches!(cli.command, Command::RunAll) {
                stages::run_all(&cfg, &layout)?
            } else {
                stages::run_eval(&cfg, &layout)?
            };
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Analyze => print!("{}", stages::run_analyze(&cfg, &layout)?.to_csv()),
        Command::Bench => println!("{}", serde_json::to_string_pretty(&bench::run_bench(&cfg, &layout)?)?),
        Command::Sweep { seeds } => {
            let summaries = sweep::run_sweep(&cfg, &layout.root, &seeds)?;
            print!("{}", sweep::sweep_csv(&seeds, &summaries)?.render());
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
