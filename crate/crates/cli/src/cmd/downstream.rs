use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lwm_core::downstream::{run_benchmark, BenchConfig, BenchTask, FeatureChoice};

use super::embed::TaskArg;
use super::{read_channels, read_checkpoint};
use crate::config::{merge, read_config, resolve_seed, u64_at};
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    Raw,
    Cls,
    Channel,
    Finetune,
}

#[derive(Debug, Args)]
pub struct DownstreamArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Needed for every feature except `raw`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub features: Vec<FeatureArg>,
    /// Encoder blocks trained by `finetune`.
    #[arg(long = "finetune-k", default_value_t = 3)]
    pub finetune_k: usize,
    #[arg(long = "train-frac", value_delimiter = ',')]
    pub train_frac: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub codebook: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Benchmark on noisy copies of the channels at this SNR.
    #[arg(long = "snr-db")]
    pub snr_db: Option<f64>,
    /// Head training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Noise seed, and the run seed when `--seeds` is not given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON overrides of the benchmark configuration; a `model` section
    /// must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn resolve(args: &DownstreamArgs, file: &serde_json::Map<String, serde_json::Value>) -> CliResult<BenchConfig> {
    let (base, task) = match args.task {
        TaskArg::Los => (BenchConfig::los(), BenchTask::Los),
        TaskArg::Beam => (BenchConfig::beam(), BenchTask::Beam),
    };
    let mut bench_file = file.clone();
    bench_file.remove("model");
    if bench_file
        .get("task")
        .is_some_and(|t| *t != serde_json::to_value(task).unwrap_or_default())
    {
        return Err(CliError::Usage("config task disagrees with --task".into()));
    }
    let mut cfg: BenchConfig = merge(&base, Some(&bench_file.into()), "config")?;
    if !args.features.is_empty() {
        cfg.features = args
            .features
            .iter()
            .map(|f| match f {
                FeatureArg::Raw => FeatureChoice::Raw,
                FeatureArg::Cls => FeatureChoice::Cls,
                FeatureArg::Channel => FeatureChoice::Channel,
                FeatureArg::Finetune => FeatureChoice::Finetune(args.finetune_k),
            })
            .collect();
    }
    if !args.train_frac.is_empty() {
        cfg.train_fractions = args.train_frac.clone();
    }
    if !args.codebook.is_empty() {
        cfg.codebook_sizes = args.codebook.clone();
    }
    cfg.snr_db = args.snr_db.or(cfg.snr_db);
    cfg.head.epochs = args.epochs.unwrap_or(cfg.head.epochs);
    cfg.noise_seed = resolve_seed(args.seed, u64_at(file, &["noise_seed"]))?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    } else if !file.contains_key("seeds") {
        cfg.seeds = vec![cfg.noise_seed];
    }

    if let Some(f) = cfg.train_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("train fraction {f} outside (0, 1]")));
    }
    if task == BenchTask::Beam && cfg.codebook_sizes.iter().any(|&k| k < 2) {
        return Err(CliError::Usage("codebook sizes must be at least 2".into()));
    }
    if cfg.head.epochs == 0 || cfg.head.batch_size == 0 {
        return Err(CliError::Usage("head epochs and batch size must be positive".into()));
    }
    Ok(cfg)
}

pub fn run(args: &DownstreamArgs, argv: &[String]) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let cfg = resolve(args, &file)?;
    let needs_ck = cfg.features.iter().any(|f| *f != FeatureChoice::Raw);
    if needs_ck && args.checkpoint.is_none() {
        return Err(CliError::Usage("embedding features need --checkpoint".into()));
    }
    let names = [
        "results.csv",
        "summary.csv",
        "difference.csv",
        "gain.csv",
        "manifest.json",
    ];
    let paths: Vec<PathBuf> = names.iter().map(|n| args.out.join(n)).collect();
    ensure_writable(&paths, args.force)?;

    let ck = match &args.checkpoint {
        Some(p) if needs_ck => Some(read_checkpoint(p, &file)?),
        _ => None,
    };
    let channels = read_channels(&args.data)?;
    let results = run_benchmark(&channels, ck.as_ref(), &cfg)?;
    let written = results.write_dir(&args.out)?;

    let mut m = RunManifest::new("downstream", argv, cfg.noise_seed, &cfg)?;
    m.input(&args.data)?;
    if let (Some(p), true) = (&args.checkpoint, needs_ck) {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    if cfg.task == BenchTask::Beam {
        m.result("beam_labels", "best beam of the same channel (no paired band)")?;
    }
    m.write(&args.out.join("manifest.json"))?;
    for s in &results.summary {
        let cb = s.codebook_size.map_or(String::new(), |k| format!(" K={k}"));
        println!(
            "{:<10}{cb} frac {:.2}: macro-F1 {:.4} ± {:.4} ({} runs)",
            s.feature_kind, s.train_fraction, s.mean_f1, s.stdev_f1, s.runs
        );
    }
    Ok(())
}
