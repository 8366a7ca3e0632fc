use std::path::PathBuf;

use clap::Args;
use lwm_core::channel::{generate_dataset, label_beams, write_dataset, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::config::{merge, read_config, resolve_seed, u64_at};
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, sidecar, RunManifest};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of channels.
    #[arg(long)]
    pub count: Option<usize>,
    /// Base-station antennas.
    #[arg(long)]
    pub antennas: Option<usize>,
    #[arg(long)]
    pub subcarriers: Option<usize>,
    /// Propagation paths per channel.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long = "los-prob")]
    pub los_prob: Option<f64>,
    /// Also store best-beam labels for a DFT codebook of this size.
    #[arg(long)]
    pub codebook: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON with any of `count`, `antennas`, `subcarriers`, `codebook`,
    /// `scenario`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub count: usize,
    pub antennas: usize,
    pub subcarriers: usize,
    pub codebook: Option<usize>,
    pub scenario: ScenarioConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            antennas: 32,
            subcarriers: 32,
            codebook: None,
            scenario: ScenarioConfig::default(),
        }
    }
}

pub fn resolve(args: &GenDataArgs) -> CliResult<GenDataConfig> {
    let file = read_config(args.config.as_deref())?;
    let mut cfg: GenDataConfig = merge(&GenDataConfig::default(), Some(&file.clone().into()), "config")?;
    cfg.count = args.count.unwrap_or(cfg.count);
    cfg.antennas = args.antennas.unwrap_or(cfg.antennas);
    cfg.subcarriers = args.subcarriers.unwrap_or(cfg.subcarriers);
    cfg.codebook = args.codebook.or(cfg.codebook);
    cfg.scenario.num_paths = args.paths.unwrap_or(cfg.scenario.num_paths);
    cfg.scenario.los_probability = args.los_prob.unwrap_or(cfg.scenario.los_probability);
    cfg.scenario.seed = resolve_seed(args.seed, u64_at(&file, &["scenario", "seed"]))?;
    if cfg.antennas == 0
        || cfg.subcarriers == 0
        || cfg.antennas > u16::MAX as usize
        || cfg.subcarriers > u16::MAX as usize
    {
        return Err(CliError::Usage(format!(
            "antennas and subcarriers must be in 1..=65535, got {}x{}",
            cfg.antennas, cfg.subcarriers
        )));
    }
    if cfg.codebook == Some(0) {
        return Err(CliError::Usage("--codebook must be at least 1".into()));
    }
    cfg.scenario.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn run(args: &GenDataArgs, argv: &[String]) -> CliResult<()> {
    let cfg = resolve(args)?;
    let manifest_path = sidecar(&args.out, "manifest.json");
    ensure_writable(&[args.out.clone(), manifest_path.clone()], args.force)?;

    let mut channels = generate_dataset(&cfg.scenario, cfg.antennas, cfg.subcarriers, cfg.count);
    if let Some(k) = cfg.codebook {
        label_beams(&mut channels, k)?;
    }
    write_dataset(&args.out, &channels)?;

    let mut m = RunManifest::new("gen-data", argv, cfg.scenario.seed, &cfg)?;
    m.output(&args.out)?;
    let los = channels.iter().filter(|c| c.los == Some(true)).count();
    m.result("los_count", los)?;
    if cfg.codebook.is_some() {
        m.result("beam_labels", "best beam of the same channel (no paired band)")?;
    }
    m.write(&manifest_path)?;
    println!(
        "wrote {} channels of {}x{} ({los} LoS) to {}",
        channels.len(),
        cfg.antennas,
        cfg.subcarriers,
        args.out.display()
    );
    Ok(())
}
