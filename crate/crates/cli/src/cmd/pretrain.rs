use std::path::PathBuf;

use clap::Args;
use log::info;
use lwm_core::channel::ChannelMatrix;
use lwm_core::model::ModelConfig;
use lwm_core::pretrain::{pretrain, pretrain_baseline, save_checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::read_channels;
use crate::config::{check_sections, merge, read_config, resolve_seed, u64_at};
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, sidecar, write_atomic, RunManifest};

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// `LWMC` dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write; the epoch log and manifest go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Model defaults are the full-scale encoder; `patch_len` follows from the
/// channel size unless the config pins it.
pub fn resolve(
    args: &PretrainArgs,
    file: &Map<String, Value>,
    channels: &[ChannelMatrix],
) -> CliResult<PretrainConfig> {
    check_sections(file, &["model", "train"])?;
    let model_over = file.get("model");
    let mut model: ModelConfig = merge(&ModelConfig::full(), model_over, "model")?;
    let pinned = model_over.and_then(|m| m.get("patch_len")).is_some();
    if !pinned {
        let c = &channels[0];
        let values = 2 * c.antennas() * c.subcarriers();
        if model.num_patches == 0 || !values.is_multiple_of(model.num_patches) {
            return Err(CliError::Data(format!(
                "{}x{} channels cannot be cut into {} equal patches",
                c.antennas(),
                c.subcarriers(),
                model.num_patches
            )));
        }
        model.patch_len = values / model.num_patches;
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut train: TrainConfig = merge(&TrainConfig::for_model(&model), file.get("train"), "train")?;
    train.epochs = args.epochs.unwrap_or(train.epochs);
    train.batch_size = args.batch_size.unwrap_or(train.batch_size);
    train.lr0 = args.lr.unwrap_or(train.lr0);
    train.master_seed = resolve_seed(args.seed, u64_at(file, &["train", "master_seed"]))?;
    train.validate(&model).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(PretrainConfig { model, train })
}

pub fn run(args: &PretrainArgs, argv: &[String]) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let log_path = sidecar(&args.out, "log.csv");
    let manifest_path = sidecar(&args.out, "manifest.json");
    ensure_writable(&[args.out.clone(), log_path.clone(), manifest_path.clone()], args.force)?;
    let channels = read_channels(&args.data)?;
    if channels.is_empty() {
        return Err(CliError::Data(format!("{} holds no channels", args.data.display())));
    }
    let cfg = resolve(args, &file, &channels)?;
    info!(
        "pre-training {} parameters on {} channels for {} epochs",
        cfg.model.param_count(),
        channels.len(),
        cfg.train.epochs
    );

    let baseline = pretrain_baseline(&channels, &cfg.model, &cfg.train)?;
    let ck = pretrain(&channels, &cfg.model, &cfg.train, |_| {})?;
    save_checkpoint(&args.out, &ck)?;
    let mut log = csv::Writer::from_writer(Vec::new());
    for r in &ck.history {
        log.serialize(r)?;
    }
    let bytes = log.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    write_atomic(&log_path, &bytes)?;

    let mut m = RunManifest::new("pretrain", argv, cfg.train.master_seed, &cfg)?;
    m.input(&args.data)?;
    m.output(&args.out)?;
    m.output(&log_path)?;
    m.result("param_count", cfg.model.param_count())?;
    m.result("norm_scale", ck.norm_scale)?;
    m.result("baseline_val_nmse", finite(baseline))?;
    if let Some(last) = ck.history.last() {
        m.result("final_train_nmse", finite(last.train_nmse))?;
        m.result("final_val_nmse", finite(last.val_nmse))?;
    }
    m.write(&manifest_path)?;
    println!("baseline val nmse {baseline:.5}; wrote {}", args.out.display());
    Ok(())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
