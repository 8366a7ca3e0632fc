use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lwm_core::downstream::{export_embeddings, extract_features, FeatureKind, Task};
use serde::Serialize;

use super::{read_channels, read_checkpoint};
use crate::config::read_config;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, sidecar, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    Cls,
    Channel,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskArg {
    Los,
    Beam,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "cls")]
    pub kind: EmbedKind,
    /// Which labels go in the last column.
    #[arg(long, value_enum, default_value = "los")]
    pub task: TaskArg,
    /// Codebook size for beam labels.
    #[arg(long, default_value_t = 64)]
    pub codebook: usize,
    /// JSON whose `model` section the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV to write; `both` writes `<stem>.cls.csv` and `<stem>.channel.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct EmbedConfig {
    kind: EmbedKind,
    task: TaskArg,
    codebook: Option<usize>,
}

/// Output file per feature kind.
pub fn outputs(args: &EmbedArgs) -> Vec<(FeatureKind, PathBuf)> {
    match args.kind {
        EmbedKind::Cls => vec![(FeatureKind::Cls, args.out.clone())],
        EmbedKind::Channel => vec![(FeatureKind::ChannelEmb, args.out.clone())],
        EmbedKind::Both => vec![
            (FeatureKind::Cls, sidecar(&args.out, "cls.csv")),
            (FeatureKind::ChannelEmb, sidecar(&args.out, "channel.csv")),
        ],
    }
}

pub fn run(args: &EmbedArgs, argv: &[String]) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let task = match args.task {
        TaskArg::Los => Task::Los,
        TaskArg::Beam if args.codebook == 0 => return Err(CliError::Usage("--codebook must be at least 1".into())),
        TaskArg::Beam => Task::Beam(args.codebook),
    };
    let outs = outputs(args);
    let manifest_path = sidecar(&args.out, "manifest.json");
    let mut paths: Vec<PathBuf> = outs.iter().map(|(_, p)| p.clone()).collect();
    paths.push(manifest_path.clone());
    ensure_writable(&paths, args.force)?;

    let ck = read_checkpoint(&args.checkpoint, &file)?;
    let channels = read_channels(&args.data)?;
    let cfg = EmbedConfig {
        kind: args.kind,
        task: args.task,
        codebook: matches!(task, Task::Beam(_)).then_some(args.codebook),
    };
    let mut m = RunManifest::new("embed", argv, ck.train.master_seed, &cfg)?;
    m.input(&args.checkpoint)?;
    m.input(&args.data)?;
    for (kind, path) in &outs {
        let f = extract_features(&channels, Some(&ck), *kind, task)?;
        export_embeddings(&f, path)?;
        m.output(path)?;
        println!(
            "wrote {} x {} {} embeddings to {}",
            f.len(),
            f.dim,
            kind.name(),
            path.display()
        );
    }
    m.result("model", ck.model)?;
    m.write(&manifest_path)
}
