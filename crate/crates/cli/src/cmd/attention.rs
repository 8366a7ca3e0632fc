use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use lwm_core::channel::apply_scale;
use lwm_core::model::capture_attention;

use super::{read_channels, read_checkpoint};
use crate::config::read_config;
use crate::error::{CliError, CliResult};
use crate::manifest::{ensure_writable, write_atomic, RunManifest};

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "channel-index", default_value_t = 0)]
    pub channel_index: usize,
    /// JSON whose `model` section the checkpoint must match.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for `layerLL_headHH.csv` maps and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn map_file_name(layer: usize, head: usize) -> String {
    format!("layer{layer:02}_head{head:02}.csv")
}

pub fn run(args: &AttentionArgs, argv: &[String]) -> CliResult<()> {
    let file = read_config(args.config.as_deref())?;
    let ck = read_checkpoint(&args.checkpoint, &file)?;
    let channels = read_channels(&args.data)?;
    let Some(ch) = channels.get(args.channel_index) else {
        return Err(CliError::Usage(format!(
            "--channel-index {} out of range for {} channels",
            args.channel_index,
            channels.len()
        )));
    };
    let manifest_path = args.out.join("manifest.json");
    let mut paths: Vec<PathBuf> = (0..ck.model.layers)
        .flat_map(|l| (0..ck.model.heads).map(move |h| (l, h)))
        .map(|(l, h)| args.out.join(map_file_name(l, h)))
        .collect();
    paths.push(manifest_path.clone());
    ensure_writable(&paths, args.force)?;

    let scaled = apply_scale(std::slice::from_ref(ch), ck.norm_scale);
    let (_, att) = capture_attention(&scaled[0], &ck.params)?;
    let mut m = RunManifest::new(
        "attention",
        argv,
        ck.train.master_seed,
        &serde_json::json!({ "channel_index": args.channel_index }),
    )?;
    m.input(&args.checkpoint)?;
    m.input(&args.data)?;
    for (layer, head, map) in att.maps() {
        let mut text = String::new();
        for row in map.chunks(att.size) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(text, "{}", cells.join(","));
        }
        let path = args.out.join(map_file_name(layer, head));
        write_atomic(&path, text.as_bytes())?;
        m.output(&path)?;
    }
    m.result("maps", att.layers * att.heads)?;
    m.result("size", att.size)?;
    m.write(&manifest_path)?;
    println!(
        "wrote {} attention maps of {}x{} to {}",
        att.layers * att.heads,
        att.size,
        att.size,
        args.out.display()
    );
    Ok(())
}
