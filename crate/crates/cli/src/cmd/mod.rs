pub mod attention;
pub mod downstream;
pub mod embed;
pub mod gen_data;
pub mod gradcheck;
pub mod pretrain;

use std::path::Path;

use lwm_core::channel::{read_dataset, ChannelMatrix};
use lwm_core::pretrain::{load_checkpoint, Checkpoint, CheckpointError};
use serde_json::{Map, Value};

use crate::config::merge;
use crate::error::{CliError, CliResult};

pub(crate) fn read_channels(path: &Path) -> CliResult<Vec<ChannelMatrix>> {
    if !path.exists() {
        return Err(CliError::Data(format!("data file {} not found", path.display())));
    }
    Ok(read_dataset(path)?)
}

/// Loads a checkpoint; a `"model"` section in `cfg` names fields it must
/// have.
pub(crate) fn read_checkpoint(path: &Path, cfg: &Map<String, Value>) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ck = load_checkpoint(path)?;
    let expected = merge(&ck.model, cfg.get("model"), "model")?;
    if expected != ck.model {
        return Err(CheckpointError::ConfigConflict {
            expected,
            found: ck.model,
        }
        .into());
    }
    Ok(ck)
}
