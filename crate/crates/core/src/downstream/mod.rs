//! Embedding extraction, task heads, fine-tuning and the raw-vs-embedding
//! benchmark.

mod bench;
mod fit;
mod heads;
mod metrics;

pub use bench::{run_benchmark, BenchConfig, BenchResults, BenchRow, BenchTask, FeatureChoice, GridCell, SummaryRow};
pub use fit::{finetune_last_k, train_head, FinetuneReport, HeadReport, SplitSpec};
pub use heads::{cnn_param_count, cnn_width_for_budget, Head, HeadArch, HeadConfig};
pub use metrics::{macro_f1, stratified_split};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{beam_labels, ChannelMatrix};
use crate::exec;
use crate::pretrain::Checkpoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Raw,
    Cls,
    ChannelEmb,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Raw => "raw",
            FeatureKind::Cls => "cls",
            FeatureKind::ChannelEmb => "channel",
        }
    }
}

/// Downstream task. Beam labels are best-beam indices of the same channel
/// for a codebook of the given size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Los,
    Beam(usize),
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Los => "los",
            Task::Beam(_) => "beam",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Los => 2,
            Task::Beam(k) => k,
        }
    }
}

/// Class labels for `task`. LoS labels must be present on every channel.
pub fn task_labels(channels: &[ChannelMatrix], task: Task) -> Result<Vec<usize>> {
    match task {
        Task::Los => channels
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.los
                    .map(usize::from)
                    .ok_or_else(|| Error::Contract(format!("channel {i} has no LoS label")))
            })
            .collect(),
        Task::Beam(k) => beam_labels(channels, k),
    }
}

/// `num_samples × dim` features with labels. `seq_shape = (T, C)` is how a
/// convolutional head reads one row: `T` positions of `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub dim: usize,
    pub seq_shape: (usize, usize),
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn new(
        kind: FeatureKind,
        seq_shape: (usize, usize),
        data: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim = seq_shape.0 * seq_shape.1;
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of dim {dim}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!("label {y} outside {num_classes} classes")));
        }
        Ok(Self {
            kind,
            dim,
            seq_shape,
            data,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn with_labels(&self, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(self.kind, self.seq_shape, self.data.clone(), labels, num_classes)
    }
}

/// Unlabeled feature rows for each channel. Embedding kinds need a
/// checkpoint whose patch layout fits the channels.
pub fn feature_rows(
    channels: &[ChannelMatrix],
    checkpoint: Option<&Checkpoint>,
    kind: FeatureKind,
) -> Result<(Vec<f64>, (usize, usize))> {
    let Some(first) = channels.first() else {
        return Err(Error::Contract("no channels to extract features from".into()));
    };
    let (a, s) = (first.antennas(), first.subcarriers());
    if channels.iter().any(|c| c.antennas() != a || c.subcarriers() != s) {
        return Err(Error::Shape("channels differ in dimensions".into()));
    }
    if kind == FeatureKind::Raw {
        let data = channels.iter().flat_map(ChannelMatrix::flatten).collect();
        return Ok((data, (2 * a, s)));
    }
    let ck = checkpoint.ok_or_else(|| Error::Contract(format!("{} features need a checkpoint", kind.name())))?;
    let cfg = ck.model;
    if 2 * a * s != cfg.num_patches * cfg.patch_len {
        return Err(Error::Shape(format!(
            "{a}x{s} channels do not fit {} patches of length {}",
            cfg.num_patches, cfg.patch_len
        )));
    }
    let rows = exec::map_slice(channels, |ch| -> Result<Vec<f64>> {
        let e = ck.embed(ch)?;
        Ok(match kind {
            FeatureKind::Cls => e.cls().to_vec(),
            _ => e.channel().to_vec(),
        })
    });
    let mut data = Vec::new();
    for r in rows {
        data.extend(r?);
    }
    let shape = match kind {
        FeatureKind::Cls => (cfg.d_model, 1),
        _ => (cfg.num_patches, cfg.d_model),
    };
    Ok((data, shape))
}

pub fn extract_features(
    channels: &[ChannelMatrix],
    checkpoint: Option<&Checkpoint>,
    kind: FeatureKind,
    task: Task,
) -> Result<FeatureSet> {
    let labels = task_labels(channels, task)?;
    let (data, shape) = feature_rows(channels, checkpoint, kind)?;
    FeatureSet::new(kind, shape, data, labels, task.num_classes())
}

/// CSV with a header `f0,…,f{dim-1},label`, one row per sample.
pub fn export_embeddings(features: &FeatureSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_embeddings(features, &mut buf)?;
    crate::channel::write_atomic(path, &buf)?;
    Ok(())
}

pub fn write_embeddings<W: Write>(features: &FeatureSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..features.dim).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..features.len() {
        let mut rec: Vec<String> = features.row(i).iter().map(|v| format!("{}", *v as f32)).collect();
        rec.push(features.labels[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, ScenarioConfig};
    use crate::model::{forward_embed, LwmParameters, ModelConfig};
    use crate::pretrain::TrainConfig;
    use crate::seed;

    pub(crate) fn micro_checkpoint() -> Checkpoint {
        let model = ModelConfig::micro();
        Checkpoint {
            model,
            train: TrainConfig::for_model(&model),
            norm_scale: 1.0,
            epoch: 0,
            params: LwmParameters::init(&model, &mut seed::rng(4)).unwrap(),
            optimizer: None,
            history: Vec::new(),
        }
    }

    #[test]
    fn feature_dims_follow_kind() {
        let ck = micro_checkpoint();
        let chs = generate_dataset(&ScenarioConfig::default(), 4, 4, 3);
        let raw = extract_features(&chs, None, FeatureKind::Raw, Task::Los).unwrap();
        let cls = extract_features(&chs, Some(&ck), FeatureKind::Cls, Task::Los).unwrap();
        let emb = extract_features(&chs, Some(&ck), FeatureKind::ChannelEmb, Task::Beam(8)).unwrap();
        assert_eq!((raw.dim, cls.dim, emb.dim), (32, 8, 64));
        let direct = forward_embed(&chs[1], &ck.params).unwrap();
        assert_eq!(emb.row(1), direct.channel());
        assert_eq!(cls.row(2), forward_embed(&chs[2], &ck.params).unwrap().cls());
    }

    #[test]
    fn zero_channel_raw_features_are_zero() {
        let mut ch = ChannelMatrix::zeros(4, 4);
        ch.los = Some(false);
        let f = extract_features(&[ch], None, FeatureKind::Raw, Task::Los).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let ck = micro_checkpoint();
        let chs = generate_dataset(&ScenarioConfig::default(), 4, 8, 2);
        assert!(extract_features(&chs, Some(&ck), FeatureKind::Cls, Task::Los).is_err());
        let mut unlabeled = chs.clone();
        unlabeled[0].los = None;
        assert!(extract_features(&unlabeled, None, FeatureKind::Raw, Task::Los).is_err());
    }

    #[test]
    fn csv_export_round_trips() {
        let ck = micro_checkpoint();
        let chs = generate_dataset(&ScenarioConfig::default(), 4, 4, 5);
        let f = extract_features(&chs, Some(&ck), FeatureKind::Cls, Task::Los).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&f, &mut buf).unwrap();
        let mut r = csv::Reader::from_reader(buf.as_slice());
        assert_eq!(r.headers().unwrap().len(), f.dim + 1);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 5);
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in f.row(i).iter().enumerate() {
                let parsed: f64 = row[j].parse().unwrap();
                assert!((parsed - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
            assert_eq!(row[f.dim].parse::<usize>().unwrap(), f.labels[i]);
        }
    }
}
