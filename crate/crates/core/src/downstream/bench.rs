use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    csv_err, feature_rows, finetune_last_k, task_labels, train_head, FeatureKind, FeatureSet, HeadConfig, SplitSpec,
    Task,
};
use crate::channel::{add_noise, ChannelMatrix};
use crate::exec;
use crate::pretrain::Checkpoint;
use crate::seed::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChoice {
    Raw,
    Cls,
    Channel,
    /// CLS head with the last `k` encoder blocks trained as well.
    Finetune(usize),
}

impl FeatureChoice {
    pub fn name(self) -> String {
        match self {
            FeatureChoice::Raw => "raw".into(),
            FeatureChoice::Cls => "cls".into(),
            FeatureChoice::Channel => "channel".into(),
            FeatureChoice::Finetune(k) => format!("finetune{k}"),
        }
    }

    fn fixed_kind(self) -> Option<FeatureKind> {
        match self {
            FeatureChoice::Raw => Some(FeatureKind::Raw),
            FeatureChoice::Cls => Some(FeatureKind::Cls),
            FeatureChoice::Channel => Some(FeatureKind::ChannelEmb),
            FeatureChoice::Finetune(_) => None,
        }
    }
}

/// Which task to benchmark; beam runs once per codebook size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTask {
    Los,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: BenchTask,
    pub features: Vec<FeatureChoice>,
    pub train_fractions: Vec<f64>,
    /// Ignored for the LoS task.
    pub codebook_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub head: HeadConfig,
    pub split: SplitSpec,
    /// Features come from channels with complex Gaussian noise at this SNR;
    /// labels always come from the clean channels.
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
}

impl BenchConfig {
    /// MLP head and 80/20 split.
    pub fn los() -> Self {
        Self {
            task: BenchTask::Los,
            features: vec![FeatureChoice::Raw, FeatureChoice::Cls],
            train_fractions: vec![1.0],
            codebook_sizes: Vec::new(),
            seeds: vec![0],
            head: HeadConfig::mlp(),
            split: SplitSpec::los(),
            snr_db: None,
            noise_seed: 0,
        }
    }

    /// Residual CNN head near 500K parameters and 70/20/10 split.
    pub fn beam() -> Self {
        Self {
            task: BenchTask::Beam,
            codebook_sizes: vec![16, 32, 64, 128, 256],
            head: HeadConfig::cnn(500_000),
            split: SplitSpec::beam(),
            ..Self::los()
        }
    }

    fn tasks(&self) -> Result<Vec<Task>> {
        match self.task {
            BenchTask::Los => Ok(vec![Task::Los]),
            BenchTask::Beam if self.codebook_sizes.is_empty() => Err(Error::Contract(
                "beam benchmark needs at least one codebook size".into(),
            )),
            BenchTask::Beam => Ok(self.codebook_sizes.iter().map(|&k| Task::Beam(k)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub feature_kind: String,
    pub codebook_size: Option<usize>,
    pub train_fraction: f64,
    pub seed: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub feature_kind: String,
    pub codebook_size: Option<usize>,
    pub train_fraction: f64,
    pub runs: usize,
    pub mean_f1: f64,
    pub stdev_f1: f64,
}

/// Embedding-vs-raw comparison of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub task: String,
    pub feature_kind: String,
    pub codebook_size: Option<usize>,
    pub train_fraction: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResults {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<SummaryRow>,
    /// Mean embedding F1 minus mean raw F1.
    pub difference: Vec<GridCell>,
    /// `100 · difference / raw`.
    pub gain_percent: Vec<GridCell>,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl BenchResults {
    pub fn rows_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary)
    }

    pub fn difference_csv(&self) -> Result<String> {
        to_csv(&self.difference)
    }

    pub fn gain_csv(&self) -> Result<String> {
        to_csv(&self.gain_percent)
    }

    /// Writes `results.csv`, `summary.csv`, `difference.csv` and `gain.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            ("results.csv", self.rows_csv()?),
            ("summary.csv", self.summary_csv()?),
            ("difference.csv", self.difference_csv()?),
            ("gain.csv", self.gain_csv()?),
        ];
        let mut out = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            crate::channel::write_atomic(&p, body.as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }

    /// Mean F1 of one summary cell.
    pub fn mean(&self, feature: &str, codebook: Option<usize>, fraction: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.feature_kind == feature && s.codebook_size == codebook && s.train_fraction == fraction)
            .map(|s| s.mean_f1)
    }
}

struct Cell {
    choice: FeatureChoice,
    task: Task,
    fraction: f64,
    seed: u64,
}

/// Runs every cell of features × codebook sizes × train fractions × seeds.
/// Cells are independent and evaluated with [`exec::map_indexed`]; output
/// order follows the grid order.
pub fn run_benchmark(
    channels: &[ChannelMatrix],
    checkpoint: Option<&Checkpoint>,
    cfg: &BenchConfig,
) -> Result<BenchResults> {
    if cfg.features.is_empty() || cfg.train_fractions.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Contract("benchmark grid is empty".into()));
    }
    let tasks = cfg.tasks()?;
    let labels: Vec<Vec<usize>> = tasks.iter().map(|&t| task_labels(channels, t)).collect::<Result<_>>()?;

    let inputs: Vec<ChannelMatrix> = match cfg.snr_db {
        None => channels.to_vec(),
        Some(snr) => exec::map_indexed(channels.len(), |i| {
            add_noise(
                &channels[i],
                snr,
                &mut seed::stream_rng(cfg.noise_seed, Stream::Noise, i as u64, 0),
            )
        })
        .into_iter()
        .collect::<Result<_>>()?,
    };

    let mut fixed: BTreeMap<FeatureKind, (Vec<f64>, (usize, usize))> = BTreeMap::new();
    for choice in &cfg.features {
        if let Some(kind) = choice.fixed_kind() {
            if let std::collections::btree_map::Entry::Vacant(e) = fixed.entry(kind) {
                e.insert(feature_rows(&inputs, checkpoint, kind)?);
            }
        } else if checkpoint.is_none() {
            return Err(Error::Contract("fine-tuning needs a checkpoint".into()));
        }
    }

    let mut cells = Vec::new();
    for &choice in &cfg.features {
        for (ti, &task) in tasks.iter().enumerate() {
            for &fraction in &cfg.train_fractions {
                for &seed in &cfg.seeds {
                    cells.push((
                        ti,
                        Cell {
                            choice,
                            task,
                            fraction,
                            seed,
                        },
                    ));
                }
            }
        }
    }

    let results = exec::map_indexed(cells.len(), |c| -> Result<f64> {
        let (ti, cell) = &cells[c];
        let split = cfg.split.with_fraction(cell.fraction);
        let classes = cell.task.num_classes();
        match cell.choice.fixed_kind() {
            Some(kind) => {
                let (data, shape) = &fixed[&kind];
                let f = FeatureSet::new(kind, *shape, data.clone(), labels[*ti].clone(), classes)?;
                Ok(train_head(&f, &cfg.head, &split, cell.seed)?.1.f1)
            }
            None => {
                let FeatureChoice::Finetune(k) = cell.choice else {
                    unreachable!()
                };
                let ck = checkpoint.expect("checked above");
                let r = finetune_last_k(ck, k, &inputs, &labels[*ti], classes, &cfg.head, &split, cell.seed)?;
                Ok(r.report.f1)
            }
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    for ((_, cell), f1) in cells.iter().zip(results) {
        rows.push(BenchRow {
            task: cell.task.name().into(),
            feature_kind: cell.choice.name(),
            codebook_size: codebook(cell.task),
            train_fraction: cell.fraction,
            seed: cell.seed,
            f1: f1?,
        });
    }
    let summary = summarize(&rows);
    let (difference, gain_percent) = compare(&summary);
    Ok(BenchResults {
        rows,
        summary,
        difference,
        gain_percent,
    })
}

fn codebook(task: Task) -> Option<usize> {
    match task {
        Task::Los => None,
        Task::Beam(k) => Some(k),
    }
}

fn summarize(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for chunk in rows.chunk_by(|a, b| {
        a.feature_kind == b.feature_kind && a.codebook_size == b.codebook_size && a.train_fraction == b.train_fraction
    }) {
        let n = chunk.len();
        let mean = chunk.iter().map(|r| r.f1).sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (chunk.iter().map(|r| (r.f1 - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let r = &chunk[0];
        out.push(SummaryRow {
            task: r.task.clone(),
            feature_kind: r.feature_kind.clone(),
            codebook_size: r.codebook_size,
            train_fraction: r.train_fraction,
            runs: n,
            mean_f1: mean,
            stdev_f1: stdev,
        });
    }
    out
}

fn compare(summary: &[SummaryRow]) -> (Vec<GridCell>, Vec<GridCell>) {
    let (mut diff, mut gain) = (Vec::new(), Vec::new());
    for s in summary.iter().filter(|s| s.feature_kind != "raw") {
        let Some(raw) = summary.iter().find(|r| {
            r.feature_kind == "raw" && r.codebook_size == s.codebook_size && r.train_fraction == s.train_fraction
        }) else {
            continue;
        };
        let d = s.mean_f1 - raw.mean_f1;
        let cell = |value| GridCell {
            task: s.task.clone(),
            feature_kind: s.feature_kind.clone(),
            codebook_size: s.codebook_size,
            train_fraction: s.train_fraction,
            value,
        };
        diff.push(cell(d));
        gain.push(cell(100.0 * d / raw.mean_f1));
    }
    (diff, gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, ScenarioConfig};
    use crate::downstream::tests::micro_checkpoint;
    use crate::downstream::HeadArch;

    fn quick(task: BenchTask) -> BenchConfig {
        let base = match task {
            BenchTask::Los => BenchConfig::los(),
            BenchTask::Beam => BenchConfig::beam(),
        };
        BenchConfig {
            features: vec![FeatureChoice::Raw, FeatureChoice::Cls, FeatureChoice::Finetune(1)],
            train_fractions: vec![0.5, 1.0],
            codebook_sizes: vec![4, 8],
            seeds: vec![1, 2],
            head: HeadConfig {
                arch: HeadArch::Mlp { widths: vec![8] },
                epochs: 2,
                batch_size: 8,
                ..HeadConfig::mlp()
            },
            ..base
        }
    }

    #[test]
    fn grid_arithmetic_and_determinism() {
        let chs = generate_dataset(&ScenarioConfig::default(), 4, 4, 40);
        let ck = micro_checkpoint();
        let cfg = quick(BenchTask::Beam);
        let a = run_benchmark(&chs, Some(&ck), &cfg).unwrap();
        assert_eq!(a.rows.len(), 3 * 2 * 2 * 2);
        assert_eq!(a.summary.len(), 3 * 2 * 2);
        for d in &a.difference {
            let emb = a.mean(&d.feature_kind, d.codebook_size, d.train_fraction).unwrap();
            let raw = a.mean("raw", d.codebook_size, d.train_fraction).unwrap();
            assert_eq!(d.value, emb - raw);
        }
        assert_eq!(a.difference.len(), 2 * 2 * 2);
        let b = run_benchmark(&chs, Some(&ck), &cfg).unwrap();
        assert_eq!(a.rows_csv().unwrap(), b.rows_csv().unwrap());
        assert!(a
            .rows_csv()
            .unwrap()
            .starts_with("task,feature_kind,codebook_size,train_fraction,seed,f1\n"));
    }

    #[test]
    fn noisy_los_run_and_missing_labels() {
        let mut chs = generate_dataset(&ScenarioConfig::default(), 4, 4, 30);
        let cfg = BenchConfig {
            snr_db: Some(5.0),
            features: vec![FeatureChoice::Raw],
            ..quick(BenchTask::Los)
        };
        let r = run_benchmark(&chs, None, &cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.codebook_size.is_none()));
        chs[3].los = None;
        assert!(run_benchmark(&chs, None, &cfg).is_err());
    }
}
