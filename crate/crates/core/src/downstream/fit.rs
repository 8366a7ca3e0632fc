use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heads::BnStats;
use super::{feature_rows, macro_f1, stratified_split, FeatureKind, FeatureSet, Head, HeadConfig};
use crate::channel::{apply_scale, ChannelMatrix};
use crate::exec;
use crate::model::{embed_inputs, encoder_block, LwmParameters};
use crate::patch::patchify;
use crate::pretrain::Checkpoint;
use crate::seed::{self, Rng64, Stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, Var};
use crate::{Error, Result};

/// Stratified train/validation/test fractions (test gets the remainder).
/// `train_fraction` then keeps that share of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub train_fraction: f64,
}

impl SplitSpec {
    /// 80% train, 20% held out, no validation split.
    pub fn los() -> Self {
        Self {
            train: 0.8,
            val: 0.0,
            train_fraction: 1.0,
        }
    }

    /// 70/20/10.
    pub fn beam() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            train_fraction: 1.0,
        }
    }

    pub fn with_fraction(self, train_fraction: f64) -> Self {
        Self { train_fraction, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    /// Macro-F1 on the test split.
    pub f1: f64,
    /// Best validation macro-F1 when a validation split exists.
    pub val_f1: Option<f64>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub head_params: usize,
    #[serde(skip)]
    pub test_indices: Vec<usize>,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub report: HeadReport,
    /// Encoder after fine-tuning; blocks before the last `k` are untouched.
    pub params: LwmParameters,
    pub head: Head,
}

struct Partition {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn partition(labels: &[usize], split: &SplitSpec, seed: u64) -> Result<Partition> {
    if !(split.train_fraction > 0.0 && split.train_fraction <= 1.0) {
        return Err(Error::Contract(format!(
            "train fraction {} outside (0,1]",
            split.train_fraction
        )));
    }
    let mut rng = seed::stream_rng(seed, Stream::Split, 1, 0);
    let (mut train, val, test) = stratified_split(labels, split.train, split.val, &mut rng)?;
    if split.train_fraction < 1.0 {
        let sub: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let (keep, _, _) = stratified_split(&sub, split.train_fraction, 0.0, &mut rng)?;
        train = keep.into_iter().map(|j| train[j]).collect();
    }
    let mut classes: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Contract(format!(
            "training split of {} samples has {} class(es); at least two are required",
            train.len(),
            classes.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Contract("test split is empty".into()));
    }
    Ok(Partition { train, val, test })
}

/// Shuffled batches; a trailing batch of one sample joins the previous one
/// since batch norm needs two rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn head_adam(cfg: &HeadConfig, lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    }
}

trait Learner: Clone {
    fn logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        idx: &[usize],
        rng: Option<&mut Rng64>,
        stats: &mut BnStats,
    ) -> Result<Var>;
    fn apply(&mut self, grads: &Gradients, stats: &BnStats, batch: usize) -> Result<()>;
    fn head(&self) -> &Head;
}

fn predict<L: Learner>(l: &L, idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(128) {
        let mut g = Graph::new();
        let logits = l.logits(&mut g, chunk, None, &mut Vec::new())?;
        let k = g.dims(logits)[1];
        for row in g.value(logits).chunks(k) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn fit<L: Learner>(
    mut l: L,
    labels: &[usize],
    classes: usize,
    part: &Partition,
    cfg: &HeadConfig,
    seed: u64,
) -> Result<(L, HeadReport)> {
    let truth = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let mut best: Option<(f64, usize, L)> = None;
    for epoch in 0..cfg.epochs {
        let mut order = part.train.clone();
        order.shuffle(&mut seed::stream_rng(seed, Stream::Shuffle, epoch as u64, 1));
        for (b, batch) in batches(&order, cfg.batch_size).iter().enumerate() {
            let mut rng = seed::stream_rng(seed, Stream::Dropout, epoch as u64, b as u64);
            let mut stats = Vec::new();
            let grads = {
                let mut g = Graph::new();
                let logits = l.logits(&mut g, batch, Some(&mut rng), &mut stats)?;
                let loss = g.softmax_cross_entropy(logits, &truth(batch))?;
                if !g.scalar(loss).is_finite() {
                    return Err(Error::Contract(format!("non-finite head loss at epoch {epoch}")));
                }
                g.backward(loss)?
            };
            l.apply(&grads, &stats, batch.len())?;
        }
        if !part.val.is_empty() {
            let f1 = macro_f1(&predict(&l, &part.val)?, &truth(&part.val), classes)?;
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, l.clone()));
            }
        }
    }
    let (val_f1, best_epoch) = match best {
        Some((f1, epoch, snapshot)) => {
            l = snapshot;
            (Some(f1), epoch)
        }
        None => (None, cfg.epochs.saturating_sub(1)),
    };
    let predictions = predict(&l, &part.test)?;
    let f1 = macro_f1(&predictions, &truth(&part.test), classes)?;
    let report = HeadReport {
        f1,
        val_f1,
        best_epoch,
        train_size: part.train.len(),
        test_size: part.test.len(),
        head_params: l.head().param_count(),
        test_indices: part.test.clone(),
        predictions,
    };
    Ok((l, report))
}

#[derive(Clone)]
struct Frozen<'f> {
    features: &'f FeatureSet,
    head: Head,
    opt: AdamState,
}

impl Learner for Frozen<'_> {
    fn logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        idx: &[usize],
        rng: Option<&mut Rng64>,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let rows: Vec<f64> = idx.iter().flat_map(|&i| self.features.row(i)).copied().collect();
        let x = g.constant(vec![idx.len(), self.features.dim], rows)?;
        self.head.forward(g, x, 0, rng, stats)
    }

    fn apply(&mut self, grads: &Gradients, stats: &BnStats, batch: usize) -> Result<()> {
        grads.accumulate_into(self.head.tensors_mut())?;
        adam_step(self.head.tensors_mut(), &mut self.opt)?;
        let rows = self.head.bn_rows(batch);
        self.head.update_running(stats, &rows);
        Ok(())
    }

    fn head(&self) -> &Head {
        &self.head
    }
}

/// Trains a fresh head on fixed features with cross-entropy and Adam and
/// reports macro-F1 on the stratified test split. With a validation split
/// the best-validation epoch is kept; otherwise the last one.
pub fn train_head(features: &FeatureSet, cfg: &HeadConfig, split: &SplitSpec, seed: u64) -> Result<(Head, HeadReport)> {
    let part = partition(&features.labels, split, seed)?;
    let head = Head::new(
        cfg,
        features.seq_shape,
        features.num_classes,
        &mut seed::stream_rng(seed, Stream::Head, 0, 0),
    )?;
    let opt = AdamState::new(head.tensors(), head_adam(cfg, cfg.lr))?;
    let learner = Frozen { features, head, opt };
    let (l, report) = fit(learner, &features.labels, features.num_classes, &part, cfg, seed)?;
    Ok((l.head, report))
}

#[derive(Clone)]
struct Tuned<'f> {
    /// Encoder state entering block `start`, per sample.
    hidden: &'f [Vec<f64>],
    rows: usize,
    start: usize,
    encoder: LwmParameters,
    head: Head,
    opt_enc: AdamState,
    opt_head: AdamState,
}

impl Learner for Tuned<'_> {
    fn logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        idx: &[usize],
        mut rng: Option<&mut Rng64>,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let d = self.encoder.config().d_model;
        let mut cls = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut h = g.constant(vec![self.rows, d], self.hidden[i].clone())?;
            for layer in self.start..self.encoder.config().layers {
                h = encoder_block(g, &self.encoder, layer, h, rng.as_deref_mut(), None)?;
            }
            cls.push(g.gather_rows(h, &[0])?);
        }
        let x = g.concat_rows(&cls)?;
        self.head.forward(g, x, self.encoder.tensors().len(), rng, stats)
    }

    fn apply(&mut self, grads: &Gradients, stats: &BnStats, batch: usize) -> Result<()> {
        let offset = self.encoder.tensors().len();
        grads.accumulate_into_offset(self.encoder.tensors_mut(), 0)?;
        grads.accumulate_into_offset(self.head.tensors_mut(), offset)?;
        adam_step(self.encoder.tensors_mut(), &mut self.opt_enc)?;
        adam_step(self.head.tensors_mut(), &mut self.opt_head)?;
        let rows = self.head.bn_rows(batch);
        self.head.update_running(stats, &rows);
        Ok(())
    }

    fn head(&self) -> &Head {
        &self.head
    }
}

/// Trains a head on the CLS output while also updating the last `k` encoder
/// blocks. Earlier blocks run once in inference mode and are cached, so
/// their parameters are never touched. `k = 0` is frozen-CLS training.
#[allow(clippy::too_many_arguments)]
pub fn finetune_last_k(
    checkpoint: &Checkpoint,
    k: usize,
    channels: &[ChannelMatrix],
    labels: &[usize],
    num_classes: usize,
    cfg: &HeadConfig,
    split: &SplitSpec,
    seed: u64,
) -> Result<FinetuneReport> {
    let model = checkpoint.model;
    if k > model.layers {
        return Err(Error::Contract(format!(
            "cannot fine-tune {k} of {} blocks",
            model.layers
        )));
    }
    if labels.len() != channels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} channels",
            labels.len(),
            channels.len()
        )));
    }
    if k == 0 {
        let (data, shape) = feature_rows(channels, Some(checkpoint), FeatureKind::Cls)?;
        let features = FeatureSet::new(FeatureKind::Cls, shape, data, labels.to_vec(), num_classes)?;
        let (head, report) = train_head(&features, cfg, split, seed)?;
        return Ok(FinetuneReport {
            report,
            params: checkpoint.params.clone(),
            head,
        });
    }
    let part = partition(labels, split, seed)?;
    let start = model.layers - k;
    let params = &checkpoint.params;
    let prefix = exec::map_slice(channels, |ch| -> Result<Vec<f64>> {
        let scaled = apply_scale(std::slice::from_ref(ch), checkpoint.norm_scale);
        let seq = patchify(&scaled[0], model.num_patches)?;
        let mut g = Graph::new();
        let mut h = embed_inputs(&mut g, params, &seq, None)?;
        for layer in 0..start {
            h = encoder_block(&mut g, params, layer, h, None, None)?;
        }
        Ok(g.value(h).to_vec())
    });
    let hidden: Vec<Vec<f64>> = prefix.into_iter().collect::<Result<_>>()?;

    let mut encoder = params.clone();
    encoder.train_only_last_layers(k);
    let head = Head::new(
        cfg,
        (model.d_model, 1),
        num_classes,
        &mut seed::stream_rng(seed, Stream::Head, 0, 0),
    )?;
    let learner = Tuned {
        hidden: &hidden,
        rows: model.seq_len(),
        start,
        opt_enc: AdamState::new(encoder.tensors(), head_adam(cfg, cfg.encoder_lr))?,
        opt_head: AdamState::new(head.tensors(), head_adam(cfg, cfg.lr))?,
        encoder,
        head,
    };
    let (l, report) = fit(learner, labels, num_classes, &part, cfg, seed)?;
    Ok(FinetuneReport {
        report,
        params: l.encoder,
        head: l.head,
    })
}
