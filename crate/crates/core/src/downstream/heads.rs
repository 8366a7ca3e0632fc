use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::Rng64;
use crate::tensor::{Graph, Tensor, Var, LAYERNORM_EPS};
use crate::{Error, Result};

const BN_MOMENTUM: f64 = 0.1;
const CNN_KERNEL: usize = 3;
const CNN_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadArch {
    /// Fully connected layers with batch norm, ReLU and dropout after each
    /// hidden layer.
    Mlp { widths: Vec<usize> },
    /// Kernel-3 conv stem, residual blocks, global average pooling and a
    /// linear classifier. The channel width is the one whose parameter count
    /// is closest to `budget`.
    Cnn { budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub arch: HeadArch,
    pub dropout: f64,
    pub lr: f64,
    /// Learning rate of unfrozen encoder blocks when fine-tuning.
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::mlp()
    }
}

impl HeadConfig {
    pub fn mlp() -> Self {
        Self {
            arch: HeadArch::Mlp {
                widths: vec![512, 256, 128],
            },
            dropout: 0.1,
            lr: 1e-3,
            encoder_lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 100,
            batch_size: 32,
        }
    }

    pub fn cnn(budget: usize) -> Self {
        Self {
            arch: HeadArch::Cnn { budget },
            ..Self::mlp()
        }
    }
}

/// Scalars of the residual CNN for `C` input channels, width `F` and `K`
/// classes (batch-norm scale and shift included).
pub fn cnn_param_count(channels: usize, width: usize, classes: usize) -> usize {
    let (c, f, k) = (channels, width, classes);
    let conv = |cin: usize| CNN_KERNEL * cin * f + f + 2 * f;
    conv(c) + CNN_BLOCKS * 2 * conv(f) + f * k + k
}

pub fn cnn_width_for_budget(channels: usize, classes: usize, budget: usize) -> usize {
    (1..=4096)
        .min_by_key(|&f| cnn_param_count(channels, f, classes).abs_diff(budget))
        .unwrap()
}

#[derive(Debug, Clone, PartialEq)]
enum Built {
    Mlp { dims: Vec<usize> },
    Cnn { seq: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: usize,
    beta: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Batch statistics `(mean, var)` recorded per batch-norm layer.
pub(crate) type BnStats = Vec<(Vec<f64>, Vec<f64>)>;

/// A trainable classifier on top of fixed-size feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    built: Built,
    classes: usize,
    dropout: f64,
    tensors: Vec<Tensor>,
    bn: Vec<BatchNorm>,
}

struct Builder<'r> {
    rng: &'r mut Rng64,
    tensors: Vec<Tensor>,
    bn: Vec<BatchNorm>,
}

impl Builder<'_> {
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.tensors.push(Tensor::new(vec![fan_in, fan_out], data)?.with_grad());
        Ok(())
    }

    fn vector(&mut self, n: usize, value: f64) -> Result<()> {
        self.tensors.push(Tensor::new(vec![n], vec![value; n])?.with_grad());
        Ok(())
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(fan_in, fan_out)?;
        self.vector(fan_out, 0.0)
    }

    fn batch_norm(&mut self, n: usize) -> Result<()> {
        self.vector(n, 1.0)?;
        self.vector(n, 0.0)?;
        let len = self.tensors.len();
        self.bn.push(BatchNorm {
            gamma: len - 2,
            beta: len - 1,
            mean: vec![0.0; n],
            var: vec![1.0; n],
        });
        Ok(())
    }
}

impl Head {
    /// `seq_shape = (T, C)` describes the input rows for a CNN; an MLP reads
    /// `T·C` features.
    pub fn new(cfg: &HeadConfig, seq_shape: (usize, usize), classes: usize, rng: &mut Rng64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract("a head needs at least two classes".into()));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Contract(format!("dropout {} outside [0,1)", cfg.dropout)));
        }
        let mut b = Builder {
            rng,
            tensors: Vec::new(),
            bn: Vec::new(),
        };
        let built = match &cfg.arch {
            HeadArch::Mlp { widths } => {
                let mut dims = vec![seq_shape.0 * seq_shape.1];
                dims.extend(widths);
                if dims.contains(&0) {
                    return Err(Error::Contract(format!("zero width in MLP {dims:?}")));
                }
                for w in dims.windows(2) {
                    b.linear(w[0], w[1])?;
                    b.batch_norm(w[1])?;
                }
                b.linear(*dims.last().unwrap(), classes)?;
                Built::Mlp { dims }
            }
            HeadArch::Cnn { budget } => {
                let (seq, chans) = seq_shape;
                let width = cnn_width_for_budget(chans, classes, *budget);
                b.linear(CNN_KERNEL * chans, width)?;
                b.batch_norm(width)?;
                for _ in 0..2 * CNN_BLOCKS {
                    b.linear(CNN_KERNEL * width, width)?;
                    b.batch_norm(width)?;
                }
                b.linear(width, classes)?;
                Built::Cnn { seq, width }
            }
        };
        Ok(Self {
            built,
            classes,
            dropout: cfg.dropout,
            tensors: b.tensors,
            bn: b.bn,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// CNN channel width, if this is a CNN.
    pub fn cnn_width(&self) -> Option<usize> {
        match self.built {
            Built::Cnn { width, .. } => Some(width),
            Built::Mlp { .. } => None,
        }
    }

    /// Layer widths of an MLP, input first.
    pub fn mlp_dims(&self) -> Option<&[usize]> {
        match &self.built {
            Built::Mlp { dims } => Some(dims),
            Built::Cnn { .. } => None,
        }
    }

    fn dense<'a>(g: &mut Graph<'a>, ps: &'a [Tensor], offset: usize, x: Var, w: usize) -> Result<Var> {
        let wv = g.param(&ps[w], offset + w);
        let bv = g.param(&ps[w + 1], offset + w + 1);
        let y = g.matmul(x, wv)?;
        Ok(g.add_row(y, bv)?)
    }

    /// Batch norm over rows: batch statistics while training (recorded in
    /// `stats`), running statistics otherwise.
    #[allow(clippy::too_many_arguments)]
    fn norm<'a>(
        &self,
        g: &mut Graph<'a>,
        ps: &'a [Tensor],
        offset: usize,
        x: Var,
        which: usize,
        train: bool,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let bn = &self.bn[which];
        let normed = if train {
            let c = g.dims(x)[1];
            let v = g.value(x);
            let r = v.len() / c;
            let mut mean = vec![0.0; c];
            for row in v.chunks(c) {
                mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / r as f64);
            }
            let mut var = vec![0.0; c];
            for row in v.chunks(c) {
                var.iter_mut()
                    .zip(row.iter().zip(&mean))
                    .for_each(|(s, (x, m))| *s += (x - m) * (x - m) / r as f64);
            }
            stats.push((mean, var));
            let t = g.transpose(x)?;
            let t = g.layernorm_rows(t)?;
            g.transpose(t)?
        } else {
            let inv: Vec<f64> = bn.var.iter().map(|v| 1.0 / (v + LAYERNORM_EPS).sqrt()).collect();
            let shift: Vec<f64> = bn.mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
            let n = inv.len();
            let inv = g.constant(vec![n], inv)?;
            let shift = g.constant(vec![n], shift)?;
            let y = g.mul_row(x, inv)?;
            g.add_row(y, shift)?
        };
        let gamma = g.param(&ps[bn.gamma], offset + bn.gamma);
        let beta = g.param(&ps[bn.beta], offset + bn.beta);
        let y = g.mul_row(normed, gamma)?;
        Ok(g.add_row(y, beta)?)
    }

    fn conv<'a>(g: &mut Graph<'a>, ps: &'a [Tensor], offset: usize, x: Var, seq: usize, w: usize) -> Result<Var> {
        let cols = g.im2col(x, seq, CNN_KERNEL)?;
        Self::dense(g, ps, offset, cols, w)
    }

    /// Logits `B×K` for `x: B×(T·C)`. Parameter slots start at `offset`;
    /// `rng` selects training mode (dropout and batch statistics).
    pub(crate) fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        offset: usize,
        rng: Option<&mut Rng64>,
        stats: &mut BnStats,
    ) -> Result<Var> {
        self.forward_with(&self.tensors, g, x, offset, rng, stats)
    }

    fn forward_with<'a>(
        &self,
        ps: &'a [Tensor],
        g: &mut Graph<'a>,
        x: Var,
        offset: usize,
        mut rng: Option<&mut Rng64>,
        stats: &mut BnStats,
    ) -> Result<Var> {
        let train = rng.is_some();
        let batch = g.dims(x)[0];
        match &self.built {
            Built::Mlp { dims } => {
                let mut h = x;
                for i in 0..dims.len() - 1 {
                    h = Self::dense(g, ps, offset, h, 4 * i)?;
                    h = self.norm(g, ps, offset, h, i, train, stats)?;
                    h = g.relu(h);
                    h = g.dropout(h, self.dropout, rng.as_deref_mut())?;
                }
                Self::dense(g, ps, offset, h, 4 * (dims.len() - 1))
            }
            Built::Cnn { seq, .. } => {
                let seq = *seq;
                let total = g.value(x).len();
                let chans = total / (batch * seq);
                let x = g.reshape(x, vec![batch * seq, chans])?;
                let h = Self::conv(g, ps, offset, x, seq, 0)?;
                let h = self.norm(g, ps, offset, h, 0, train, stats)?;
                let mut h = g.relu(h);
                for blk in 0..CNN_BLOCKS {
                    let (w1, w2) = (4 + 8 * blk, 8 + 8 * blk);
                    let y = Self::conv(g, ps, offset, h, seq, w1)?;
                    let y = self.norm(g, ps, offset, y, 1 + 2 * blk, train, stats)?;
                    let y = g.relu(y);
                    let y = Self::conv(g, ps, offset, y, seq, w2)?;
                    let y = self.norm(g, ps, offset, y, 2 + 2 * blk, train, stats)?;
                    let y = g.add(y, h)?;
                    h = g.relu(y);
                }
                let pooled = g.mean_row_groups(h, seq)?;
                let pooled = g.dropout(pooled, self.dropout, rng)?;
                Self::dense(g, ps, offset, pooled, 4 + 8 * CNN_BLOCKS)
            }
        }
    }

    /// Exponential moving average of batch statistics; the running variance
    /// uses the unbiased estimate.
    pub(crate) fn update_running(&mut self, stats: &BnStats, rows_per_stat: &[usize]) {
        for ((bn, (mean, var)), &n) in self.bn.iter_mut().zip(stats).zip(rows_per_stat) {
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            for i in 0..mean.len() {
                bn.mean[i] = (1.0 - BN_MOMENTUM) * bn.mean[i] + BN_MOMENTUM * mean[i];
                bn.var[i] = (1.0 - BN_MOMENTUM) * bn.var[i] + BN_MOMENTUM * var[i] * unbias;
            }
        }
    }

    /// Rows seen by each batch-norm layer for a batch of `batch` samples.
    pub(crate) fn bn_rows(&self, batch: usize) -> Vec<usize> {
        let rows = match self.built {
            Built::Mlp { .. } => batch,
            Built::Cnn { seq, .. } => batch * seq,
        };
        vec![rows; self.bn.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::tensor::{grad_check, GradCheckConfig, TensorError};

    #[test]
    fn full_mlp_shapes() {
        let h = Head::new(&HeadConfig::mlp(), (64, 1), 2, &mut seed::rng(0)).unwrap();
        assert_eq!(h.mlp_dims().unwrap(), &[64, 512, 256, 128]);
        assert_eq!(h.tensors()[0].dims(), &[64, 512]);
        assert_eq!(h.tensors().last().unwrap().dims(), &[2]);
    }

    #[test]
    fn cnn_budget_is_met() {
        for (chans, classes) in [(32, 64), (1, 16), (64, 256)] {
            let h = Head::new(&HeadConfig::cnn(500_000), (8, chans), classes, &mut seed::rng(0)).unwrap();
            assert_eq!(h.param_count(), cnn_param_count(chans, h.cnn_width().unwrap(), classes));
            let rel = (h.param_count() as f64 - 500_000.0).abs() / 500_000.0;
            assert!(rel < 0.1, "{rel}");
        }
    }

    fn check_head(cfg: &HeadConfig, shape: (usize, usize)) {
        let mut head = Head::new(
            &HeadConfig {
                dropout: 0.0,
                ..cfg.clone()
            },
            shape,
            3,
            &mut seed::rng(1),
        )
        .unwrap();
        // random vectors keep ReLU inputs off the kink; non-trivial running
        // statistics exercise the evaluation path
        let mut r = seed::rng(7);
        for t in head.tensors_mut().iter_mut().filter(|t| t.dims().len() == 1) {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        }
        for bn in &mut head.bn {
            bn.mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.1 * i as f64);
            bn.var.iter_mut().for_each(|v| *v = 1.5);
        }
        let n = 4;
        let mut r = seed::rng(2);
        let x: Vec<f64> = (0..n * shape.0 * shape.1).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels = [0, 2, 1, 2];
        for train in [false, true] {
            let report = grad_check(
                &head.tensors().to_vec(),
                |g, ps| {
                    let xv = g.constant(vec![n, shape.0 * shape.1], x.clone())?;
                    let mut rng = seed::rng(0);
                    let logits = head
                        .forward_with(ps, g, xv, 0, train.then_some(&mut rng), &mut Vec::new())
                        .map_err(|e| TensorError::Contract(e.to_string()))?;
                    g.softmax_cross_entropy(logits, &labels)
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed, "train={train} {report:?}");
        }
    }

    #[test]
    fn mlp_gradients() {
        let cfg = HeadConfig {
            arch: HeadArch::Mlp { widths: vec![5, 4] },
            ..HeadConfig::mlp()
        };
        check_head(&cfg, (3, 2));
    }

    #[test]
    fn cnn_gradients() {
        check_head(&HeadConfig::cnn(200), (5, 2));
    }
}
