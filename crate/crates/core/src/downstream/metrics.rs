use rand::seq::SliceRandom;

use crate::seed::Rng64;
use crate::{Error, Result};

/// Unweighted mean over `k` classes of per-class F1. A class with no
/// support and no predictions contributes 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if k == 0 {
        return Err(Error::Contract("macro-F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Contract(format!("class id outside 0..{k}")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / k as f64)
}

/// Per-class shuffle, then `round(n_c·train)` and `round(n_c·val)` of each
/// class go to train and validation, the rest to test. Each part is sorted.
pub fn stratified_split(
    labels: &[usize],
    train: f64,
    val: f64,
    rng: &mut Rng64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&val) || train + val > 1.0 + 1e-12 {
        return Err(Error::Contract(format!("invalid split fractions {train}/{val}")));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n = idx.len() as f64;
        let n_tr = (n * train).round() as usize;
        let n_va = ((n * val).round() as usize).min(idx.len() - n_tr);
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    te.sort_unstable();
    Ok((tr, va, te))
}
