use serde::Serialize;

use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`. Entries whose
    /// true gradient is below the floor are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(slot, entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Anything holding an ordered list of parameter tensors.
pub trait ParamSet: Clone {
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];
}

impl ParamSet for Vec<Tensor> {
    fn tensors(&self) -> &[Tensor] {
        self
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        self
    }
}

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences for every trainable entry of `params`.
///
/// `loss_fn` must be deterministic: any randomness has to be reseeded on
/// each call.
pub fn grad_check<P, F>(params: &P, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: for<'a> Fn(&mut Graph<'a>, &'a P) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, params)?;
        g.backward(loss)?
    };
    let eval = |ps: &P| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, ps)?;
        Ok(g.scalar(loss))
    };

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for slot in 0..params.tensors().len() {
        if !params.tensors()[slot].requires_grad {
            continue;
        }
        let n = params.tensors()[slot].numel();
        let stride = match cfg.max_entries_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let grad = analytic.get(slot);
        for j in (0..n).step_by(stride) {
            let orig = work.tensors()[slot].data()[j];
            work.tensors_mut()[slot].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work.tensors_mut()[slot].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work.tensors_mut()[slot].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.map_or(0.0, |g| g[j]);
            let rel = relative_error(a, numeric, cfg.floor);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((slot, j));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        tol: cfg.tol,
        passed: max_rel <= cfg.tol,
    })
}
