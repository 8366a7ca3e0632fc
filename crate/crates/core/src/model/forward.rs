use super::{LwmParameters, ModelConfig};
use crate::channel::ChannelMatrix;
use crate::exec;
use crate::patch::{patchify, PatchSequence, Targets};
use crate::seed::{self, Rng64};
use crate::tensor::{Gradients, Graph, Var};
use crate::{Error, Result};

/// Encoder output `[C; E]` with `C` the CLS row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOutput {
    rows: usize,
    d_model: usize,
    full: Vec<f64>,
}

impl EmbeddingOutput {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// `(P+1)×D`, row-major.
    pub fn full(&self) -> &[f64] {
        &self.full
    }

    pub fn cls(&self) -> &[f64] {
        &self.full[..self.d_model]
    }

    /// Rows `1..=P` flattened.
    pub fn channel(&self) -> &[f64] {
        &self.full[self.d_model..]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.full[i * self.d_model..(i + 1) * self.d_model]
    }
}

/// Softmax attention matrices of every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layers: usize,
    pub heads: usize,
    /// Sequence length `P+1`.
    pub size: usize,
    maps: Vec<Vec<f64>>,
}

impl AttentionCapture {
    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        &self.maps[layer * self.heads + head]
    }

    /// `α_CLS,i`: row 0 of the map.
    pub fn cls_scores(&self, layer: usize, head: usize) -> &[f64] {
        &self.map(layer, head)[..self.size]
    }

    pub fn maps(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        self.maps
            .iter()
            .enumerate()
            .map(|(i, m)| (i / self.heads, i % self.heads, m.as_slice()))
    }
}

fn check_patches(cfg: &ModelConfig, seq: &PatchSequence) -> Result<()> {
    if seq.num_patches() != cfg.num_patches || seq.patch_len() != cfg.patch_len {
        return Err(Error::Shape(format!(
            "{} patches of length {} given to a model expecting {} of length {}",
            seq.num_patches(),
            seq.patch_len(),
            cfg.num_patches,
            cfg.patch_len
        )));
    }
    Ok(())
}

/// Input embedding plus positional encoding for `[p_cls; patches]`.
pub fn embed_inputs<'a>(
    g: &mut Graph<'a>,
    params: &'a LwmParameters,
    patches: &PatchSequence,
    rng: Option<&mut Rng64>,
) -> Result<Var> {
    let cfg = params.config();
    check_patches(cfg, patches)?;
    let lay = params.layout();
    let (p, l) = (cfg.num_patches, cfg.patch_len);

    let cls = g.param(params.tensor(lay.cls), lay.cls);
    let cls = g.reshape(cls, vec![1, l])?;
    let body = g.constant(vec![p, l], patches.data().to_vec())?;
    let x = g.concat_rows(&[cls, body])?;
    let w_emb = g.param(params.tensor(lay.emb_w), lay.emb_w);
    let b_emb = g.param(params.tensor(lay.emb_b), lay.emb_b);
    let e = g.matmul_t(x, w_emb)?;
    let e = g.add_row(e, b_emb)?;

    let positions: Vec<f64> = (0..=p).flat_map(|i| std::iter::repeat_n(i as f64, l)).collect();
    let pos = g.constant(vec![p + 1, l], positions)?;
    let w_pos = g.param(params.tensor(lay.pos_w), lay.pos_w);
    let b_pos = g.param(params.tensor(lay.pos_b), lay.pos_b);
    let ep = g.matmul_t(pos, w_pos)?;
    let ep = g.add_row(ep, b_pos)?;

    let sum = g.add(e, ep)?;
    Ok(g.dropout(sum, cfg.dropout, rng)?)
}

/// One post-norm encoder block. Softmax matrices are pushed onto `capture`
/// in head order when requested.
pub fn encoder_block<'a>(
    g: &mut Graph<'a>,
    params: &'a LwmParameters,
    layer: usize,
    x: Var,
    mut rng: Option<&mut Rng64>,
    capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let cfg = params.config();
    let slots = &params.layout().layers[layer];
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for [wq, wk, wv] in &slots.heads {
        let wq_v = g.param(params.tensor(*wq), *wq);
        let wk_v = g.param(params.tensor(*wk), *wk);
        let wv_v = g.param(params.tensor(*wv), *wv);
        let q = g.matmul(x, wq_v)?;
        let k = g.matmul(x, wk_v)?;
        let v = g.matmul(x, wv_v)?;
        let s = g.matmul_t(q, k)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s)?;
        attn.push(a);
        heads.push(g.matmul(a, v)?);
    }
    if let Some(c) = capture {
        c.extend(attn);
    }
    let concat = g.concat_cols(&heads)?;
    let w_o = g.param(params.tensor(slots.w_o), slots.w_o);
    let mh = g.matmul(concat, w_o)?;
    let mh = g.dropout(mh, cfg.dropout, rng.as_deref_mut())?;
    let res = g.add(x, mh)?;
    let x1 = g.layernorm_rows(res)?;

    let w_1 = g.param(params.tensor(slots.w_1), slots.w_1);
    let b_1 = g.param(params.tensor(slots.b_1), slots.b_1);
    let w_2 = g.param(params.tensor(slots.w_2), slots.w_2);
    let b_2 = g.param(params.tensor(slots.b_2), slots.b_2);
    let h = g.matmul(x1, w_1)?;
    let h = g.add_row(h, b_1)?;
    let h = g.relu(h);
    let f = g.matmul(h, w_2)?;
    let f = g.add_row(f, b_2)?;
    let f = g.dropout(f, cfg.dropout, rng)?;
    let res = g.add(x1, f)?;
    Ok(g.layernorm_rows(res)?)
}

/// Embedding followed by every encoder block. `rng = None` is inference.
pub fn encode<'a>(
    g: &mut Graph<'a>,
    params: &'a LwmParameters,
    patches: &PatchSequence,
    mut rng: Option<&mut Rng64>,
    mut capture: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut x = embed_inputs(g, params, patches, rng.as_deref_mut())?;
    for layer in 0..params.config().layers {
        x = encoder_block(g, params, layer, x, rng.as_deref_mut(), capture.as_deref_mut())?;
    }
    Ok(x)
}

fn run_inference(
    ch: &ChannelMatrix,
    params: &LwmParameters,
    want_capture: bool,
) -> Result<(EmbeddingOutput, Option<AttentionCapture>)> {
    let cfg = params.config();
    let seq = patchify(ch, cfg.num_patches)?;
    check_patches(cfg, &seq)?;
    let mut g = Graph::new();
    let mut attn = Vec::new();
    let out = encode(&mut g, params, &seq, None, want_capture.then_some(&mut attn))?;
    let emb = EmbeddingOutput {
        rows: cfg.seq_len(),
        d_model: cfg.d_model,
        full: g.value(out).to_vec(),
    };
    let capture = want_capture.then(|| AttentionCapture {
        layers: cfg.layers,
        heads: cfg.heads,
        size: cfg.seq_len(),
        maps: attn.iter().map(|&a| g.value(a).to_vec()).collect(),
    });
    Ok((emb, capture))
}

/// Deterministic inference: no masking, no dropout.
pub fn forward_embed(ch: &ChannelMatrix, params: &LwmParameters) -> Result<EmbeddingOutput> {
    Ok(run_inference(ch, params, false)?.0)
}

/// Inference that also records all `E×H` attention maps.
pub fn capture_attention(ch: &ChannelMatrix, params: &LwmParameters) -> Result<(EmbeddingOutput, AttentionCapture)> {
    let (emb, cap) = run_inference(ch, params, true)?;
    Ok((emb, cap.expect("capture requested")))
}

/// A masked input sequence with its reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub input: PatchSequence,
    pub targets: Targets,
}

/// Sum over targets of `‖W_dec·e_i − p_i‖²` for one sample.
fn sample_sse<'a>(
    g: &mut Graph<'a>,
    params: &'a LwmParameters,
    sample: &MaskedSample,
    rng: Option<&mut Rng64>,
) -> Result<Var> {
    if sample.targets.is_empty() {
        return Err(Error::Contract("sample has no reconstruction targets".into()));
    }
    let hidden = encode(g, params, &sample.input, rng, None)?;
    let rows: Vec<usize> = sample.targets.keys().map(|i| i + 1).collect();
    let sel = g.gather_rows(hidden, &rows)?;
    let dec = params.layout().dec;
    let w_dec = g.param(params.tensor(dec), dec);
    let rec = g.matmul_t(sel, w_dec)?;
    let l = params.config().patch_len;
    let tgt: Vec<f64> = sample.targets.values().flatten().copied().collect();
    let tgt = g.constant(vec![rows.len(), l], tgt)?;
    Ok(g.sum_squared_error(rec, tgt)?)
}

fn total_targets(batch: &[MaskedSample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(batch.iter().map(|s| s.targets.len()).sum())
}

/// Masked-patch reconstruction loss over a batch, built as one graph:
/// `Σ_samples Σ_{i∈M} ‖W_dec·e_i − p_i‖² / Σ_samples |M|`.
///
/// `dropout_seeds` (one per sample) selects training mode.
pub fn pretrain_loss<'a>(
    g: &mut Graph<'a>,
    params: &'a LwmParameters,
    batch: &[MaskedSample],
    dropout_seeds: Option<&[u64]>,
) -> Result<Var> {
    let n = total_targets(batch)?;
    let mut total: Option<Var> = None;
    for (i, sample) in batch.iter().enumerate() {
        let mut rng = dropout_seeds.map(|s| seed::rng(s[i]));
        let sse = sample_sse(g, params, sample, rng.as_mut())?;
        total = Some(match total {
            Some(t) => g.add(t, sse)?,
            None => sse,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / n as f64))
}

/// Loss and gradients of a batch, one graph per sample (evaluated with
/// [`exec::map_indexed`]) and reduced in sample order.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    /// Sum of squared errors before normalization.
    pub sse: f64,
    pub targets: usize,
    pub grads: Gradients,
}

pub fn pretrain_batch_grads(
    params: &LwmParameters,
    batch: &[MaskedSample],
    dropout_seeds: Option<&[u64]>,
    with_grads: bool,
) -> Result<BatchGradients> {
    let n = total_targets(batch)?;
    if let Some(s) = dropout_seeds {
        if s.len() != batch.len() {
            return Err(Error::Contract("one dropout seed per sample required".into()));
        }
    }
    let inv = 1.0 / n as f64;
    let parts = exec::map_indexed(batch.len(), |i| -> Result<(f64, Option<Gradients>)> {
        let mut g = Graph::new();
        let mut rng = dropout_seeds.map(|s| seed::rng(s[i]));
        let sse = sample_sse(&mut g, params, &batch[i], rng.as_mut())?;
        let grads = if with_grads {
            Some(g.backward_with_seed(sse, inv)?)
        } else {
            None
        };
        Ok((g.scalar(sse), grads))
    });
    let mut sse = 0.0;
    let mut grads = Gradients::default();
    for part in parts {
        let (s, gr) = part?;
        sse += s;
        if let Some(gr) = gr {
            grads.add_scaled(&gr, 1.0);
        }
    }
    Ok(BatchGradients {
        loss: sse * inv,
        sse,
        targets: n,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_channel, ScenarioConfig};
    use crate::patch::{apply_mask, draw_mask};

    fn micro() -> (ModelConfig, LwmParameters) {
        let cfg = ModelConfig::micro();
        let p = LwmParameters::init(&cfg, &mut seed::rng(1)).unwrap();
        (cfg, p)
    }

    fn micro_channel(seed_: u64) -> ChannelMatrix {
        generate_channel(&ScenarioConfig::default(), 4, 4, &mut seed::rng(seed_))
    }

    fn masked(seed_: u64, cfg: &ModelConfig) -> MaskedSample {
        let seq = patchify(&micro_channel(seed_), cfg.num_patches).unwrap();
        let mut rng = seed::rng(seed_ + 100);
        let spec = draw_mask(cfg.num_patches, 2, &mut rng).unwrap();
        let (input, targets) = apply_mask(&seq, &spec, &mut rng).unwrap();
        MaskedSample { input, targets }
    }

    #[test]
    fn cls_position_term_is_bias() {
        let (cfg, mut p) = micro();
        // zero the patch embedding so the output is the positional term only
        let lay = p.layout().clone();
        p.tensors_mut()[lay.emb_w].data_mut().fill(0.0);
        p.tensors_mut()[lay.emb_b].data_mut().fill(0.0);
        let seq = patchify(&micro_channel(0), cfg.num_patches).unwrap();
        let mut g = Graph::new();
        let x = embed_inputs(&mut g, &p, &seq, None).unwrap();
        let v = g.value(x);
        let d = cfg.d_model;
        assert_eq!(&v[..d], p.tensor(lay.pos_b).data());

        let w = p.tensor(lay.pos_w).data();
        let w_ones: Vec<f64> = (0..d)
            .map(|r| w[r * cfg.patch_len..(r + 1) * cfg.patch_len].iter().sum())
            .collect();
        for i in 2..=cfg.num_patches {
            for c in 0..d {
                let diff = v[i * d + c] - v[d + c];
                assert!((diff - (i as f64 - 1.0) * w_ones[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let (cfg, mut p) = micro();
        let lay = p.layout().clone();
        for [q, k, _] in &lay.layers[0].heads {
            p.tensors_mut()[*q].data_mut().fill(0.0);
            p.tensors_mut()[*k].data_mut().fill(0.0);
        }
        let (_, cap) = capture_attention(&micro_channel(3), &p).unwrap();
        let n = cfg.seq_len();
        for h in 0..cfg.heads {
            assert!(cap.map(0, h).iter().all(|&a| (a - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn embedding_shapes() {
        let (cfg, p) = micro();
        let out = forward_embed(&micro_channel(0), &p).unwrap();
        assert_eq!(out.rows(), cfg.seq_len());
        assert_eq!(out.cls().len(), cfg.d_model);
        assert_eq!(out.channel().len(), cfg.num_patches * cfg.d_model);
        assert_eq!(out, forward_embed(&micro_channel(0), &p).unwrap());
    }

    #[test]
    fn wrong_channel_shape_is_rejected() {
        let (_, p) = micro();
        let ch = generate_channel(&ScenarioConfig::default(), 4, 8, &mut seed::rng(0));
        assert!(forward_embed(&ch, &p).is_err());
    }

    #[test]
    fn zero_decoder_loss_is_target_energy() {
        let (cfg, mut p) = micro();
        let dec = p.layout().dec;
        p.tensors_mut()[dec].data_mut().fill(0.0);
        let batch = vec![masked(1, &cfg), masked(2, &cfg)];
        let mut g = Graph::new();
        let loss = pretrain_loss(&mut g, &p, &batch, None).unwrap();
        let energy: f64 = batch
            .iter()
            .flat_map(|s| s.targets.values())
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let n: usize = batch.iter().map(|s| s.targets.len()).sum();
        assert!((g.scalar(loss) - energy / n as f64).abs() < 1e-12);
    }

    #[test]
    fn per_sample_and_single_graph_agree() {
        let (cfg, p) = micro();
        let batch: Vec<_> = (0..3).map(|i| masked(i, &cfg)).collect();
        let seeds = [11, 12, 13];
        let mut g = Graph::new();
        let loss = pretrain_loss(&mut g, &p, &batch, Some(&seeds)).unwrap();
        let whole = g.backward(loss).unwrap();
        let split = pretrain_batch_grads(&p, &batch, Some(&seeds), true).unwrap();
        assert!((g.scalar(loss) - split.loss).abs() < 1e-12);
        for (slot, gw) in whole.iter() {
            let gs = split.grads.get(slot).unwrap();
            for (a, b) in gw.iter().zip(gs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_targets_are_rejected() {
        let (cfg, p) = micro();
        let mut s = masked(0, &cfg);
        s.targets.clear();
        assert!(pretrain_batch_grads(&p, &[s], None, false).is_err());
        assert!(pretrain_batch_grads(&p, &[], None, false).is_err());
    }
}
