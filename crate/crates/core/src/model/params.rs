use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

/// Slot indices of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlots {
    /// `[W_Q, W_K, W_V]` per head.
    pub heads: Vec<[usize; 3]>,
    pub w_o: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

impl LayerSlots {
    pub fn all(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.heads.iter().flatten().copied().collect();
        v.extend([self.w_o, self.w_1, self.b_1, self.w_2, self.b_2]);
        v
    }
}

/// Where each named tensor sits in [`LwmParameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub cls: usize,
    pub emb_w: usize,
    pub emb_b: usize,
    pub pos_w: usize,
    pub pos_b: usize,
    pub layers: Vec<LayerSlots>,
    pub dec: usize,
}

/// Every trainable tensor of the model, in a fixed order with stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct LwmParameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

fn spec(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let (l, d, dh, ff) = (cfg.patch_len, cfg.d_model, cfg.head_dim(), cfg.d_ff);
    let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, dims: Vec<usize>| {
        entries.push((name, dims));
        entries.len() - 1
    };
    let cls = push("cls".into(), vec![l]);
    let emb_w = push("embed.W".into(), vec![d, l]);
    let emb_b = push("embed.b".into(), vec![d]);
    let pos_w = push("pos.W".into(), vec![d, l]);
    let pos_b = push("pos.b".into(), vec![d]);
    let mut layers = Vec::with_capacity(cfg.layers);
    for li in 0..cfg.layers {
        let heads = (0..cfg.heads)
            .map(|h| ["W_Q", "W_K", "W_V"].map(|m| push(format!("layer.{li}.head.{h}.{m}"), vec![d, dh])))
            .collect();
        let w_o = push(format!("layer.{li}.W_O"), vec![cfg.heads * dh, d]);
        let w_1 = push(format!("layer.{li}.ffn.W_1"), vec![d, ff]);
        let b_1 = push(format!("layer.{li}.ffn.b_1"), vec![ff]);
        let w_2 = push(format!("layer.{li}.ffn.W_2"), vec![ff, d]);
        let b_2 = push(format!("layer.{li}.ffn.b_2"), vec![d]);
        layers.push(LayerSlots {
            heads,
            w_o,
            w_1,
            b_1,
            w_2,
            b_2,
        });
    }
    let dec = push("decoder.W_dec".into(), vec![l, d]);
    (
        entries,
        Layout {
            cls,
            emb_w,
            emb_b,
            pos_w,
            pos_b,
            layers,
            dec,
        },
    )
}

fn fan_in(name: &str, dims: &[usize]) -> usize {
    // embed/pos/decoder store the output dimension first.
    if name.starts_with("embed.") || name.starts_with("pos.") || name.starts_with("decoder.") {
        dims[dims.len() - 1]
    } else {
        dims[0]
    }
}

impl LwmParameters {
    /// Weights `~ U(±1/√fan_in)`, biases zero, CLS filled with one
    /// `c ~ N(0, 1/L)`. All tensors are trainable.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (entries, layout) = spec(cfg);
        let c = Normal::new(0.0, (1.0 / cfg.patch_len as f64).sqrt())
            .unwrap()
            .sample(rng);
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (name, dims)) in entries.into_iter().enumerate() {
            let n: usize = dims.iter().product();
            let data = if i == layout.cls {
                vec![c; n]
            } else if dims.len() == 1 {
                vec![0.0; n]
            } else {
                let bound = 1.0 / (fan_in(&name, &dims) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            tensors.push(Tensor::new(dims, data)?.with_grad());
            names.push(name);
        }
        Ok(Self {
            config: *cfg,
            names,
            tensors,
            layout,
        })
    }

    /// Rebuilds from named tensors; every expected name must be present with
    /// the expected shape.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let (entries, layout) = spec(cfg);
        let mut map: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, dims) in entries {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {name} has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
            tensors.push(t.with_grad());
            names.push(name);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            config: *cfg,
            names,
            tensors,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Freezes everything, then unfreezes the last `k` encoder blocks.
    pub fn train_only_last_layers(&mut self, k: usize) {
        for t in &mut self.tensors {
            t.requires_grad = false;
        }
        let e = self.layout.layers.len();
        for layer in &self.layout.layers[e.saturating_sub(k)..] {
            for slot in layer.all() {
                self.tensors[slot].requires_grad = true;
            }
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.requires_grad = on;
        }
    }

    /// Rounds every parameter to `f32` precision.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

impl ParamSet for LwmParameters {
    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn tensor_count_matches_closed_form() {
        for cfg in [ModelConfig::micro(), ModelConfig::full()] {
            let p = LwmParameters::init(&cfg, &mut seed::rng(0)).unwrap();
            assert_eq!(p.scalar_count(), cfg.param_count());
        }
    }

    #[test]
    fn cls_entries_start_equal() {
        let p = LwmParameters::init(&ModelConfig::full(), &mut seed::rng(9)).unwrap();
        let cls = p.by_name("cls").unwrap().data();
        assert!(cls.iter().all(|&v| v == cls[0]));
        assert_eq!(cls.len(), 16);
    }

    #[test]
    fn stable_names_and_shapes() {
        let p = LwmParameters::init(&ModelConfig::full(), &mut seed::rng(0)).unwrap();
        assert_eq!(p.by_name("layer.3.head.7.W_Q").unwrap().dims(), &[64, 5]);
        assert_eq!(p.by_name("layer.11.W_O").unwrap().dims(), &[60, 64]);
        assert_eq!(p.by_name("decoder.W_dec").unwrap().dims(), &[16, 64]);
        assert!(p.by_name("layer.12.W_O").is_none());
    }

    #[test]
    fn init_bounds() {
        let p = LwmParameters::init(&ModelConfig::micro(), &mut seed::rng(0)).unwrap();
        let w = p.by_name("layer.0.ffn.W_2").unwrap();
        let bound = 1.0 / 16f64.sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(p.by_name("layer.0.ffn.b_1").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn named_round_trip() {
        let cfg = ModelConfig::micro();
        let p = LwmParameters::init(&cfg, &mut seed::rng(2)).unwrap();
        let named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        let q = LwmParameters::from_named(&cfg, named.clone()).unwrap();
        assert_eq!(p, q);
        let mut missing = named;
        missing.pop();
        assert!(LwmParameters::from_named(&cfg, missing).is_err());
    }

    #[test]
    fn last_layer_freezing() {
        let mut p = LwmParameters::init(&ModelConfig::micro(), &mut seed::rng(0)).unwrap();
        p.train_only_last_layers(1);
        let trainable: Vec<_> = p
            .names()
            .iter()
            .zip(p.tensors())
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect();
        assert!(trainable.iter().all(|n| n.starts_with("layer.1.")));
        assert_eq!(trainable.len(), 2 * 3 + 5);
    }
}
