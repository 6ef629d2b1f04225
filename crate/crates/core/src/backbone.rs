//! Miniature ViT-style encoder: patch/token embedding with a class token,
//! a stack of pre-norm attention+MLP blocks, per-parameter freezing, and the
//! prompt-free query pass used for expert selection.
//!
//! Block internals follow the standard recipe: pre-norm ordering, fused
//! `D×D` query/key/value projections exposed per head as column blocks,
//! exact-erf GELU in the MLP, and a final layer norm. The class token is
//! always row 0 of the sequence, and prompt rows are appended after the
//! content tokens so that stays true at every depth.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::prompt::{ForwardPrompts, LayerPrompts, PromptVariant};
use crate::{checkpoint, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Square single-channel images cut into square patches.
    Grid { image_size: usize, patch_size: usize },
    /// Pre-tokenized input: `len` tokens of dimension `dim`.
    Tokens { len: usize, dim: usize },
}

impl InputSpec {
    pub fn token_len(&self) -> usize {
        match self {
            InputSpec::Grid {
                image_size,
                patch_size,
            } => {
                let g = image_size / patch_size;
                g * g
            }
            InputSpec::Tokens { len, .. } => *len,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            InputSpec::Grid { patch_size, .. } => patch_size * patch_size,
            InputSpec::Tokens { dim, .. } => *dim,
        }
    }

    /// Flat element count of one raw input sample.
    pub fn input_len(&self) -> usize {
        match self {
            InputSpec::Grid { image_size, .. } => image_size * image_size,
            InputSpec::Tokens { len, dim } => len * dim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub input: InputSpec,
    pub num_pretrain_classes: usize,
}

impl BackboneConfig {
    /// Desk-scale default: 6 layers, width 64, 4 heads, 8×8 inputs in 2×2
    /// patches (16 content tokens), deep enough for layer-range sweeps.
    pub fn desk_default() -> Self {
        BackboneConfig {
            num_layers: 6,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            input: InputSpec::Grid {
                image_size: 8,
                patch_size: 2,
            },
            num_pretrain_classes: 8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Sequence length after embedding: class token plus content tokens.
    pub fn seq_len(&self) -> usize {
        self.input.token_len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let InputSpec::Grid {
            image_size,
            patch_size,
        } = &self.input
        {
            if *patch_size == 0 || image_size % patch_size != 0 {
                return Err(Error::Config(format!(
                    "image_size {image_size} not divisible by patch_size {patch_size}"
                )));
            }
        }
        Ok(())
    }
}

struct Block {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
}

pub struct Backbone {
    cfg: BackboneConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    cls_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    out_gamma: Tensor,
    out_beta: Tensor,
}

const LN_EPS: f64 = 1e-6;

fn xavier(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -limit, limit, rng)
}

impl Backbone {
    /// Fresh trainable backbone with seed-determined initialization.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let td = cfg.input.token_dim();
        let hidden = d * cfg.mlp_ratio;
        let patch_w = xavier(&mut rng, td, d).trainable();
        let patch_b = Tensor::zeros(vec![d]).trainable();
        let cls_token = Tensor::uniform(vec![1, d], -0.02, 0.02, &mut rng).trainable();
        let pos_embed = Tensor::uniform(vec![cfg.seq_len(), d], -0.02, 0.02, &mut rng).trainable();
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                ln1_gamma: Tensor::full(vec![d], 1.0).trainable(),
                ln1_beta: Tensor::zeros(vec![d]).trainable(),
                wq: xavier(&mut rng, d, d).trainable(),
                wk: xavier(&mut rng, d, d).trainable(),
                wv: xavier(&mut rng, d, d).trainable(),
                wo: xavier(&mut rng, d, d).trainable(),
                ln2_gamma: Tensor::full(vec![d], 1.0).trainable(),
                ln2_beta: Tensor::zeros(vec![d]).trainable(),
                mlp_w1: xavier(&mut rng, d, hidden).trainable(),
                mlp_b1: Tensor::zeros(vec![hidden]).trainable(),
                mlp_w2: xavier(&mut rng, hidden, d).trainable(),
                mlp_b2: Tensor::zeros(vec![d]).trainable(),
            })
            .collect();
        Ok(Backbone {
            cfg,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            out_gamma: Tensor::full(vec![d], 1.0).trainable(),
            out_beta: Tensor::zeros(vec![d]).trainable(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), self.patch_w.clone()),
            ("patch_embed.bias".to_string(), self.patch_b.clone()),
            ("cls_token".to_string(), self.cls_token.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gamma", &b.ln1_gamma),
                ("ln1.beta", &b.ln1_beta),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("ln2.gamma", &b.ln2_gamma),
                ("ln2.beta", &b.ln2_beta),
                ("mlp.w1", &b.mlp_w1),
                ("mlp.b1", &b.mlp_b1),
                ("mlp.w2", &b.mlp_w2),
                ("mlp.b2", &b.mlp_b2),
            ] {
                out.push((format!("layers.{i}.{suffix}"), t.clone()));
            }
        }
        out.push(("out_norm.gamma".to_string(), self.out_gamma.clone()));
        out.push(("out_norm.beta".to_string(), self.out_beta.clone()));
        out
    }

    pub fn set_trainable(&self, trainable: bool) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(trainable);
        }
    }

    /// Idempotent: marks every parameter non-trainable.
    pub fn freeze(&self) {
        self.set_trainable(false);
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn num_trainable(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .count()
    }

    /// Checksum over the serialized parameter container (config included).
    pub fn checksum(&self) -> String {
        let meta = toml::to_string(&self.cfg).expect("config serializes");
        checkpoint::digest_hex(&meta, &self.named_params())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let meta = toml::to_string(&self.cfg).expect("config serializes");
        checkpoint::write(path, &meta, &self.named_params())
    }

    /// Loads a checkpoint; the result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::read(path)?;
        let cfg: BackboneConfig = toml::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let backbone = Backbone::init(cfg, 0)?;
        let mut own = backbone.named_params();
        own.sort_by(|a, b| a.0.cmp(&b.0));
        let mut loaded: Vec<(String, Tensor)> = params;
        loaded.sort_by(|a, b| a.0.cmp(&b.0));
        if own.len() != loaded.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                own.len(),
                loaded.len()
            )));
        }
        for ((name, dst), (got_name, src)) in own.iter().zip(&loaded) {
            if name != got_name || dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {name} {:?}, found {got_name} {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(&src.data());
        }
        backbone.freeze();
        Ok(backbone)
    }

    /// Raw input → constant token matrix `[token_len, token_dim]`.
    pub fn tokenize(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.cfg.input.input_len() {
            return Err(Error::Data(format!(
                "input has {} elements, spec wants {}",
                x.len(),
                self.cfg.input.input_len()
            )));
        }
        match &self.cfg.input {
            InputSpec::Grid {
                image_size,
                patch_size,
            } => {
                let (s, p) = (*image_size, *patch_size);
                let g = s / p;
                let mut tokens = Vec::with_capacity(g * g * p * p);
                for pr in 0..g {
                    for pc in 0..g {
                        for i in 0..p {
                            for j in 0..p {
                                tokens.push(x[(pr * p + i) * s + pc * p + j]);
                            }
                        }
                    }
                }
                Tensor::from_vec(vec![g * g, p * p], tokens)
            }
            InputSpec::Tokens { len, dim } => Tensor::from_vec(vec![*len, *dim], x.to_vec()),
        }
    }

    /// Class token at row 0, projected content tokens after it, plus the
    /// learned position embedding.
    pub fn embed(&self, tape: &Tape, x: &[f64]) -> Result<Tensor> {
        let tokens = self.tokenize(x)?;
        let projected = tape.add_row(&tape.matmul(&tokens, &self.patch_w)?, &self.patch_b)?;
        let seq = tape.concat_rows(&self.cls_token, &projected)?;
        tape.add(&seq, &self.pos_embed)
    }

    /// Multi-head attention of `layer_index` with separate query/key/value
    /// sources; the key/value sequence may be longer than the query one.
    pub fn msa(
        &self,
        tape: &Tape,
        h_q: &Tensor,
        h_k: &Tensor,
        h_v: &Tensor,
        layer_index: usize,
    ) -> Result<Tensor> {
        let block = self.blocks.get(layer_index).ok_or(Error::InvalidAxis {
            axis: layer_index,
            shape: vec![self.cfg.num_layers],
        })?;
        let d = self.cfg.embed_dim;
        for t in [h_q, h_k, h_v] {
            if t.rank() != 2 || t.shape()[1] != d {
                return Err(Error::ShapeMismatch {
                    op: "msa",
                    lhs: t.shape().to_vec(),
                    rhs: vec![d],
                });
            }
        }
        let q = tape.matmul(h_q, &block.wq)?;
        let k = tape.matmul(h_k, &block.wk)?;
        let v = tape.matmul(h_v, &block.wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged: Option<Tensor> = None;
        for head in 0..self.cfg.num_heads {
            let qh = tape.slice_cols(&q, head * dh, dh)?;
            let kh = tape.slice_cols(&k, head * dh, dh)?;
            let vh = tape.slice_cols(&v, head * dh, dh)?;
            let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale);
            let attn = tape.softmax(&scores, 1)?;
            let out = tape.matmul(&attn, &vh)?;
            merged = Some(match merged {
                None => out,
                Some(acc) => tape.concat_cols(&acc, &out)?,
            });
        }
        tape.matmul(&merged.expect("at least one head"), &block.wo)
    }

    /// One pre-norm block. Prompt-tuning injections extend the sequence (the
    /// prompt rows become tokens, like the class token); prefix-tuning
    /// injections extend only the key/value side, preserving the length.
    /// When a layer receives both prompts, the general one is applied first.
    pub fn forward_block(
        &self,
        tape: &Tape,
        h: &Tensor,
        layer_index: usize,
        injection: Option<(&LayerPrompts, PromptVariant)>,
    ) -> Result<Tensor> {
        let block = self.blocks.get(layer_index).ok_or(Error::InvalidAxis {
            axis: layer_index,
            shape: vec![self.cfg.num_layers],
        })?;
        let normed = tape.layernorm(h, &block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
        let (h_q, h_k, h_v, residual) = match injection {
            None => (normed.clone(), normed.clone(), normed.clone(), h.clone()),
            Some((prompts, PromptVariant::PromptTuning)) => {
                let mut extended = normed.clone();
                let mut residual = h.clone();
                for p in prompts.in_order() {
                    extended = tape.concat_rows(&extended, p)?;
                    residual = tape.concat_rows(&residual, p)?;
                }
                (extended.clone(), extended.clone(), extended, residual)
            }
            Some((prompts, PromptVariant::PrefixTuning)) => {
                let mut keys = normed.clone();
                let mut values = normed.clone();
                for p in prompts.in_order() {
                    let half = p.shape()[0] / 2;
                    let pk = tape.slice_rows(p, 0, half)?;
                    let pv = tape.slice_rows(p, half, half)?;
                    keys = tape.concat_rows(&pk, &keys)?;
                    values = tape.concat_rows(&pv, &values)?;
                }
                (normed, keys, values, h.clone())
            }
        };
        let attn = self.msa(tape, &h_q, &h_k, &h_v, layer_index)?;
        let mid = tape.add(&residual, &attn)?;
        let normed2 = tape.layernorm(&mid, &block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
        let hidden = tape.gelu(&tape.add_row(&tape.matmul(&normed2, &block.mlp_w1)?, &block.mlp_b1)?);
        let mlp = tape.add_row(&tape.matmul(&hidden, &block.mlp_w2)?, &block.mlp_b2)?;
        tape.add(&mid, &mlp)
    }

    /// Full forward pass; returns the final-normed sequence. The class-token
    /// feature is row 0.
    pub fn forward(&self, tape: &Tape, x: &[f64], prompts: Option<&ForwardPrompts>) -> Result<Tensor> {
        Ok(self.forward_with_lengths(tape, x, prompts)?.0)
    }

    /// Forward pass that also reports the sequence length after every block.
    pub fn forward_with_lengths(
        &self,
        tape: &Tape,
        x: &[f64],
        prompts: Option<&ForwardPrompts>,
    ) -> Result<(Tensor, Vec<usize>)> {
        if let Some(fp) = prompts {
            if fp.layers.len() != self.cfg.num_layers {
                return Err(Error::Config(format!(
                    "prompt plan covers {} layers, backbone has {}",
                    fp.layers.len(),
                    self.cfg.num_layers
                )));
            }
        }
        let mut h = self.embed(tape, x)?;
        let mut lengths = Vec::with_capacity(self.cfg.num_layers);
        for layer in 0..self.cfg.num_layers {
            let injection = prompts.and_then(|fp| {
                let lp = &fp.layers[layer];
                (!lp.is_empty()).then_some((lp, fp.variant))
            });
            h = self.forward_block(tape, &h, layer, injection)?;
            lengths.push(h.shape()[0]);
        }
        let out = tape.layernorm(&h, &self.out_gamma, &self.out_beta, LN_EPS)?;
        Ok((out, lengths))
    }

    /// Class-token feature of the prompted forward pass, as a `[1, D]` row.
    pub fn class_feature(&self, tape: &Tape, x: &[f64], prompts: Option<&ForwardPrompts>) -> Result<Tensor> {
        let out = self.forward(tape, x, prompts)?;
        tape.slice_rows(&out, 0, 1)
    }

    /// Query function: prompt-free forward through the frozen backbone,
    /// returning the class-token feature. Pure in (weights, x).
    pub fn query_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.is_frozen() {
            return Err(Error::Contract(
                "query features require a frozen backbone".into(),
            ));
        }
        let tape = Tape::inference();
        let out = self.forward(&tape, x, None)?;
        let d = self.cfg.embed_dim;
        let feature = out.data()[..d].to_vec();
        Ok(feature)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Supervised pretraining on an upstream class set. Trains the backbone in
/// place through a temporary linear head, which is discarded; labels must be
/// `0..num_classes`. The caller freezes the result.
pub fn pretrain(
    backbone: &Backbone,
    samples: &[Sample],
    num_classes: usize,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if samples.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    if backbone.is_frozen() {
        return Err(Error::Contract("pretraining requires a trainable backbone".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            num_classes,
        });
    }
    let d = backbone.config().embed_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let head_w = xavier(&mut rng, d, num_classes).trainable();
    let head_b = Tensor::zeros(vec![num_classes]).trainable();

    let mut params = backbone.named_params();
    params.push(("pretrain_head.weight".to_string(), head_w.clone()));
    params.push(("pretrain_head.bias".to_string(), head_b.clone()));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let mut logits_rows: Option<Tensor> = None;
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let s = &samples[idx];
                let feat = backbone.class_feature(&tape, &s.input, None)?;
                let row = tape.add_row(&tape.matmul(&feat, &head_w)?, &head_b)?;
                logits_rows = Some(match logits_rows {
                    None => row,
                    Some(acc) => tape.concat_rows(&acc, &row)?,
                });
                labels.push(s.label);
            }
            let loss = tape.cross_entropy_logits(&logits_rows.unwrap(), &labels)?;
            tape.backward(&loss)?;
            opt.step(&params)?;
            for (_, p) in &params {
                p.zero_grad();
            }
            epoch_loss += loss.item();
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let mut correct = 0usize;
    for s in samples {
        let tape = Tape::inference();
        let feat = backbone.class_feature(&tape, &s.input, None)?;
        let logits = tape.add_row(&tape.matmul(&feat, &head_w)?, &head_b)?;
        let data = logits.to_vec();
        let pred = argmax(&data);
        if pred == s.label {
            correct += 1;
        }
    }
    Ok(PretrainReport {
        epoch_losses,
        final_train_accuracy: 100.0 * correct as f64 / samples.len() as f64,
    })
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
