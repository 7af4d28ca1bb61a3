//! Pre-LN encoder-decoder transformer whose feed-forward layers are sums of
//! individually maskable key-value memory cells.
//!
//! Feed-forward layers are numbered encoder first: layer ids
//! `0..n_enc_layers` are encoder layers, the rest decoder layers.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{
    log_softmax, AttentionShape, FeedForwardNodes, Gradients, Graph, NodeId, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Number of memory cells per feed-forward layer.
    pub d_ff: usize,
    pub dropout_p: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 44,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            dropout_p: 0.1,
            max_seq_len: 24,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room for symbols", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        Ok(())
    }

    pub fn n_ff_layers(&self) -> usize {
        self.n_enc_layers + self.n_dec_layers
    }

    pub fn n_cells(&self) -> usize {
        self.n_ff_layers() * self.d_ff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter tensor; decides what each training stage may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Attention,
    LayerNorm,
    FfKeys,
    FfKeyBias,
    FfValues,
    FfValueBias,
    Output,
}

impl ParamKind {
    /// Parameters owned by exactly one memory cell each.
    pub fn is_cell(self) -> bool {
        matches!(self, ParamKind::FfKeys | ParamKind::FfKeyBias | ParamKind::FfValues)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Feed-forward layer id for cell parameters.
    pub ff_layer: Option<usize>,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FfParams {
    pub keys: ParamId,
    pub key_bias: ParamId,
    pub values: ParamId,
    pub value_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm_attn: NormParams,
    attn: AttnParams,
    norm_ff: NormParams,
    ff: FfParams,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm_self: NormParams,
    self_attn: AttnParams,
    norm_cross: NormParams,
    cross_attn: AttnParams,
    norm_ff: NormParams,
    ff: FfParams,
}

/// Per-layer mask vectors over memory cells, one per feed-forward layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMasks(pub Vec<Vec<f64>>);

impl LayerMasks {
    pub fn filled(config: &ModelConfig, v: f64) -> Self {
        Self(vec![vec![v; config.d_ff]; config.n_ff_layers()])
    }

    pub fn ones(config: &ModelConfig) -> Self {
        Self::filled(config, 1.0)
    }

    pub fn from_bits(bits: &[Vec<bool>]) -> Self {
        Self(
            bits.iter()
                .map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.0
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.0.len() != config.n_ff_layers() || self.0.iter().any(|l| l.len() != config.d_ff) {
            return Err(Error::Config(format!(
                "expected {} masks of length {}",
                config.n_ff_layers(),
                config.d_ff
            )));
        }
        Ok(())
    }

    /// Records the masks as constant graph leaves.
    pub fn to_nodes(&self, g: &mut Graph) -> Vec<NodeId> {
        self.0
            .iter()
            .map(|m| g.constant(Array2::from_shape_vec((1, m.len()), m.clone()).unwrap()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    Off,
    All,
    /// Drop feed-forward hidden activations only.
    FfOnly,
}

/// Seeded dropout noise source. Two instances with the same seed draw the
/// same keep-masks for the same sequence of forward passes.
#[derive(Debug, Clone)]
pub struct Dropout {
    mode: DropoutMode,
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Self::new(DropoutMode::Off, 0.0, 0)
    }

    pub fn new(mode: DropoutMode, p: f64, seed: u64) -> Self {
        Self {
            mode,
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> DropoutMode {
        self.mode
    }

    fn sample(&mut self, rows: usize, cols: usize) -> Tensor {
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        Array2::from_shape_simple_fn((rows, cols), || {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
    }

    fn ff_hidden(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        match self.mode {
            DropoutMode::All | DropoutMode::FfOnly if self.p > 0.0 => Some(self.sample(rows, cols)),
            _ => None,
        }
    }

    fn residual(&mut self, rows: usize, cols: usize) -> Option<Tensor> {
        match self.mode {
            DropoutMode::All if self.p > 0.0 => Some(self.sample(rows, cols)),
            _ => None,
        }
    }
}

/// Teacher-forced next-token distributions, one row per target position.
#[derive(Debug, Clone)]
pub struct PredictionDistribution {
    pub probs: Tensor,
    pub log_probs: Tensor,
    /// 1 for real target positions, 0 for padding.
    pub weights: Vec<f64>,
}

/// Graph leaves standing for the model's parameters.
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradient per parameter; `None` for frozen ones.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.nodes.iter().map(|&n| grads.take(n)).collect()
    }
}

/// One feed-forward layer viewed as `N` key-value memory cells.
#[derive(Debug, Clone, Copy)]
pub struct MaskedFeedForward<'a> {
    pub layer_id: usize,
    /// `N × d_model`; row `i` is the key of cell `i`.
    pub keys: &'a Tensor,
    /// `1 × N`.
    pub key_bias: &'a Tensor,
    /// `d_model × N`; column `i` is the value of cell `i`.
    pub values: &'a Tensor,
    /// `1 × d_model`, shared by all cells.
    pub value_bias: &'a Tensor,
}

impl MaskedFeedForward<'_> {
    pub fn n_cells(&self) -> usize {
        self.keys.nrows()
    }

    /// `Σ_i m_i · values[:, i] · relu(keys[i] · x + key_bias_i) + value_bias`.
    pub fn apply(&self, x: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
        let d = self.keys.ncols();
        if x.len() != d || mask.len() != self.n_cells() {
            return Err(Error::Config(format!(
                "feed-forward layer {} expects x of length {d} and mask of length {}, got {} and {}",
                self.layer_id,
                self.n_cells(),
                x.len(),
                mask.len()
            )));
        }
        let mut out: Vec<f64> = self.value_bias.row(0).to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let a: f64 = self
                .keys
                .row(i)
                .iter()
                .zip(x)
                .map(|(k, x)| k * x)
                .sum::<f64>()
                + self.key_bias[[0, i]];
            let h = a.max(0.0);
            for (o, v) in out.iter_mut().zip(self.values.column(i)) {
                *o += m * v * h;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: NormParams,
    decoder: Vec<DecoderLayer>,
    dec_norm: NormParams,
    out_w: ParamId,
    out_b: ParamId,
    positions: Tensor,
}

fn sinusoidal(max_len: usize, d: usize) -> Tensor {
    Array2::from_shape_fn((max_len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, kind: ParamKind, ff_layer: Option<usize>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name,
            kind,
            ff_layer,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    fn uniform(&mut self, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || self.rng.random_range(-a..a))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), ParamKind::LayerNorm, None, Array2::ones((1, d))),
            bias: self.add(format!("{prefix}.bias"), ParamKind::LayerNorm, None, Array2::zeros((1, d))),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let w = |b: &mut Self, n: &str| {
            let v = b.uniform(d, d, d, d);
            b.add(format!("{prefix}.{n}"), ParamKind::Attention, None, v)
        };
        let wq = w(self, "wq");
        let wk = w(self, "wk");
        let wv = w(self, "wv");
        let wo = w(self, "wo");
        let mut bias = |n: &str| {
            self.add(format!("{prefix}.{n}"), ParamKind::Attention, None, Array2::zeros((1, d)))
        };
        AttnParams {
            wq,
            bq: bias("bq"),
            wk,
            bk: bias("bk"),
            wv,
            bv: bias("bv"),
            wo,
            bo: bias("bo"),
        }
    }

    fn ff(&mut self, prefix: &str, layer: usize, d: usize, n: usize) -> FfParams {
        let keys = self.uniform(n, d, d, n);
        let values = self.uniform(d, n, n, d);
        FfParams {
            keys: self.add(format!("{prefix}.keys"), ParamKind::FfKeys, Some(layer), keys),
            key_bias: self.add(
                format!("{prefix}.key_bias"),
                ParamKind::FfKeyBias,
                Some(layer),
                Array2::zeros((1, n)),
            ),
            values: self.add(format!("{prefix}.values"), ParamKind::FfValues, Some(layer), values),
            value_bias: self.add(
                format!("{prefix}.value_bias"),
                ParamKind::FfValueBias,
                Some(layer),
                Array2::zeros((1, d)),
            ),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let n = config.d_ff;
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let embed_v = Array2::from_shape_simple_fn((config.vocab_size, d), || normal.sample(&mut b.rng));
        let embed = b.add("embed".into(), ParamKind::Embedding, None, embed_v);
        let mut encoder = Vec::new();
        for l in 0..config.n_enc_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                attn: b.attn(&format!("{p}.attn"), d),
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.ff(&format!("{p}.ff"), l, d, n),
            });
        }
        let enc_norm = b.norm("enc.norm", d);
        let mut decoder = Vec::new();
        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                norm_self: b.norm(&format!("{p}.norm_self"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                ff: b.ff(&format!("{p}.ff"), config.n_enc_layers + l, d, n),
            });
        }
        let dec_norm = b.norm("dec.norm", d);
        let out_wv = b.uniform(d, config.vocab_size, d, config.vocab_size);
        let out_w = b.add("out.w".into(), ParamKind::Output, None, out_wv);
        let out_b = b.add(
            "out.b".into(),
            ParamKind::Output,
            None,
            Array2::zeros((1, config.vocab_size)),
        );
        let positions = sinusoidal(config.max_seq_len, d);
        Ok(Self {
            config,
            params: b.params,
            embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks exactly the parameters for which `f` returns true as trainable.
    pub fn set_trainable(&mut self, f: impl Fn(ParamKind) -> bool) {
        for p in &mut self.params {
            p.trainable = f(p.kind);
        }
    }

    /// Freezes everything except per-cell feed-forward parameters.
    pub fn train_cells_only(&mut self) {
        self.set_trainable(ParamKind::is_cell);
    }

    pub fn ff_params(&self, layer: usize) -> FfParams {
        let n_enc = self.config.n_enc_layers;
        if layer < n_enc {
            self.encoder[layer].ff
        } else {
            self.decoder[layer - n_enc].ff
        }
    }

    pub fn ff_layer(&self, layer: usize) -> MaskedFeedForward<'_> {
        let p = self.ff_params(layer);
        MaskedFeedForward {
            layer_id: layer,
            keys: &self.params[p.keys.0].value,
            key_bias: &self.params[p.key_bias.0].value,
            values: &self.params[p.values.0].value,
            value_bias: &self.params[p.value_bias.0].value,
        }
    }

    pub fn embedding(&self) -> &Tensor {
        &self.params[self.embed.0].value
    }

    pub(crate) fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Adds one leaf per parameter; trainable parameters require gradients.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Like `bind`, but no parameter requires a gradient.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.params.iter().map(|p| g.leaf(p.value.clone(), false)).collect(),
        }
    }

    fn check_batch(&self, batch: &Batch, n_masks: usize) -> Result<()> {
        if n_masks != self.config.n_ff_layers() {
            return Err(Error::Config(format!(
                "got {n_masks} masks for {} feed-forward layers",
                self.config.n_ff_layers()
            )));
        }
        if batch.src_len > self.config.max_seq_len || batch.tgt_len > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.src_len.max(batch.tgt_len),
                self.config.max_seq_len
            )));
        }
        let v = self.config.vocab_size;
        if let Some(t) = batch.src.iter().chain(&batch.tgt_in).chain(&batch.tgt_out).find(|&&t| t >= v) {
            return Err(Error::Input(format!("token id {t} >= vocab_size {v}")));
        }
        Ok(())
    }

    fn embed_graph(&self, g: &mut Graph, b: &Bound, ids: &[usize], len: usize, drop: &mut Dropout) -> NodeId {
        let d = self.config.d_model;
        let e = g.gather(b.node(self.embed), ids);
        let e = g.scale(e, (d as f64).sqrt());
        let rows = ids.len();
        let pe = Array2::from_shape_fn((rows, d), |(r, c)| self.positions[[r % len, c]]);
        let x = g.add_const(e, &pe);
        match drop.residual(rows, d) {
            Some(k) => g.dropout(x, k),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        p: &AttnParams,
        x: NodeId,
        kv: NodeId,
        shape: AttentionShape,
        key_pad: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> NodeId {
        let q = g.linear(x, b.node(p.wq), b.node(p.bq));
        let k = g.linear(kv, b.node(p.wk), b.node(p.bk));
        let v = g.linear(kv, b.node(p.wv), b.node(p.bv));
        let o = g.attention(q, k, v, shape, key_pad);
        let o = g.linear(o, b.node(p.wo), b.node(p.bo));
        let rows = g.value(o).nrows();
        match drop.residual(rows, self.config.d_model) {
            Some(keep) => g.dropout(o, keep),
            None => o,
        }
    }

    fn ff_block(&self, g: &mut Graph, b: &Bound, p: &FfParams, x: NodeId, mask: NodeId, drop: &mut Dropout) -> NodeId {
        let rows = g.value(x).nrows();
        let hidden_drop = drop.ff_hidden(rows, self.config.d_ff);
        let nodes = FeedForwardNodes {
            keys: b.node(p.keys),
            key_bias: b.node(p.key_bias),
            values: b.node(p.values),
            value_bias: b.node(p.value_bias),
        };
        let y = g.masked_feed_forward(x, nodes, mask, hidden_drop);
        match drop.residual(rows, self.config.d_model) {
            Some(keep) => g.dropout(y, keep),
            None => y,
        }
    }

    fn norm(&self, g: &mut Graph, b: &Bound, p: &NormParams, x: NodeId) -> NodeId {
        g.layer_norm(x, b.node(p.gain), b.node(p.bias))
    }

    /// Records the full teacher-forced forward pass and returns the logits
    /// node (`batch.size * batch.tgt_len` rows).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Batch,
        masks: &[NodeId],
        drop: &mut Dropout,
    ) -> Result<NodeId> {
        self.check_batch(batch, masks.len())?;
        let n_enc = self.config.n_enc_layers;
        let heads = self.config.n_heads;

        let mut x = self.embed_graph(g, b, &batch.src, batch.src_len, drop);
        let self_shape = AttentionShape {
            batch: batch.size,
            q_len: batch.src_len,
            k_len: batch.src_len,
            heads,
            causal: false,
        };
        for (l, layer) in self.encoder.iter().enumerate() {
            let h = self.norm(g, b, &layer.norm_attn, x);
            let a = self.attention_block(g, b, &layer.attn, h, h, self_shape, Some(&batch.src_pad), drop);
            x = g.add(x, a);
            let h = self.norm(g, b, &layer.norm_ff, x);
            let f = self.ff_block(g, b, &layer.ff, h, masks[l], drop);
            x = g.add(x, f);
        }
        let memory = self.norm(g, b, &self.enc_norm, x);

        let mut y = self.embed_graph(g, b, &batch.tgt_in, batch.tgt_len, drop);
        let causal = AttentionShape {
            batch: batch.size,
            q_len: batch.tgt_len,
            k_len: batch.tgt_len,
            heads,
            causal: true,
        };
        let cross = AttentionShape {
            batch: batch.size,
            q_len: batch.tgt_len,
            k_len: batch.src_len,
            heads,
            causal: false,
        };
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = self.norm(g, b, &layer.norm_self, y);
            let a = self.attention_block(g, b, &layer.self_attn, h, h, causal, None, drop);
            y = g.add(y, a);
            let h = self.norm(g, b, &layer.norm_cross, y);
            let a = self.attention_block(
                g,
                b,
                &layer.cross_attn,
                h,
                memory,
                cross,
                Some(&batch.src_pad),
                drop,
            );
            y = g.add(y, a);
            let h = self.norm(g, b, &layer.norm_ff, y);
            let f = self.ff_block(g, b, &layer.ff, h, masks[n_enc + l], drop);
            y = g.add(y, f);
        }
        let h = self.norm(g, b, &self.dec_norm, y);
        Ok(g.linear(h, b.node(self.out_w), b.node(self.out_b)))
    }

    /// Teacher-forced per-position next-token distributions.
    pub fn forward(&self, batch: &Batch, masks: &LayerMasks, drop: &mut Dropout) -> Result<PredictionDistribution> {
        masks.check(&self.config)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let mask_nodes = masks.to_nodes(&mut g);
        let logits = self.forward_graph(&mut g, &b, batch, &mask_nodes, drop)?;
        let (probs, log_probs) = log_softmax(g.value(logits));
        Ok(PredictionDistribution {
            probs,
            log_probs,
            weights: batch.tgt_weight.clone(),
        })
    }

    /// Mean token cross-entropy of `batch`.
    pub fn loss(&self, batch: &Batch, masks: &LayerMasks, drop: &mut Dropout) -> Result<f64> {
        let p = self.forward(batch, masks, drop)?;
        let total: f64 = p.weights.iter().sum();
        let nll: f64 = p
            .weights
            .iter()
            .zip(&batch.tgt_out)
            .enumerate()
            .filter(|(_, (w, _))| **w != 0.0)
            .map(|(r, (w, &t))| -w * p.log_probs[[r, t]])
            .sum();
        Ok(nll / total)
    }

    /// `θ ← θ − update`.
    pub fn apply_update(&mut self, id: ParamId, update: &Tensor) {
        self.params[id.0].value -= update;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| StoredTensor {
                    name: p.name.clone(),
                    shape: [p.value.nrows(), p.value.ncols()],
                    data: p.value.iter().copied().collect(),
                })
                .collect(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "{}: unsupported checkpoint format_version {}",
                path.display(),
                ckpt.format_version
            )));
        }
        let mut model = Model::new(ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Input(format!("{}: parameter count mismatch", path.display())));
        }
        for (p, s) in model.params.iter_mut().zip(ckpt.params) {
            if p.name != s.name || p.value.dim() != (s.shape[0], s.shape[1]) {
                return Err(Error::Input(format!(
                    "{}: parameter {} does not match the configuration",
                    path.display(),
                    s.name
                )));
            }
            p.value = Array2::from_shape_vec((s.shape[0], s.shape[1]), s.data)
                .map_err(|e| Error::Input(e.to_string()))?;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: [usize; 2],
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: Vec<StoredTensor>,
}

// Internal accessors used by the incremental decoder.
impl Model {
    pub(crate) fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn out_params(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }
}

/// Borrowed view of the pieces the incremental decoder needs.
pub(crate) struct LayerView {
    pub norms: Vec<(ParamId, ParamId)>,
    pub attns: Vec<[ParamId; 8]>,
    pub ff: FfParams,
}

impl Model {
    pub(crate) fn encoder_views(&self) -> Vec<LayerView> {
        self.encoder
            .iter()
            .map(|l| LayerView {
                norms: vec![(l.norm_attn.gain, l.norm_attn.bias), (l.norm_ff.gain, l.norm_ff.bias)],
                attns: vec![attn_ids(&l.attn)],
                ff: l.ff,
            })
            .collect()
    }

    pub(crate) fn decoder_views(&self) -> Vec<LayerView> {
        self.decoder
            .iter()
            .map(|l| LayerView {
                norms: vec![
                    (l.norm_self.gain, l.norm_self.bias),
                    (l.norm_cross.gain, l.norm_cross.bias),
                    (l.norm_ff.gain, l.norm_ff.bias),
                ],
                attns: vec![attn_ids(&l.self_attn), attn_ids(&l.cross_attn)],
                ff: l.ff,
            })
            .collect()
    }

    pub(crate) fn final_norms(&self) -> ((ParamId, ParamId), (ParamId, ParamId)) {
        (
            (self.enc_norm.gain, self.enc_norm.bias),
            (self.dec_norm.gain, self.dec_norm.bias),
        )
    }
}

fn attn_ids(a: &AttnParams) -> [ParamId; 8] {
    [a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::EncodedPair;
    use ndarray::array;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 6,
            dropout_p: 0.1,
            max_seq_len: 8,
        }
    }

    fn batch() -> Batch {
        let pairs = [
            EncodedPair {
                src: vec![4, 5, 6],
                tgt: vec![6, 5, 4],
            },
            EncodedPair {
                src: vec![7, 8],
                tgt: vec![8, 7],
            },
        ];
        Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn masked_ff_hand_example() {
        let keys = array![[1.0, 0.0], [0.0, 1.0]];
        let kb = array![[0.0, 0.0]];
        let values = array![[1.0, 0.0], [0.0, 1.0]];
        let vb = array![[0.0, 0.0]];
        let ff = MaskedFeedForward {
            layer_id: 0,
            keys: &keys,
            key_bias: &kb,
            values: &values,
            value_bias: &vb,
        };
        assert_eq!(ff.apply(&[2.0, 3.0], &[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(ff.apply(&[2.0, 3.0], &[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        assert!(matches!(ff.apply(&[2.0], &[1.0, 0.0]), Err(Error::Config(_))));
        assert!(ff.apply(&[2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_mask_leaves_only_value_bias() {
        let mut model = Model::new(tiny_config(), 1).unwrap();
        let vb = model.ff_params(0).value_bias;
        model.param_mut(vb).value.fill(0.25);
        let ff = model.ff_layer(0);
        let x = vec![0.3; 8];
        assert_eq!(ff.apply(&x, &[0.0; 6]).unwrap(), vec![0.25; 8]);
    }

    #[test]
    fn ones_mask_equals_plain_feed_forward() {
        let model = Model::new(tiny_config(), 2).unwrap();
        let ff = model.ff_layer(1);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        // unmasked reference: W2 · relu(W1 x + b1) + b2
        let xv = Array2::from_shape_vec((8, 1), x.clone()).unwrap();
        let h = (ff.keys.dot(&xv) + &ff.key_bias.t()).mapv(|v| v.max(0.0));
        let y = ff.values.dot(&h) + &ff.value_bias.t();
        let masked = ff.apply(&x, &[1.0; 6]).unwrap();
        for (a, b) in masked.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_is_normalized_deterministic_and_finite() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let masks = LayerMasks::ones(model.config());
        let b = batch();
        let p1 = model.forward(&b, &masks, &mut Dropout::off()).unwrap();
        let p2 = model.forward(&b, &masks, &mut Dropout::off()).unwrap();
        assert_eq!(p1.probs, p2.probs);
        for row in p1.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let loss = model.loss(&b, &masks, &mut Dropout::off()).unwrap();
        assert!(loss.is_finite());
        // ff-only dropout with p = 0 is the same as no dropout
        let p3 = model
            .forward(&b, &masks, &mut Dropout::new(DropoutMode::FfOnly, 0.0, 9))
            .unwrap();
        assert_eq!(p1.probs, p3.probs);
        let p4 = model
            .forward(&b, &masks, &mut Dropout::new(DropoutMode::FfOnly, 0.5, 9))
            .unwrap();
        assert_ne!(p1.probs, p4.probs);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let masks = LayerMasks::ones(model.config());
        let long = EncodedPair {
            src: vec![4; 9],
            tgt: vec![4],
        };
        let b = Batch::from_pairs(&[&long]);
        assert!(matches!(
            model.forward(&b, &masks, &mut Dropout::off()),
            Err(Error::Input(_))
        ));
        let oov = EncodedPair {
            src: vec![40],
            tgt: vec![4],
        };
        assert!(model
            .forward(&Batch::from_pairs(&[&oov]), &masks, &mut Dropout::off())
            .is_err());
        let short = LayerMasks(vec![vec![1.0; 6]]);
        assert!(matches!(
            model.forward(&batch(), &short, &mut Dropout::off()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn padding_does_not_change_loss() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let masks = LayerMasks::ones(model.config());
        let b = batch();
        let base = model.loss(&b, &masks, &mut Dropout::off()).unwrap();
        let padded = model
            .loss(&b.with_extra_padding(2, 2), &masks, &mut Dropout::off())
            .unwrap();
        assert!((base - padded).abs() < 1e-12, "{base} vs {padded}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        for (a, b) in back.params().iter().zip(model.params()) {
            assert_eq!(a.value, b.value);
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\":1"));
    }
}
