//! The three neural base learners: a feed-forward net on lifted features and
//! two sequence models over neighbor-embedding sequences.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout, dropout_backward, ensure_finite, max_pool, max_pool_backward, mean_pool, mean_pool_backward, relu,
    relu_backward, sigmoid, AttentionCache, Conv1d, Dense, LayerNorm, LayerNormCache, Mode, MultiHeadAttention,
};
use super::tensor::{ParamRef, ParamSet};
use crate::error::{Error, Result};

/// Row-blocked sample storage: sample `i` occupies rows
/// `i*rows_per_sample .. (i+1)*rows_per_sample`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    pub data: Array2<f64>,
    pub rows_per_sample: usize,
}

impl SampleMatrix {
    pub fn flat(data: Array2<f64>) -> Self {
        SampleMatrix {
            data,
            rows_per_sample: 1,
        }
    }

    pub fn sequences(data: Array2<f64>, seq_len: usize) -> Self {
        SampleMatrix {
            data,
            rows_per_sample: seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.data.nrows() / self.rows_per_sample
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn gather(&self, samples: &[usize]) -> SampleMatrix {
        let r = self.rows_per_sample;
        let mut data = Array2::zeros((samples.len() * r, self.width()));
        for (dst, &i) in samples.iter().enumerate() {
            data.slice_mut(s![dst * r..(dst + 1) * r, ..])
                .assign(&self.data.slice(s![i * r..(i + 1) * r, ..]));
        }
        SampleMatrix {
            data,
            rows_per_sample: r,
        }
    }
}

/// A binary classifier producing one logit per sample, with a hand-written
/// backward pass. Gradients are accumulated into a zeroed copy of the model.
pub trait BinaryNet: ParamSet + Clone + Send + Sync {
    type Cache;

    fn name(&self) -> &'static str;
    fn check_input(&self, x: &SampleMatrix) -> Result<()>;
    fn forward(&self, x: &SampleMatrix, mode: Mode<'_>) -> Result<(Array1<f64>, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, dlogits: &Array1<f64>, grad: &mut Self);
    fn zeros_like(&self) -> Self;

    /// Probabilities in inference mode.
    fn predict_proba(&self, x: &SampleMatrix) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.len());
        let idx: Vec<usize> = (0..x.len()).collect();
        for chunk in idx.chunks(256) {
            let (logits, _) = self.forward(&x.gather(chunk), Mode::Eval)?;
            out.extend(logits.iter().map(|&z| sigmoid(z)));
        }
        Ok(out)
    }
}

fn check_width(name: &str, x: &SampleMatrix, width: usize, rows_per_sample: usize) -> Result<()> {
    if x.width() != width || x.rows_per_sample != rows_per_sample {
        return Err(Error::Shape(format!(
            "{name} expects samples of {rows_per_sample}×{width}, got {}×{}",
            x.rows_per_sample,
            x.width()
        )));
    }
    Ok(())
}

fn logits_of(head_out: Array2<f64>) -> Array1<f64> {
    head_out.column(0).to_owned()
}

fn column(d: &Array1<f64>) -> Array2<f64> {
    d.view().insert_axis(ndarray::Axis(1)).to_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfnnConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout: f64,
}

impl Default for FfnnConfig {
    fn default() -> Self {
        FfnnConfig {
            hidden_dims: vec![128, 64],
            dropout: 0.2,
        }
    }
}

/// Dense ReLU layers with dropout after each hidden layer, then a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffnn {
    pub layers: Vec<Dense>,
    pub dropout: f64,
}

pub struct FfnnCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Ffnn {
    pub fn new(input_dim: usize, config: &FfnnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0,1)", config.dropout)));
        }
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(1);
        Ok(Ffnn {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
            dropout: config.dropout,
        })
    }

    pub fn head_mut(&mut self) -> &mut Dense {
        self.layers.last_mut().expect("at least one layer")
    }
}

impl ParamSet for Ffnn {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("ffnn.dense{i}"), &mut out);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.params_mut(&mut out);
        }
        out
    }
}

impl BinaryNet for Ffnn {
    type Cache = FfnnCache;

    fn name(&self) -> &'static str {
        "ffnn"
    }

    fn check_input(&self, x: &SampleMatrix) -> Result<()> {
        check_width("ffnn", x, self.layers[0].input_dim(), 1)
    }

    fn forward(&self, x: &SampleMatrix, mut mode: Mode<'_>) -> Result<(Array1<f64>, FfnnCache)> {
        self.check_input(x)?;
        let mut cache = FfnnCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            masks: Vec::new(),
        };
        let mut h = x.data.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            ensure_finite(&z, &format!("ffnn.dense{i}"))?;
            cache.inputs.push(h);
            if i == last {
                return Ok((logits_of(z), cache));
            }
            let (a, mask) = dropout(relu(&z), self.dropout, &mut mode);
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        unreachable!("loop returns at the head layer")
    }

    fn backward(&self, cache: &FfnnCache, dlogits: &Array1<f64>, grad: &mut Ffnn) {
        let last = self.layers.len() - 1;
        let mut d = self.layers[last].backward(
            cache.inputs[last].view(),
            column(dlogits).view(),
            &mut grad.layers[last],
        );
        for i in (0..last).rev() {
            d = dropout_backward(d, &cache.masks[i]);
            d = relu_backward(&cache.pre[i], &d);
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i]);
        }
    }

    fn zeros_like(&self) -> Self {
        Ffnn {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            heads: 8,
            model_dim: 128,
            ff_dim: 256,
            dropout: 0.1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm encoder block: `h + Attn(LN(h))`, then `h + FF(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    attn_mask: Option<Array2<f64>>,
    norm2: LayerNormCache,
    ff_in: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_hidden: Array2<f64>,
    ff_mask: Option<Array2<f64>>,
}

/// Transformer encoder over neighbor sequences (no positional encoding),
/// mean-pooled into a dense sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub seq_len: usize,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Dense,
}

pub struct TransformerCache {
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    pooled: Array2<f64>,
}

impl TransformerCache {
    /// Attention weights of every head in every block, in block order.
    pub fn attention_probs(&self) -> impl Iterator<Item = ArrayView2<'_, f64>> {
        self.blocks.iter().flat_map(|b| b.attn.probs())
    }
}

impl Transformer {
    pub fn new(config: &TransformerConfig, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let blocks = (0..config.layers)
            .map(|_| EncoderBlock {
                norm1: LayerNorm::new(d),
                attn: MultiHeadAttention::init(d, config.heads, rng),
                norm2: LayerNorm::new(d),
                ff1: Dense::init(d, config.ff_dim, rng),
                ff2: Dense::init(config.ff_dim, d, rng),
            })
            .collect();
        Ok(Transformer {
            config: config.clone(),
            seq_len,
            blocks,
            final_norm: LayerNorm::new(d),
            head: Dense::init(d, 1, rng),
        })
    }
}

impl ParamSet for Transformer {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("transformer.block{i}");
            b.norm1.params(&format!("{p}.norm1"), &mut out);
            b.attn.params(&format!("{p}.attn"), &mut out);
            b.norm2.params(&format!("{p}.norm2"), &mut out);
            b.ff1.params(&format!("{p}.ff1"), &mut out);
            b.ff2.params(&format!("{p}.ff2"), &mut out);
        }
        self.final_norm.params("transformer.final_norm", &mut out);
        self.head.params("transformer.head", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            b.norm1.params_mut(&mut out);
            b.attn.params_mut(&mut out);
            b.norm2.params_mut(&mut out);
            b.ff1.params_mut(&mut out);
            b.ff2.params_mut(&mut out);
        }
        self.final_norm.params_mut(&mut out);
        self.head.params_mut(&mut out);
        out
    }
}

impl BinaryNet for Transformer {
    type Cache = TransformerCache;

    fn name(&self) -> &'static str {
        "transformer"
    }

    fn check_input(&self, x: &SampleMatrix) -> Result<()> {
        check_width("transformer", x, self.config.model_dim, self.seq_len)
    }

    fn forward(&self, x: &SampleMatrix, mut mode: Mode<'_>) -> Result<(Array1<f64>, TransformerCache)> {
        self.check_input(x)?;
        let rate = self.config.dropout;
        let mut h = x.data.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (a, norm1) = block.norm1.forward(h.view());
            let (attn_out, attn) = block.attn.forward(a.view(), self.seq_len)?;
            let (attn_out, attn_mask) = dropout(attn_out, rate, &mut mode);
            h += &attn_out;
            let (ff_in, norm2) = block.norm2.forward(h.view());
            let ff_pre = block.ff1.forward(ff_in.view());
            let ff_hidden = relu(&ff_pre);
            let (ff_out, ff_mask) = dropout(block.ff2.forward(ff_hidden.view()), rate, &mut mode);
            h += &ff_out;
            ensure_finite(&h, &format!("transformer.block{i}"))?;
            caches.push(BlockCache {
                norm1,
                attn,
                attn_mask,
                norm2,
                ff_in,
                ff_pre,
                ff_hidden,
                ff_mask,
            });
        }
        let (normed, final_norm) = self.final_norm.forward(h.view());
        let pooled = mean_pool(normed.view(), self.seq_len);
        let logits = logits_of(self.head.forward(pooled.view()));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Activation("transformer.head".into()));
        }
        Ok((
            logits,
            TransformerCache {
                blocks: caches,
                final_norm,
                pooled,
            },
        ))
    }

    fn backward(&self, cache: &TransformerCache, dlogits: &Array1<f64>, grad: &mut Transformer) {
        let dpooled = self
            .head
            .backward(cache.pooled.view(), column(dlogits).view(), &mut grad.head);
        let dnormed = mean_pool_backward(&dpooled, self.seq_len);
        let mut dh = self
            .final_norm
            .backward(&cache.final_norm, &dnormed, &mut grad.final_norm);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let g = &mut grad.blocks[i];
            let dff_out = dropout_backward(dh.clone(), &c.ff_mask);
            let dhidden = block.ff2.backward(c.ff_hidden.view(), dff_out.view(), &mut g.ff2);
            let dpre = relu_backward(&c.ff_pre, &dhidden);
            let dff_in = block.ff1.backward(c.ff_in.view(), dpre.view(), &mut g.ff1);
            dh += &block.norm2.backward(&c.norm2, &dff_in, &mut g.norm2);
            let dattn_out = dropout_backward(dh.clone(), &c.attn_mask);
            let da = block.attn.backward(&c.attn, &dattn_out, &mut g.attn);
            dh += &block.norm1.backward(&c.norm1, &da, &mut g.norm1);
        }
    }

    fn zeros_like(&self) -> Self {
        let d = self.config.model_dim;
        Transformer {
            config: self.config.clone(),
            seq_len: self.seq_len,
            blocks: (0..self.blocks.len())
                .map(|_| EncoderBlock {
                    norm1: LayerNorm::zeros(d),
                    attn: MultiHeadAttention::zeros(d, self.config.heads),
                    norm2: LayerNorm::zeros(d),
                    ff1: Dense::zeros(d, self.config.ff_dim),
                    ff2: Dense::zeros(self.config.ff_dim, d),
                })
                .collect(),
            final_norm: LayerNorm::zeros(d),
            head: Dense::zeros(d, 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSeqConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel_size: usize,
}

impl Default for CnnSeqConfig {
    fn default() -> Self {
        CnnSeqConfig {
            conv_layers: 3,
            filters: 64,
            kernel_size: 3,
        }
    }
}

/// Stacked conv+ReLU stages over a neighbor sequence, global max-pool, sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnSeq {
    pub seq_len: usize,
    pub convs: Vec<Conv1d>,
    pub head: Dense,
}

pub struct CnnCache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    argmax: Vec<usize>,
    pooled: Array2<f64>,
}

impl CnnSeq {
    pub fn new(input_dim: usize, config: &CnnSeqConfig, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.kernel_size.is_multiple_of(2) || config.filters == 0 || config.conv_layers == 0 {
            return Err(Error::Parameter(format!(
                "cnn needs an odd kernel and at least one filter and layer, got {config:?}"
            )));
        }
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut in_ch = input_dim;
        for _ in 0..config.conv_layers {
            convs.push(Conv1d::init(in_ch, config.filters, config.kernel_size, rng));
            in_ch = config.filters;
        }
        Ok(CnnSeq {
            seq_len,
            convs,
            head: Dense::init(config.filters, 1, rng),
        })
    }

    fn input_dim(&self) -> usize {
        self.convs[0].dense.input_dim() / self.convs[0].kernel
    }
}

impl ParamSet for CnnSeq {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.params(&format!("cnn.conv{i}"), &mut out);
        }
        self.head.params("cnn.head", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            c.params_mut(&mut out);
        }
        self.head.params_mut(&mut out);
        out
    }
}

impl BinaryNet for CnnSeq {
    type Cache = CnnCache;

    fn name(&self) -> &'static str {
        "cnn_seq"
    }

    fn check_input(&self, x: &SampleMatrix) -> Result<()> {
        check_width("cnn_seq", x, self.input_dim(), self.seq_len)
    }

    fn forward(&self, x: &SampleMatrix, _mode: Mode<'_>) -> Result<(Array1<f64>, CnnCache)> {
        self.check_input(x)?;
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.data.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (z, col) = conv.forward(h.view(), self.seq_len);
            ensure_finite(&z, &format!("cnn.conv{i}"))?;
            h = relu(&z);
            cols.push(col);
            pre.push(z);
        }
        let (pooled, argmax) = max_pool(h.view(), self.seq_len);
        let logits = logits_of(self.head.forward(pooled.view()));
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Activation("cnn.head".into()));
        }
        Ok((
            logits,
            CnnCache {
                cols,
                pre,
                argmax,
                pooled,
            },
        ))
    }

    fn backward(&self, cache: &CnnCache, dlogits: &Array1<f64>, grad: &mut CnnSeq) {
        let dpooled = self
            .head
            .backward(cache.pooled.view(), column(dlogits).view(), &mut grad.head);
        let mut d = max_pool_backward(&dpooled, &cache.argmax, self.seq_len);
        for i in (0..self.convs.len()).rev() {
            d = relu_backward(&cache.pre[i], &d);
            d = self.convs[i].backward(&cache.cols[i], &d, self.seq_len, &mut grad.convs[i]);
        }
    }

    fn zeros_like(&self) -> Self {
        CnnSeq {
            seq_len: self.seq_len,
            convs: self
                .convs
                .iter()
                .map(|c| Conv1d::zeros(c.dense.input_dim() / c.kernel, c.dense.output_dim(), c.kernel))
                .collect(),
            head: Dense::zeros(self.head.input_dim(), 1),
        }
    }
}

/// Mean BCE of a model on a labelled batch, in the given mode.
pub fn batch_loss<M: BinaryNet>(model: &M, x: &SampleMatrix, y: &[f64], mode: Mode<'_>) -> Result<f64> {
    let (logits, _) = model.forward(x, mode)?;
    Ok(super::layers::bce_with_logits(&logits, y).0)
}

/// Loss and accumulated parameter gradients for one batch.
pub fn loss_and_grad<M: BinaryNet>(model: &M, x: &SampleMatrix, y: &[f64], mode: Mode<'_>) -> Result<(f64, M)> {
    let (logits, cache) = model.forward(x, mode)?;
    let (loss, dlogits) = super::layers::bce_with_logits(&logits, y);
    let mut grad = model.zeros_like();
    model.backward(&cache, &dlogits, &mut grad);
    Ok((loss, grad))
}
