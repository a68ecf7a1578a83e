//! CTC/attention Transformer with block reuse and adapters.
//!
//! The encoder computes `f_M(…f_1(x))` over its distinct blocks. When a single
//! block is repeated the same parameters are applied at every depth, and an
//! adapter `relu(x·W + b)` may follow each repetition so that repetition `m`
//! computes `adapter_m(block(x))`. The decoder is built the same way.

mod checkpoint;
mod config;
mod params;
mod vocab;

use std::rc::Rc;

pub use checkpoint::{
    load_partial_checkpoint, Checkpoint, WarmStartReport, CHECKPOINT_MAGIC,
};
pub use config::{subsampled_len, ModelConfig};
pub use params::{adapter_params, Component, ParamReport};
pub use vocab::Vocabulary;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor::Tensor;

use params::{AttentionIds, DecoderBlockIds, EncoderBlockIds, Layout, LinearIds, NormIds};

/// Additive mask value for disallowed attention positions.
const MASKED: f64 = -1e30;

/// Model parameters together with the configuration they realize.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

/// A labelled intermediate activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub label: String,
    pub value: Tensor,
}

/// Encoder output with every per-repetition intermediate.
#[derive(Clone, Debug)]
pub struct EmbeddingSequence {
    /// Frontend output with positional encoding, the input of the first block.
    pub input: Tensor,
    /// Captures after each block application (`enc-i`) and after each
    /// adapter (`enc-i-after-ADM`), in forward order.
    pub per_repetition: Vec<Capture>,
    /// Final `L × d` encoder output.
    pub h: Tensor,
}

/// Teacher-forced decoder pass with its intermediates.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub input: Tensor,
    pub per_repetition: Vec<Capture>,
    /// `S × |U|` log-probabilities, one row per input position.
    pub log_probs: Tensor,
}

/// Optional sink for intermediate activations during graph construction.
pub(crate) type Trace<'a> = Option<&'a mut Vec<(String, Var)>>;

impl Model {
    /// Allocates and initializes every parameter for `cfg`.
    pub fn build(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} units, config says {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let params = params::init_params(cfg, seed)?;
        Self::from_parts(cfg.clone(), vocab, params)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let expected = params::param_specs(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for spec in &expected {
            let t = params
                .by_name(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> ParamReport {
        ParamReport::from_config(&self.config)
    }

    fn linear(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Result<Var> {
        let (w, b) = (g.param(ids.w), g.param(ids.b));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, ids: NormIds) -> Result<Var> {
        let (gain, bias) = (g.param(ids.gain), g.param(ids.bias));
        g.layer_norm(x, gain, bias, self.config.ln_eps)
    }

    fn attention(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        ids: &AttentionIds,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.linear(g, query, ids.q)?;
        let k = self.linear(g, memory, ids.k)?;
        let v = self.linear(g, memory, ids.v)?;
        let dk = self.config.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.linear(g, joined, ids.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff1: LinearIds, ff2: LinearIds) -> Result<Var> {
        let h = self.linear(g, x, ff1)?;
        let h = g.relu(h);
        self.linear(g, h, ff2)
    }

    /// One pre-norm encoder block; this is the shared function when reused.
    pub(crate) fn encoder_block(&self, g: &mut Graph, x: Var, b: &EncoderBlockIds) -> Result<Var> {
        let n = self.norm(g, x, b.norm1)?;
        let a = self.attention(g, n, n, &b.attn, None)?;
        let x = g.add(x, a)?;
        let n = self.norm(g, x, b.norm2)?;
        let f = self.feed_forward(g, n, b.ff1, b.ff2)?;
        g.add(x, f)
    }

    fn decoder_block(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        mask: Var,
        b: &DecoderBlockIds,
    ) -> Result<Var> {
        let n = self.norm(g, x, b.norm1)?;
        let a = self.attention(g, n, n, &b.self_attn, Some(mask))?;
        let x = g.add(x, a)?;
        let n = self.norm(g, x, b.norm2)?;
        let c = self.attention(g, n, memory, &b.cross_attn, None)?;
        let x = g.add(x, c)?;
        let n = self.norm(g, x, b.norm3)?;
        let f = self.feed_forward(g, n, b.ff1, b.ff2)?;
        g.add(x, f)
    }

    fn adapter(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Result<Var> {
        let y = self.linear(g, x, ids)?;
        Ok(g.relu(y))
    }

    /// Convolutional ×4 subsampling, projection to `d_model`, scaling by
    /// `√d_model` and sinusoidal positions.
    pub(crate) fn frontend(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, f) = g.value(x).dims2()?;
        if f != self.config.feat_dim {
            return Err(Error::Input(format!(
                "features have {f} bins, model expects {}",
                self.config.feat_dim
            )));
        }
        let d = self.config.d_model;
        let (t1, f1) = (config::conv_out(t), config::conv_out(f));
        let (t2, f2) = (config::conv_out(t1), config::conv_out(f1));
        if t2 == 0 {
            return Err(Error::Input(format!(
                "{t} frames is too short for x4 subsampling (need at least 7)"
            )));
        }
        let patches1: Rc<[usize]> = conv_patch_index(t1, f1, f, 1);
        let p1 = g.gather(x, patches1, vec![t1 * f1, 9])?;
        let y1 = self.linear(g, p1, self.layout.conv1)?;
        let y1 = g.relu(y1);
        let patches2 = conv_patch_index(t2, f2, f1, d);
        let p2 = g.gather(y1, patches2, vec![t2 * f2, 9 * d])?;
        let y2 = self.linear(g, p2, self.layout.conv2)?;
        let y2 = g.relu(y2);
        let flat = g.reshape(y2, vec![t2, f2 * d])?;
        let out = self.linear(g, flat, self.layout.frontend_out)?;
        let out = g.scale(out, (d as f64).sqrt());
        let pe = g.constant(positional_encoding(t2, d));
        g.add(out, pe)
    }

    /// Builds the encoder on `g`, returning the final `L × d` output.
    pub(crate) fn encode_graph(&self, g: &mut Graph, x: Var, mut trace: Trace) -> Result<Var> {
        let mut h = self.frontend(g, x)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(("enc-input".into(), h));
        }
        let mut depth = 0;
        for rep in 0..self.config.enc_repeats {
            for block in &self.layout.enc_blocks {
                h = self.encoder_block(g, h, block)?;
                depth += 1;
                check_finite(g, h, "encoder", depth)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((format!("enc-{depth}"), h));
                }
            }
            if let Some(&ad) = self.layout.enc_adapters.get(rep) {
                h = self.adapter(g, h, ad)?;
                check_finite(g, h, "encoder adapter", rep + 1)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((format!("enc-{depth}-after-ADM"), h));
                }
            }
        }
        self.norm(g, h, self.layout.enc_norm)
    }

    /// Builds the decoder on `g` for the given input ids (starting with sos),
    /// returning `S × |U|` log-probabilities.
    pub(crate) fn decode_graph(
        &self,
        g: &mut Graph,
        memory: Var,
        ys_in: &[usize],
        mut trace: Trace,
    ) -> Result<Var> {
        if ys_in.is_empty() {
            return Err(Error::Input("decoder prefix is empty".into()));
        }
        if let Some(&bad) = ys_in.iter().find(|&&y| y >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.d_model;
        let s = ys_in.len();
        let table = g.param(self.layout.embed);
        let emb = g.gather_rows(table, ys_in)?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = g.constant(positional_encoding(s, d));
        let mut h = g.add(emb, pe)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(("dec-input".into(), h));
        }
        let mask = g.constant(causal_mask(s));
        let mut depth = 0;
        for rep in 0..self.config.dec_repeats {
            for block in &self.layout.dec_blocks {
                h = self.decoder_block(g, h, memory, mask, block)?;
                depth += 1;
                check_finite(g, h, "decoder", depth)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((format!("dec-{depth}"), h));
                }
            }
            if let Some(&ad) = self.layout.dec_adapters.get(rep) {
                h = self.adapter(g, h, ad)?;
                check_finite(g, h, "decoder adapter", rep + 1)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((format!("dec-{depth}-after-ADM"), h));
                }
            }
        }
        let h = self.norm(g, h, self.layout.dec_norm)?;
        let logits = self.linear(g, h, self.layout.att_out)?;
        g.log_softmax(logits, 1)
    }

    /// CTC output layer: linear projection then per-frame log-softmax.
    pub(crate) fn ctc_graph(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let logits = self.linear(g, h, self.layout.ctc)?;
        g.log_softmax(logits, 1)
    }

    pub fn encode(&self, x: &FeatureMatrix) -> Result<EmbeddingSequence> {
        self.encode_tensor(x.as_tensor())
    }

    /// Encodes a `T × feat_dim` matrix (feature files of any bin count that
    /// matches the model's `feat_dim`).
    pub fn encode_tensor(&self, x: &Tensor) -> Result<EmbeddingSequence> {
        if !x.is_finite() {
            return Err(Error::Input("features contain non-finite values".into()));
        }
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let mut trace = Vec::new();
        let h = self.encode_graph(&mut g, xv, Some(&mut trace))?;
        let mut input = None;
        let mut per_repetition = Vec::new();
        for (label, v) in trace {
            if label == "enc-input" {
                input = Some(g.value(v).clone());
            } else {
                per_repetition.push(Capture {
                    label,
                    value: g.value(v).clone(),
                });
            }
        }
        Ok(EmbeddingSequence {
            input: input.expect("frontend captured"),
            per_repetition,
            h: g.value(h).clone(),
        })
    }

    /// Log-probabilities over the vocabulary for the token following `prefix`.
    pub fn decoder_forward(&self, h: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&self.vocab.sos()) {
            return Err(Error::Input("decoder prefix must begin with sos".into()));
        }
        let trace = self.decoder_trace(h, prefix)?;
        Ok(trace.log_probs.row(prefix.len() - 1).to_vec())
    }

    /// Teacher-forced decoder pass over `ys_in`.
    pub fn decoder_trace(&self, h: &Tensor, ys_in: &[usize]) -> Result<DecoderTrace> {
        let mut g = Graph::new(&self.params);
        let mem = g.constant(h.clone());
        let mut trace = Vec::new();
        let out = self.decode_graph(&mut g, mem, ys_in, Some(&mut trace))?;
        let mut input = None;
        let mut per_repetition = Vec::new();
        for (label, v) in trace {
            if label == "dec-input" {
                input = Some(g.value(v).clone());
            } else {
                per_repetition.push(Capture {
                    label,
                    value: g.value(v).clone(),
                });
            }
        }
        Ok(DecoderTrace {
            input: input.expect("embedding captured"),
            per_repetition,
            log_probs: g.value(out).clone(),
        })
    }

    /// Sum of attention log-probabilities of `tokens` followed by eos, with
    /// sos prepended to the decoder input.
    pub fn attention_score(&self, h: &Tensor, tokens: &[usize]) -> Result<f64> {
        let mut ys_in = vec![self.vocab.sos()];
        ys_in.extend_from_slice(tokens);
        let lp = self.decoder_trace(h, &ys_in)?.log_probs;
        let mut total = 0.0;
        for (i, &y) in tokens.iter().chain([self.vocab.eos()].iter()).enumerate() {
            total += lp.at(i, y);
        }
        Ok(total)
    }

    /// `L × |U|` CTC log-probabilities.
    pub fn ctc_head(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let hv = g.constant(h.clone());
        let out = self.ctc_graph(&mut g, hv)?;
        Ok(g.value(out).clone())
    }

    /// Applies only the (first) encoder block to `x`, outside of the
    /// frontend and final norm.
    pub fn apply_encoder_block(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        let ids = self
            .layout
            .enc_blocks
            .get(block)
            .ok_or_else(|| Error::Input(format!("no encoder block {block}")))?;
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let y = self.encoder_block(&mut g, xv, ids)?;
        Ok(g.value(y).clone())
    }

    /// Applies the adapter following repetition `rep` to `x`.
    pub fn apply_encoder_adapter(&self, x: &Tensor, rep: usize) -> Result<Tensor> {
        let ids = *self
            .layout
            .enc_adapters
            .get(rep)
            .ok_or_else(|| Error::Input(format!("no encoder adapter {rep}")))?;
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let y = self.adapter(&mut g, xv, ids)?;
        Ok(g.value(y).clone())
    }
}

fn check_finite(g: &Graph, v: Var, what: &str, index: usize) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite activation after {what} repetition {index}"
        )))
    }
}

/// Flat gather indices turning an `h × w × c` activation (row-major) into
/// `3×3`, stride-2 patches laid out as rows `(t, f)` and columns `(i, j, c)`.
fn conv_patch_index(out_t: usize, out_f: usize, in_f: usize, channels: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(out_t * out_f * 9 * channels);
    for t in 0..out_t {
        for f in 0..out_f {
            for i in 0..3 {
                for j in 0..3 {
                    let base = ((2 * t + i) * in_f + (2 * f + j)) * channels;
                    idx.extend(base..base + channels);
                }
            }
        }
    }
    idx.into()
}

/// Standard sinusoidal absolute position table.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        let row = pe.row_mut(pos);
        for i in (0..d).step_by(2) {
            let freq = (-(i as f64) * (10000f64).ln() / d as f64).exp();
            let angle = pos as f64 * freq;
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
        }
    }
    pe
}

fn causal_mask(s: usize) -> Tensor {
    let mut m = Tensor::zeros(&[s, s]);
    for i in 0..s {
        for j in i + 1..s {
            m.row_mut(i)[j] = MASKED;
        }
    }
    m
}

#[cfg(test)]
mod tests;
