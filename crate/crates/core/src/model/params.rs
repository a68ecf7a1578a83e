//! Parameter naming, initialization and accounting.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(specs: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Uniform { fan_in },
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    specs.push(ParamSpec {
        name: format!("{prefix}.gain"),
        shape: vec![d],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn attention(specs: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(specs, &format!("{prefix}.{p}"), d, d);
    }
}

/// Every parameter of the model in canonical order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut s = Vec::new();
    linear(&mut s, "frontend.conv1", 9, d);
    linear(&mut s, "frontend.conv2", 9 * d, d);
    linear(&mut s, "frontend.out", cfg.frontend_freq() * d, d);
    for b in 0..cfg.enc_blocks {
        let p = format!("encoder.block{b}");
        norm(&mut s, &format!("{p}.norm1"), d);
        attention(&mut s, &format!("{p}.attn"), d);
        norm(&mut s, &format!("{p}.norm2"), d);
        linear(&mut s, &format!("{p}.ff1"), d, cfg.ff_dim);
        linear(&mut s, &format!("{p}.ff2"), cfg.ff_dim, d);
    }
    if cfg.enc_adapters {
        for r in 0..cfg.enc_repeats {
            linear(&mut s, &format!("encoder.adapter{r}"), d, d);
        }
    }
    norm(&mut s, "encoder.norm", d);
    s.push(ParamSpec {
        name: "embed.weight".into(),
        shape: vec![cfg.vocab_size, d],
        init: Init::Uniform { fan_in: d },
    });
    for b in 0..cfg.dec_blocks {
        let p = format!("decoder.block{b}");
        norm(&mut s, &format!("{p}.norm1"), d);
        attention(&mut s, &format!("{p}.self_attn"), d);
        norm(&mut s, &format!("{p}.norm2"), d);
        attention(&mut s, &format!("{p}.cross_attn"), d);
        norm(&mut s, &format!("{p}.norm3"), d);
        linear(&mut s, &format!("{p}.ff1"), d, cfg.ff_dim);
        linear(&mut s, &format!("{p}.ff2"), cfg.ff_dim, d);
    }
    if cfg.dec_adapters {
        for r in 0..cfg.dec_repeats {
            linear(&mut s, &format!("decoder.adapter{r}"), d, d);
        }
    }
    norm(&mut s, "decoder.norm", d);
    linear(&mut s, "att_out", d, cfg.vocab_size);
    linear(&mut s, "ctc", d, cfg.vocab_size);
    s
}

pub(crate) fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Uniform { fan_in } => {
                let a = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        store.insert(spec.name, Tensor::new(spec.shape, data)?)?;
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderBlockIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderBlockIds {
    pub norm1: NormIds,
    pub self_attn: AttentionIds,
    pub norm2: NormIds,
    pub cross_attn: AttentionIds,
    pub norm3: NormIds,
    pub ff1: LinearIds,
    pub ff2: LinearIds,
}

/// Parameter ids grouped by role.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub conv1: LinearIds,
    pub conv2: LinearIds,
    pub frontend_out: LinearIds,
    pub enc_blocks: Vec<EncoderBlockIds>,
    pub enc_adapters: Vec<LinearIds>,
    pub enc_norm: NormIds,
    pub embed: ParamId,
    pub dec_blocks: Vec<DecoderBlockIds>,
    pub dec_adapters: Vec<LinearIds>,
    pub dec_norm: NormIds,
    pub att_out: LinearIds,
    pub ctc: LinearIds,
}

struct Resolver<'a>(&'a ParamStore);

impl Resolver<'_> {
    fn id(&self, name: &str) -> Result<ParamId> {
        self.0
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }
    fn linear(&self, p: &str) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.id(&format!("{p}.weight"))?,
            b: self.id(&format!("{p}.bias"))?,
        })
    }
    fn norm(&self, p: &str) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.id(&format!("{p}.gain"))?,
            bias: self.id(&format!("{p}.bias"))?,
        })
    }
    fn attention(&self, p: &str) -> Result<AttentionIds> {
        Ok(AttentionIds {
            q: self.linear(&format!("{p}.q"))?,
            k: self.linear(&format!("{p}.k"))?,
            v: self.linear(&format!("{p}.v"))?,
            o: self.linear(&format!("{p}.o"))?,
        })
    }
}

impl Layout {
    pub fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let r = Resolver(store);
        let enc_blocks = (0..cfg.enc_blocks)
            .map(|b| {
                let p = format!("encoder.block{b}");
                Ok(EncoderBlockIds {
                    norm1: r.norm(&format!("{p}.norm1"))?,
                    attn: r.attention(&format!("{p}.attn"))?,
                    norm2: r.norm(&format!("{p}.norm2"))?,
                    ff1: r.linear(&format!("{p}.ff1"))?,
                    ff2: r.linear(&format!("{p}.ff2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|b| {
                let p = format!("decoder.block{b}");
                Ok(DecoderBlockIds {
                    norm1: r.norm(&format!("{p}.norm1"))?,
                    self_attn: r.attention(&format!("{p}.self_attn"))?,
                    norm2: r.norm(&format!("{p}.norm2"))?,
                    cross_attn: r.attention(&format!("{p}.cross_attn"))?,
                    norm3: r.norm(&format!("{p}.norm3"))?,
                    ff1: r.linear(&format!("{p}.ff1"))?,
                    ff2: r.linear(&format!("{p}.ff2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let enc_adapters = if cfg.enc_adapters {
            (0..cfg.enc_repeats)
                .map(|i| r.linear(&format!("encoder.adapter{i}")))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let dec_adapters = if cfg.dec_adapters {
            (0..cfg.dec_repeats)
                .map(|i| r.linear(&format!("decoder.adapter{i}")))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            conv1: r.linear("frontend.conv1")?,
            conv2: r.linear("frontend.conv2")?,
            frontend_out: r.linear("frontend.out")?,
            enc_blocks,
            enc_adapters,
            enc_norm: r.norm("encoder.norm")?,
            embed: r.id("embed.weight")?,
            dec_blocks,
            dec_adapters,
            dec_norm: r.norm("decoder.norm")?,
            att_out: r.linear("att_out")?,
            ctc: r.linear("ctc")?,
        })
    }
}

/// Parameter groups reported by [`ParamReport`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Frontend,
    EncoderBlocks,
    EncoderAdapters,
    EncoderNorm,
    Embedding,
    DecoderBlocks,
    DecoderAdapters,
    DecoderNorm,
    AttentionHead,
    CtcHead,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::Frontend,
        Component::EncoderBlocks,
        Component::EncoderAdapters,
        Component::EncoderNorm,
        Component::Embedding,
        Component::DecoderBlocks,
        Component::DecoderAdapters,
        Component::DecoderNorm,
        Component::AttentionHead,
        Component::CtcHead,
    ];

    pub fn of(param_name: &str) -> Option<Self> {
        let c = match param_name.split('.').next()? {
            "frontend" => Component::Frontend,
            "embed" => Component::Embedding,
            "att_out" => Component::AttentionHead,
            "ctc" => Component::CtcHead,
            "encoder" | "decoder" => {
                let enc = param_name.starts_with("encoder");
                let part = param_name.split('.').nth(1)?;
                match (enc, part) {
                    (true, p) if p.starts_with("block") => Component::EncoderBlocks,
                    (true, p) if p.starts_with("adapter") => Component::EncoderAdapters,
                    (true, "norm") => Component::EncoderNorm,
                    (false, p) if p.starts_with("block") => Component::DecoderBlocks,
                    (false, p) if p.starts_with("adapter") => Component::DecoderAdapters,
                    (false, "norm") => Component::DecoderNorm,
                    _ => return None,
                }
            }
            _ => return None,
        };
        Some(c)
    }

    pub fn label(self) -> &'static str {
        match self {
            Component::Frontend => "frontend",
            Component::EncoderBlocks => "encoder_blocks",
            Component::EncoderAdapters => "encoder_adapters",
            Component::EncoderNorm => "encoder_norm",
            Component::Embedding => "embedding",
            Component::DecoderBlocks => "decoder_blocks",
            Component::DecoderAdapters => "decoder_adapters",
            Component::DecoderNorm => "decoder_norm",
            Component::AttentionHead => "attention_head",
            Component::CtcHead => "ctc_head",
        }
    }
}

/// Exact parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub counts: Vec<(Component, usize)>,
    /// Distinct encoder / decoder block parameter sets.
    pub encoder_block_sets: usize,
    pub decoder_block_sets: usize,
}

impl ParamReport {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let mut counts: Vec<(Component, usize)> = Component::ALL.iter().map(|&c| (c, 0)).collect();
        for spec in param_specs(cfg) {
            let c = Component::of(&spec.name).expect("every parameter has a component");
            let n: usize = spec.shape.iter().product();
            counts.iter_mut().find(|(k, _)| *k == c).unwrap().1 += n;
        }
        Self {
            counts,
            encoder_block_sets: cfg.enc_blocks,
            decoder_block_sets: cfg.dec_blocks,
        }
    }

    pub fn get(&self, c: Component) -> usize {
        self.counts
            .iter()
            .find(|(k, _)| *k == c)
            .map_or(0, |(_, n)| *n)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, n)| n).sum()
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, n) in &self.counts {
            writeln!(f, "{:<18} {:>12}", c.label(), n)?;
        }
        write!(f, "{:<18} {:>12}", "total", self.total())
    }
}

/// Parameter count of one adapter: a `d×d` weight plus a bias.
pub fn adapter_params(d_model: usize) -> usize {
    d_model * d_model + d_model
}
