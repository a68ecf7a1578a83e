use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NUM_MEL_BINS;

/// Shape of the CTC/attention Transformer.
///
/// The encoder applies its `enc_blocks` distinct blocks in sequence,
/// `enc_repeats` times over; `enc_blocks = 1` is block reuse. With
/// `enc_adapters` set, one adapter follows each repetition. The decoder
/// mirrors this with `dec_*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub enc_repeats: usize,
    pub dec_repeats: usize,
    pub enc_adapters: bool,
    pub dec_adapters: bool,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub subsampling: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            ff_dim: 2048,
            enc_blocks: 12,
            dec_blocks: 6,
            enc_repeats: 1,
            dec_repeats: 1,
            enc_adapters: false,
            dec_adapters: false,
            vocab_size: 4233,
            feat_dim: NUM_MEL_BINS,
            subsampling: 4,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ff_dim == 0 {
            return fail("ff_dim must be positive".into());
        }
        for (name, v) in [
            ("enc_blocks", self.enc_blocks),
            ("dec_blocks", self.dec_blocks),
            ("enc_repeats", self.enc_repeats),
            ("dec_repeats", self.dec_repeats),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size {} leaves no room for tokens besides blank/sos/eos",
                self.vocab_size
            ));
        }
        if self.subsampling != 4 {
            return fail(format!(
                "only x4 convolutional subsampling is implemented, got x{}",
                self.subsampling
            ));
        }
        if self.feat_dim < 7 {
            return fail(format!("feat_dim {} too small for the frontend", self.feat_dim));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Total encoder block applications per forward pass.
    pub fn encoder_depth(&self) -> usize {
        self.enc_blocks * self.enc_repeats
    }

    pub fn decoder_depth(&self) -> usize {
        self.dec_blocks * self.dec_repeats
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Frequency extent after the two stride-2, kernel-3 convolutions.
    pub fn frontend_freq(&self) -> usize {
        conv_out(conv_out(self.feat_dim))
    }
}

pub(crate) fn conv_out(n: usize) -> usize {
    if n < 3 {
        0
    } else {
        (n - 3) / 2 + 1
    }
}

/// Encoder length for `frames` input frames.
pub fn subsampled_len(frames: usize) -> usize {
    conv_out(conv_out(frames))
}
