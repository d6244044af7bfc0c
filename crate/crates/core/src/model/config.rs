use alloc::format;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dtw::ALIGNED_LENGTH;
use crate::features::NUM_CHANNELS;
use crate::{Error, Result};

/// Kernel widths of the three convolution + pooling stages.
pub const FRONTEND_KERNELS: [usize; 3] = [5, 5, 3];

/// Each front-end stage halves the time axis.
pub const FRONTEND_REDUCTION: usize = 8;

/// Width of the scoring head's hidden layer.
pub const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Temporal encoder followed by a GRU.
    Vanilla,
    /// Two-stream (temporal + channel) encoder with multi-scale convolutional feed-forward.
    That,
    /// Temporal encoder with convolutional feed-forward followed by a GRU.
    Gait,
    /// Vanilla temporal branch concatenated with a channel branch.
    VanillaTc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::That, Variant::Gait, Variant::VanillaTc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::That => "that",
            Variant::Gait => "gait",
            Variant::VanillaTc => "vanilla-tc",
        }
    }

    /// THAT and gait are reduced re-creations of architectures described
    /// elsewhere, not exact copies.
    pub fn is_approximation(self) -> bool {
        matches!(self, Variant::That | Variant::Gait)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "that" => Ok(Variant::That),
            "gait" => Ok(Variant::Gait),
            "vanilla-tc" | "vanilla_tc" => Ok(Variant::VanillaTc),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_length: usize,
    pub input_channels: usize,
    pub frontend_out_length: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Heads of the channel-token encoders, whose width is `frontend_out_length`.
    pub channel_heads: usize,
    pub ffn_dim: usize,
    pub num_blocks: usize,
    pub gre_ranges: usize,
    pub rnn_hidden: usize,
    pub channel_branch_out: usize,
    pub fused_embedding: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Set for variants that approximate externally described architectures.
    #[serde(default)]
    pub approx: bool,
}

impl ModelConfig {
    /// Full-size configuration: 2000×23 input, 250×64 tokens, 92-wide states.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input_length: ALIGNED_LENGTH,
            input_channels: NUM_CHANNELS,
            frontend_out_length: ALIGNED_LENGTH / FRONTEND_REDUCTION,
            d_model: 64,
            heads: 4,
            channel_heads: 2,
            ffn_dim: 128,
            num_blocks: 2,
            gre_ranges: 20,
            rnn_hidden: 92,
            channel_branch_out: 92,
            fused_embedding: 184,
            dropout: 0.1,
            seed: 0,
            approx: variant.is_approximation(),
        }
    }

    /// Reduced dimensions for finite-difference checks: `input_length`×23
    /// input, width 8, 4 ranges, hidden 6.
    pub fn reduced(variant: Variant, input_length: usize) -> Self {
        Self {
            input_length,
            frontend_out_length: input_length / FRONTEND_REDUCTION,
            d_model: 8,
            heads: 2,
            channel_heads: 2,
            ffn_dim: 12,
            num_blocks: 1,
            gre_ranges: 4,
            rnn_hidden: 6,
            channel_branch_out: 6,
            fused_embedding: 12,
            dropout: 0.0,
            ..Self::new(variant)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.input_length == 0 || !self.input_length.is_multiple_of(FRONTEND_REDUCTION) {
            return fail(format!("input length {} is not a positive multiple of 8", self.input_length));
        }
        if self.frontend_out_length != self.input_length / FRONTEND_REDUCTION {
            return fail(format!(
                "front-end length {} must equal input length / 8 = {}",
                self.frontend_out_length,
                self.input_length / FRONTEND_REDUCTION
            ));
        }
        if self.input_channels == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.rnn_hidden == 0 {
            return fail("all widths must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        let uses_channels = matches!(self.variant, Variant::That | Variant::VanillaTc);
        if uses_channels && (self.channel_heads == 0 || !self.frontend_out_length.is_multiple_of(self.channel_heads)) {
            return fail(format!(
                "channel token width {} is not divisible by {} channel heads",
                self.frontend_out_length, self.channel_heads
            ));
        }
        if self.gre_ranges < 2 {
            return fail(format!("gaussian range encoding needs K >= 2, got {}", self.gre_ranges));
        }
        if self.num_blocks == 0 {
            return fail("at least one encoder block is required".into());
        }
        if self.variant == Variant::VanillaTc {
            if self.channel_branch_out != self.rnn_hidden {
                return fail(format!(
                    "channel branch output {} must match the temporal state {}",
                    self.channel_branch_out, self.rnn_hidden
                ));
            }
            if self.fused_embedding != 2 * self.rnn_hidden {
                return fail(format!(
                    "fused embedding {} must be 2 x {}",
                    self.fused_embedding, self.rnn_hidden
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Length of the per-signature embedding for this variant.
    pub fn embedding_size(&self) -> usize {
        match self.variant {
            Variant::Vanilla | Variant::Gait => self.rnn_hidden,
            Variant::VanillaTc => self.fused_embedding,
            Variant::That => 2 * self.d_model,
        }
    }
}
