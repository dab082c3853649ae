//! Shared-encoder / twin-decoder transformer.
//!
//! Token sequences are embedded into `model_dim`, offset by the sinusoidal
//! table, and run through a pre-norm encoder stack. Each decoder starts
//! from its own learned query sequence (one row per output token), attends
//! to itself and to the encoder memory without masks, and emits every
//! output token in a single pass. A projection shared by both decoders maps
//! back to token space.
//!
//! The current-target decoder (CTD) reconstructs its input window; the
//! future-target decoder (FTD) predicts the window `beta` frames ahead.

mod checkpoint;
mod layers;
mod network;
mod train;

pub use checkpoint::{
    group_digest, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use layers::{Attention, FeedForward, LayerNorm, Linear, Mode};
pub use network::{
    ctd_loss_and_grads, ftd_loss_and_grads, mse_grad, mse_loss, Decoder, DecoderLayer, Encoder,
    EncoderLayer, Params, UetdWeights,
};
pub(crate) use train::encode_in_chunks;
pub use train::{train_ctd, train_ctd_from, train_ftd, Adam, EpochLog, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{SchemeKind, TokenizationScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ctd,
    Ftd,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ctd" => Ok(Branch::Ctd),
            "ftd" => Ok(Branch::Ftd),
            _ => Err(Error::Argument(format!("unknown decoder branch `{s}`"))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Branch::Ctd => "ctd",
            Branch::Ftd => "ftd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UetdConfig {
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    pub model_dim: usize,
    pub token_dim: usize,
    pub n_tokens: usize,
    pub dropout: f64,
}

/// `(heads, layers, feed-forward width)` tuned per tokenization scheme.
pub fn scheme_architecture(kind: SchemeKind) -> (usize, usize, usize) {
    match kind {
        SchemeKind::TPrp => (8, 8, 128),
        SchemeKind::KsPrp => (8, 4, 128),
        SchemeKind::FsPrp => (12, 6, 64),
        SchemeKind::StPrp => (12, 4, 64),
    }
}

impl UetdConfig {
    /// Architecture for a scheme and window shape. `model_dim` is the smallest
    /// even multiple of the head count that is at least the token width.
    pub fn for_scheme(scheme: TokenizationScheme, beta: usize, keypoints: usize) -> Self {
        let (n_heads, n_layers, ff_dim) = scheme_architecture(scheme.kind);
        let (n_tokens, token_dim) = scheme.token_shape(beta, keypoints);
        let mut model_dim = token_dim.div_ceil(n_heads) * n_heads;
        if model_dim % 2 != 0 {
            model_dim += n_heads;
        }
        UetdConfig {
            n_heads,
            n_layers,
            ff_dim,
            model_dim,
            token_dim,
            n_tokens,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.n_layers == 0 || self.ff_dim == 0 {
            return fail("heads, layers and ff_dim must be positive".into());
        }
        if self.token_dim == 0 || self.n_tokens == 0 {
            return fail("token shape must be non-empty".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.n_heads
            ));
        }
        if !self.model_dim.is_multiple_of(2) {
            return fail(format!("model_dim {} must be even", self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_dims() {
        let st = UetdConfig::for_scheme(TokenizationScheme::new(SchemeKind::StPrp, true), 24, 17);
        assert_eq!((st.n_heads, st.n_layers, st.ff_dim), (12, 4, 64));
        assert_eq!((st.n_tokens, st.token_dim, st.model_dim), (24, 68, 72));
        let t = UetdConfig::for_scheme(TokenizationScheme::new(SchemeKind::TPrp, true), 24, 17);
        assert_eq!((t.n_heads, t.n_layers, t.ff_dim, t.model_dim), (8, 8, 128, 72));
        let ks = UetdConfig::for_scheme(TokenizationScheme::new(SchemeKind::KsPrp, true), 24, 17);
        assert_eq!((ks.n_tokens, ks.token_dim, ks.model_dim), (17, 96, 96));
        let fs = UetdConfig::for_scheme(TokenizationScheme::new(SchemeKind::FsPrp, false), 24, 17);
        assert_eq!((fs.n_tokens, fs.token_dim, fs.model_dim), (34, 24, 24));
        for c in [st, t, ks, fs] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = UetdConfig::for_scheme(TokenizationScheme::new(SchemeKind::StPrp, true), 24, 17);
        c.model_dim = 70;
        assert!(c.validate().is_err());
        c.model_dim = 72;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn branch_parsing() {
        assert_eq!("CTD".parse::<Branch>().unwrap(), Branch::Ctd);
        assert!(matches!("mid".parse::<Branch>(), Err(Error::Argument(_))));
    }
}
