use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Longest query the trainers accept.
pub const MAX_QUERY_LEN: usize = 196;
/// Longest target (answer) sequence, EOS included.
pub const MAX_TARGET_LEN: usize = 128;
/// Documents are truncated head-first to this many tokens.
pub const MAX_DOC_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PluginSharing {
    /// One prefix set reused by every plugged layer.
    #[default]
    Shared,
    /// A separate mapping network (and prefix set) per plugged layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Number of top encoder layers that receive plugin prefixes.
    pub n_plug: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub plugin_sharing: PluginSharing,
    /// Reserved: plugins in decoder cross-attention. Must stay off.
    #[serde(default)]
    pub also_decoder_cross: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Desk-scale default: d=64, 4 heads, d_ff=128, 4+4 layers, top 2 plugged.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 4,
            n_dec_layers: 4,
            n_plug: 2,
            vocab_size,
            max_len: 256,
            plugin_sharing: PluginSharing::Shared,
            also_decoder_cross: false,
            init_std: default_init_std(),
        }
    }

    /// Reads any of the config's field names from `kv`, starting from
    /// the toy defaults.
    pub fn from_kv(kv: &crate::kv::KvConfig) -> Result<Self> {
        let mut c = Self::toy(kv.get("vocab_size")?.unwrap_or(1000));
        macro_rules! read {
            ($($f:ident),*) => { $( if let Some(v) = kv.get(stringify!($f))? { c.$f = v; } )* };
        }
        read!(
            d_model,
            n_heads,
            d_ff,
            n_enc_layers,
            n_dec_layers,
            n_plug,
            max_len,
            init_std
        );
        if let Some(s) = kv.get_str("plugin_sharing") {
            c.plugin_sharing = match s {
                "shared" => PluginSharing::Shared,
                "per_layer" => PluginSharing::PerLayer,
                other => {
                    return Err(Error::Config(format!(
                        "plugin_sharing: unknown mode {other:?}"
                    )))
                }
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Index of the lowest encoder layer that receives plugins.
    pub fn first_plugged_layer(&self) -> usize {
        self.n_enc_layers - self.n_plug
    }

    pub fn is_plugged_layer(&self, layer: usize) -> bool {
        layer >= self.first_plugged_layer() && layer < self.n_enc_layers
    }

    /// Longest document the encoder can take.
    pub fn max_doc_len(&self) -> usize {
        MAX_DOC_LEN.min(self.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_plug > self.n_enc_layers {
            return bad(format!(
                "n_plug {} exceeds {} encoder layers",
                self.n_plug, self.n_enc_layers
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.vocab_size <= crate::text::FIRST_WORD_ID as usize {
            return bad(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.also_decoder_cross {
            return bad("also_decoder_cross is reserved and not supported".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        let c = ModelConfig::toy(500);
        c.validate().unwrap();
        assert_eq!(c.d_head(), 16);
        assert_eq!(c.first_plugged_layer(), 2);
        assert!(!c.is_plugged_layer(1) && c.is_plugged_layer(2) && c.is_plugged_layer(3));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy(500);
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(500);
        c.n_plug = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(500);
        c.also_decoder_cross = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn n_plug_zero_has_no_plugged_layers() {
        let mut c = ModelConfig::toy(500);
        c.n_plug = 0;
        assert!((0..4).all(|l| !c.is_plugged_layer(l)));
    }
}
