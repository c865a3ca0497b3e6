use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::rotary_span;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dense,
    Moe,
    Mole,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Moe => "moe",
            Variant::Mole => "mole",
        }
    }
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_rotary_fraction() -> f64 {
    0.25
}

/// Architecture hyper-parameters.
///
/// `d_shared` is the hidden width of the always-on FFN (the only FFN of a
/// dense model, absent when zero); `d_routed`, `n_experts` and `top_k` describe
/// the routed experts. For `mole` every expert is active, so `top_k` is
/// normalized to `n_experts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_shared: usize,
    #[serde(default)]
    pub d_routed: usize,
    #[serde(default)]
    pub n_experts: usize,
    #[serde(default)]
    pub top_k: usize,
    pub vocab: usize,
    #[serde(default = "default_rotary_fraction")]
    pub rotary_fraction: f64,
    pub max_seq: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn dense(n_layers: usize, d_model: usize, n_heads: usize, d_shared: usize, vocab: usize) -> Self {
        Self {
            variant: Variant::Dense,
            n_layers,
            d_model,
            n_heads,
            d_shared,
            d_routed: 0,
            n_experts: 0,
            top_k: 0,
            vocab,
            rotary_fraction: default_rotary_fraction(),
            max_seq: 2048,
            norm_eps: default_norm_eps(),
        }
    }

    /// MoE without a shared expert (set `d_shared` afterwards to add one).
    pub fn moe(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_routed: usize,
        n_experts: usize,
        top_k: usize,
        vocab: usize,
    ) -> Self {
        Self {
            variant: Variant::Moe,
            d_shared: 0,
            d_routed,
            n_experts,
            top_k,
            ..Self::dense(n_layers, d_model, n_heads, 0, vocab)
        }
    }

    pub fn mole(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_shared: usize,
        d_routed: usize,
        n_experts: usize,
        vocab: usize,
    ) -> Self {
        Self {
            variant: Variant::Mole,
            d_routed,
            n_experts,
            top_k: n_experts,
            ..Self::dense(n_layers, d_model, n_heads, d_shared, vocab)
        }
    }

    pub fn with_max_seq(mut self, max_seq: usize) -> Self {
        self.max_seq = max_seq;
        self
    }

    pub fn with_rotary_fraction(mut self, fraction: f64) -> Self {
        self.rotary_fraction = fraction;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn rotary_span(&self) -> Result<usize> {
        rotary_span(self.d_head(), self.rotary_fraction)
    }

    /// Experts evaluated per token.
    pub fn active_experts(&self) -> usize {
        match self.variant {
            Variant::Dense => 0,
            Variant::Moe => self.top_k,
            Variant::Mole => self.n_experts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field, reason: &str| Err(Error::config(field, reason));
        if self.n_layers == 0 {
            return cfg("n_layers", "must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return cfg("n_heads", "d_model must be a positive multiple of n_heads");
        }
        if self.vocab < 2 {
            return cfg("vocab", "must be at least 2");
        }
        if u32::try_from(self.vocab).is_err() {
            return cfg("vocab", "must fit in u32 ids");
        }
        if self.max_seq == 0 {
            return cfg("max_seq", "must be at least 1");
        }
        if !(self.norm_eps > 0.0) {
            return cfg("norm_eps", "must be positive");
        }
        self.rotary_span()?;
        match self.variant {
            Variant::Dense => {
                if self.n_experts != 0 {
                    return cfg("n_experts", "dense models carry no routed experts");
                }
                if self.d_shared == 0 {
                    return cfg("d_shared", "dense models need a non-zero FFN width");
                }
            }
            Variant::Moe => {
                if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
                    return cfg("top_k", "moe needs 1 <= top_k <= n_experts");
                }
                if self.d_routed == 0 {
                    return cfg("d_routed", "must be positive");
                }
            }
            Variant::Mole => {
                if self.n_experts == 0 {
                    return cfg("n_experts", "mole needs at least one routed expert");
                }
                if self.top_k != 0 && self.top_k != self.n_experts {
                    return cfg("top_k", "mole activates every expert; leave 0 or equal to n_experts");
                }
                if self.d_routed == 0 {
                    return cfg("d_routed", "must be positive");
                }
            }
        }
        Ok(())
    }

    /// Validates and fills derived defaults.
    pub fn normalized(mut self) -> Result<Self> {
        if self.variant == Variant::Mole {
            self.top_k = self.n_experts;
        }
        self.validate()?;
        Ok(self)
    }
}

/// A named row of the published architecture table.
#[derive(Debug, Clone)]
pub struct Preset {
    pub scale: &'static str,
    pub name: &'static str,
    pub config: ModelConfig,
}

impl Preset {
    pub fn label(&self) -> String {
        format!("{} {}", self.scale, self.name)
    }
}

pub const TABLE_VOCAB: usize = 50_000;

/// The thirteen full-size configurations (160M / 410M / 1B activated).
/// Used for cost accounting only.
pub fn table_presets() -> Vec<Preset> {
    let v = TABLE_VOCAB;
    let mk = |scale, name, config: ModelConfig| Preset {
        scale,
        name,
        config: config.with_max_seq(2048),
    };
    vec![
        mk("160M", "Dense", ModelConfig::dense(12, 768, 12, 3072, v)),
        mk("160M", "MoE-10E", ModelConfig::moe(12, 768, 12, 1536, 10, 2, v)),
        mk("160M", "MoLE-4E", ModelConfig::mole(12, 768, 12, 3072, 3072, 4, v)),
        mk("160M", "MoE-34E", ModelConfig::moe(12, 768, 12, 1536, 34, 2, v)),
        mk("160M", "MoLE-16E", ModelConfig::mole(12, 768, 12, 3072, 3072, 16, v)),
        mk("410M", "Dense", ModelConfig::dense(24, 1024, 16, 4096, v)),
        mk("410M", "MoE-10E", ModelConfig::moe(24, 1024, 16, 2048, 10, 2, v)),
        mk("410M", "MoLE-4E", ModelConfig::mole(24, 1024, 16, 4096, 4096, 4, v)),
        mk("410M", "MoE-34E", ModelConfig::moe(24, 1024, 16, 2048, 34, 2, v)),
        mk("410M", "MoLE-16E", ModelConfig::mole(24, 1024, 16, 4096, 4096, 16, v)),
        mk("1B", "Dense", ModelConfig::dense(16, 2048, 8, 8192, v)),
        mk("1B", "MoE-10E", ModelConfig::moe(16, 2048, 8, 4096, 10, 2, v)),
        mk("1B", "MoLE-4E", ModelConfig::mole(16, 2048, 8, 8192, 8192, 4, v)),
    ]
}

pub fn find_preset(label: &str) -> Option<Preset> {
    table_presets()
        .into_iter()
        .find(|p| p.label().eq_ignore_ascii_case(label))
}
