use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Frozen backbone, learnable layer mixture, extra layers, one word-level head.
    Single,
    /// Everything trainable, frame-level head below the word-level head.
    Hierarchical,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::Single),
            "hierarchical" => Ok(Variant::Hierarchical),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Single => "single",
            Variant::Hierarchical => "hierarchical",
        })
    }
}

/// Encoder shape. Layer depths count transformer blocks: depth 0 is the (masked,
/// position-encoded) input projection, depth `n` the output of block `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub backbone_layers: usize,
    pub extra_layers: usize,
    pub frame_head_layer: usize,
    pub pw_head_layer: usize,
    pub k_frame: usize,
    pub k_pw: usize,
    pub variant: Variant,
    pub lambda: f64,
    /// Feed-forward width as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            model_dim: 32,
            n_heads: 4,
            backbone_layers: 4,
            extra_layers: 2,
            frame_head_layer: 4,
            pw_head_layer: 6,
            k_frame: 50,
            k_pw: 50,
            variant: Variant::Hierarchical,
            lambda: 1.0,
            ff_mult: 4,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// HuBERT-Base-sized layout: 12 backbone layers, two extra layers, heads at 12 / 14.
    pub fn full_scale() -> Self {
        Self {
            input_dim: 512,
            model_dim: 768,
            n_heads: 12,
            backbone_layers: 12,
            extra_layers: 2,
            frame_head_layer: 12,
            pw_head_layer: 14,
            k_frame: 500,
            k_pw: 4096,
            ff_mult: 4,
            ..Self::default()
        }
    }

    pub fn total_layers(&self) -> usize {
        self.backbone_layers + self.extra_layers
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads.max(1)
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_mult
    }

    /// Depth at which the word-level head reads. The Single variant always reads the top.
    pub fn pw_depth(&self) -> usize {
        match self.variant {
            Variant::Single => self.total_layers(),
            Variant::Hierarchical => self.pw_head_layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.model_dim == 0 || self.k_pw == 0 {
            return bad("input_dim, model_dim and k_pw must be positive".into());
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.extra_layers == 0 {
            return bad("extra_layers must be at least 1".into());
        }
        if self.ff_mult == 0 || self.ln_eps <= 0.0 {
            return bad("ff_mult and ln_eps must be positive".into());
        }
        if !(self.frame_head_layer < self.pw_head_layer && self.pw_head_layer <= self.total_layers()) {
            return bad(format!(
                "need frame_head_layer ({}) < pw_head_layer ({}) <= {} layers",
                self.frame_head_layer,
                self.pw_head_layer,
                self.total_layers()
            ));
        }
        if self.variant == Variant::Hierarchical && self.k_frame == 0 {
            return bad("k_frame must be positive for the hierarchical variant".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets_validate() {
        ModelConfig::default().validate().unwrap();
        let p = ModelConfig::full_scale();
        p.validate().unwrap();
        assert_eq!((p.frame_head_layer, p.pw_head_layer, p.k_pw), (12, 14, 4096));
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut c = ModelConfig {
            frame_head_layer: 6,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.frame_head_layer = 4;
        c.extra_layers = 0;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
