//! Architecture configuration: backbone dimensions plus the adapter, decoder
//! and inter-candidate encoder that attach to it.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Feed-forward nonlinearity. `Gelu` is the tanh-approximated form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu_tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" | "gelu_tanh" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub vit_depth: usize,
    pub vit_width: usize,
    pub vit_heads: usize,
    pub text_vocab: usize,
    pub text_depth: usize,
    pub fusion_depth: usize,
    pub max_tokens: usize,
    /// Hidden width of feed-forward blocks as a multiple of `vit_width`.
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Learned additive positions for text tokens.
    pub text_positions: bool,
}

impl ModelConfig {
    /// The 16x16 RGB, 4-pixel-patch configuration used for gradient checks.
    pub fn toy() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 3,
            patch_size: 4,
            vit_depth: 2,
            vit_width: 16,
            vit_heads: 2,
            text_vocab: 48,
            text_depth: 1,
            fusion_depth: 1,
            max_tokens: 8,
            mlp_ratio: 2,
            activation: Activation::Gelu,
            text_positions: true,
        }
    }

    /// Default desk-scale configuration for the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            vit_width: 32,
            vit_depth: 4,
            vit_heads: 4,
            ..Self::toy()
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// Patch count p².
    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Pixels per patch S (values, counting channels).
    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_width(&self) -> usize {
        self.vit_width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.channels == 0 {
            return err("patch size and channels must be positive".into());
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return err(format!(
                "image {}x{} is not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return err("image must be non-empty".into());
        }
        if self.vit_heads == 0 || self.vit_width % self.vit_heads != 0 {
            return err(format!(
                "vit width {} is not divisible by {} heads",
                self.vit_width, self.vit_heads
            ));
        }
        if self.vit_depth == 0 || self.text_depth == 0 || self.fusion_depth == 0 {
            return err("all depths must be at least 1".into());
        }
        if self.text_vocab < 4 {
            return err("vocabulary must reserve pad/bos/eos/unk (>= 4 ids)".into());
        }
        if self.max_tokens == 0 || self.mlp_ratio == 0 {
            return err("max tokens and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// How DPAL outputs are combined before the shared UPAL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Concat,
    Add,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Concat => "concat",
            Aggregation::Add => "add",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Aggregation::Concat),
            "add" => Ok(Aggregation::Add),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    /// 1-based ViT layer indices, sorted and unique.
    pub layers: Vec<usize>,
    /// Downsampling rate δ; the reduced width is `vit_width / delta`.
    pub delta: usize,
    pub aggregation: Aggregation,
}

impl AdapterConfig {
    /// Evenly spaced quarter depths of an `m`-layer ViT (all layers when m <= 4).
    pub fn default_for(model: &ModelConfig) -> Self {
        Self {
            layers: quarter_depths(model.vit_depth),
            delta: 2,
            aggregation: Aggregation::Concat,
        }
    }

    pub fn reduced_width(&self, model: &ModelConfig) -> usize {
        model.vit_width / self.delta
    }

    /// Input width of the UPAL.
    pub fn upal_input_width(&self, model: &ModelConfig) -> usize {
        match self.aggregation {
            Aggregation::Concat => self.layers.len() * self.reduced_width(model),
            Aggregation::Add => self.reduced_width(model),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("adapter insertion set is empty".into()));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "adapter insertion layers must be sorted and unique".into(),
            ));
        }
        if let Some(&bad) = self
            .layers
            .iter()
            .find(|&&l| l == 0 || l > model.vit_depth)
        {
            return Err(Error::Config(format!(
                "adapter layer {bad} outside 1..={}",
                model.vit_depth
            )));
        }
        if self.delta == 0 || model.vit_width % self.delta != 0 {
            return Err(Error::Config(format!(
                "downsampling rate {} does not divide vit width {}",
                self.delta, model.vit_width
            )));
        }
        Ok(())
    }
}

/// `{round(m*j/4) : j = 1..4}`, deduplicated; `[3,6,9,12]` for a 12-layer ViT.
pub fn quarter_depths(m: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..=4)
        .map(|j| ((m * j) as f64 / 4.0).round() as usize)
        .filter(|&l| l >= 1)
        .collect();
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
}

impl DecoderConfig {
    pub fn default_for(model: &ModelConfig) -> Self {
        let heads = if model.vit_width % 4 == 0 { 4 } else { model.vit_heads };
        Self {
            depth: 2,
            heads,
            width: model.vit_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be divisible by {} heads with depth >= 1",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterContextConfig {
    pub depth: usize,
    pub heads: usize,
    /// Rows of the temporal embedding table, i.e. the largest candidate set.
    pub max_candidates: usize,
}

impl InterContextConfig {
    pub fn default_for(model: &ModelConfig) -> Self {
        Self {
            depth: 2,
            heads: model.vit_heads,
            max_candidates: 10,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || model.vit_width % self.heads != 0 {
            return Err(Error::Config(
                "inter-context encoder needs depth >= 1 and heads dividing the width".into(),
            ));
        }
        if self.max_candidates < 2 {
            return Err(Error::Config("temporal table needs at least 2 rows".into()));
        }
        Ok(())
    }
}

/// Everything needed to lay out a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub decoder: DecoderConfig,
    pub inter: InterContextConfig,
}

impl ArchConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            adapter: Some(AdapterConfig::default_for(&model)),
            decoder: DecoderConfig::default_for(&model),
            inter: InterContextConfig::default_for(&model),
            model,
        }
    }

    pub fn without_adapter(mut self) -> Self {
        self.adapter = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(a) = &self.adapter {
            a.validate(&self.model)?;
        }
        self.decoder.validate()?;
        self.inter.validate(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_geometry() {
        let c = ModelConfig::toy();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.pixels_per_patch(), 48);
        let vit_b = ModelConfig {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            ..ModelConfig::toy()
        };
        assert_eq!(vit_b.num_patches(), 196);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_patch = ModelConfig {
            patch_size: 5,
            ..ModelConfig::toy()
        };
        assert!(bad_patch.validate().is_err());
        let bad_heads = ModelConfig {
            vit_heads: 3,
            ..ModelConfig::toy()
        };
        assert!(bad_heads.validate().is_err());
        let bad_vocab = ModelConfig {
            text_vocab: 3,
            ..ModelConfig::toy()
        };
        assert!(bad_vocab.validate().is_err());
        let m = ModelConfig::toy();
        let bad_delta = AdapterConfig {
            layers: vec![1],
            delta: 3,
            aggregation: Aggregation::Concat,
        };
        assert!(bad_delta.validate(&m).is_err());
        let unsorted = AdapterConfig {
            layers: vec![2, 1],
            delta: 2,
            aggregation: Aggregation::Concat,
        };
        assert!(unsorted.validate(&m).is_err());
    }

    #[test]
    fn quarter_depths_follow_twelve_layer_pattern() {
        assert_eq!(quarter_depths(12), vec![3, 6, 9, 12]);
        assert_eq!(quarter_depths(4), vec![1, 2, 3, 4]);
        assert_eq!(quarter_depths(8), vec![2, 4, 6, 8]);
        assert_eq!(quarter_depths(2), vec![1, 2]);
    }
}
