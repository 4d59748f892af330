//! Run configuration as a flat `key = value` document.
//!
//! Model, data and masking keys sit at the top level. Optimizer settings are
//! grouped per stage under the prefixes `backbone.` (stage 0), `pretrain.`
//! (stage 1), `finetune.` (stage 2) and `context.` (stage 3). Unknown keys
//! are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{quarter_depths, AdapterConfig, Aggregation, ArchConfig, ModelConfig};
use crate::data::synthetic::{CueKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::masking::TokenReduction;
use crate::objectives::MiningMode;

use super::optimizer::{AdamConfig, Schedule, WeightDecay};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub max_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Rate of the trained heads (or of everything trainable when no
    /// separate backbone rate is set).
    pub base_lr: f64,
    /// Separate rate for backbone groups, when they train.
    pub backbone_lr: Option<f64>,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    /// Per-epoch exponential decay factor.
    pub gamma: Option<f64>,
}

impl StageSettings {
    fn desk(max_epoch: usize, batch_size: usize, optimizer: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            max_epoch,
            batch_size,
            optimizer,
            base_lr: lr,
            backbone_lr: None,
            warmup_lr: lr * 0.01,
            warmup_steps: 0,
            weight_decay,
            betas: (0.9, 0.999),
            gamma: None,
        }
    }

    pub fn adam_config(&self, clip_norm: Option<f64>) -> AdamConfig {
        AdamConfig {
            betas: self.betas,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            decay_mode: match self.optimizer {
                OptimizerKind::AdamW => WeightDecay::Decoupled,
                OptimizerKind::Adam => WeightDecay::L2,
            },
            clip_norm,
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_lr: self.warmup_lr,
            warmup_steps: self.warmup_steps,
            gamma: self.gamma,
            steps_per_epoch,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let rates = [Some(self.base_lr), self.backbone_lr, Some(self.warmup_lr)];
        if rates.iter().flatten().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!("{section}: learning rates must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{section}: batch size must be positive")));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("{section}: weight decay must be non-negative")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub adapter: bool,
    /// Explicit insertion layers; quarter depths when `None`.
    pub insertion_layers: Option<Vec<usize>>,
    pub reduction: usize,
    pub aggregation: Aggregation,
    pub mask_ratio: f64,
    pub attention_reduction: TokenReduction,
    pub decoder_depth: usize,
    pub inter_depth: usize,
    pub mining: MiningMode,
    /// Let the scorer train together with the adapter in stage 1.
    pub train_scorer: bool,
    pub data: SyntheticSpec,
    pub train_sets: usize,
    pub eval_sets: usize,
    pub backbone: StageSettings,
    pub pretrain: StageSettings,
    pub finetune: StageSettings,
    pub context: StageSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut finetune = StageSettings::desk(4, 4, OptimizerKind::Adam, 2e-4, 1e-2);
        finetune.backbone_lr = Some(2e-4);
        finetune.gamma = Some(0.95);
        Self {
            seed: 1,
            model: ModelConfig::desk(),
            adapter: true,
            insertion_layers: None,
            reduction: 2,
            aggregation: Aggregation::Concat,
            mask_ratio: 0.25,
            attention_reduction: TokenReduction::MeanTokens,
            decoder_depth: 2,
            inter_depth: 2,
            mining: MiningMode::Hardest,
            train_scorer: false,
            data: SyntheticSpec::default(),
            train_sets: 2000,
            eval_sets: 500,
            backbone: StageSettings::desk(3, 10, OptimizerKind::AdamW, 1e-3, 1e-4),
            pretrain: StageSettings::desk(3, 10, OptimizerKind::AdamW, 1e-3, 1e-4),
            finetune,
            context: StageSettings::desk(3, 8, OptimizerKind::Adam, 1e-3, 1e-2),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_betas(key: &str, v: &str) -> Result<(f64, f64)> {
    let inner = v.trim().trim_start_matches('(').trim_end_matches(')');
    match parse_list::<f64>(key, inner)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("`{key}`: expected (beta1, beta2)"))),
    }
}

fn parse_scheduler(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        return Ok(None);
    }
    v.strip_prefix("ExponentialLR(")
        .and_then(|s| s.strip_suffix(')'))
        .and_then(|s| s.parse().ok())
        .map(Some)
        .ok_or_else(|| Error::Config(format!("`{key}`: expected none or ExponentialLR(gamma), got `{v}`")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

const SECTIONS: [&str; 4] = ["backbone", "pretrain", "finetune", "context"];

impl RunConfig {
    /// The published pretraining and fine-tuning settings, verbatim, for the
    /// stage-1 and stage-2 sections.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.seed = 42;
        c.pretrain = StageSettings {
            max_epoch: 20,
            batch_size: 256,
            optimizer: OptimizerKind::AdamW,
            base_lr: 3e-4,
            backbone_lr: None,
            warmup_lr: 1e-6,
            warmup_steps: 3000,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            gamma: None,
        };
        c.finetune = StageSettings {
            max_epoch: 25,
            batch_size: 36,
            optimizer: OptimizerKind::Adam,
            base_lr: 1e-4,
            backbone_lr: Some(2e-6),
            warmup_lr: 1e-4,
            warmup_steps: 0,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            gamma: Some(0.95),
        };
        c.mask_ratio = 0.25;
        c.reduction = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    pub fn stage(&self, stage: u8) -> &StageSettings {
        match stage {
            0 => &self.backbone,
            1 => &self.pretrain,
            2 => &self.finetune,
            _ => &self.context,
        }
    }

    fn section_mut(&mut self, name: &str) -> Option<&mut StageSettings> {
        match name {
            "backbone" => Some(&mut self.backbone),
            "pretrain" => Some(&mut self.pretrain),
            "finetune" => Some(&mut self.finetune),
            "context" => Some(&mut self.context),
            _ => None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some((section, field)) = key.split_once('.') {
            let s = self
                .section_mut(section)
                .ok_or_else(|| Error::Config(format!("unknown section `{section}`")))?;
            match field {
                "max epoch" => s.max_epoch = parse_num(key, v)?,
                "batch size" => s.batch_size = parse_num(key, v)?,
                "optimizer" => {
                    s.optimizer = match v {
                        "Adam" => OptimizerKind::Adam,
                        "AdamW" => OptimizerKind::AdamW,
                        _ => return Err(Error::Config(format!("`{key}`: expected Adam or AdamW"))),
                    }
                }
                "base learning rate" | "head learning rate" => s.base_lr = parse_num(key, v)?,
                "backbone learning rate" => {
                    s.backbone_lr = if v == "none" { None } else { Some(parse_num(key, v)?) }
                }
                "warmup learning rate" => s.warmup_lr = parse_num(key, v)?,
                "warmup steps" => s.warmup_steps = parse_num(key, v)?,
                "weight decay" => s.weight_decay = parse_num(key, v)?,
                "momentum" => s.betas = parse_betas(key, v)?,
                "learning rate scheduler" => s.gamma = parse_scheduler(key, v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        let m = &mut self.model;
        match key {
            "random seed" => self.seed = parse_num(key, v)?,
            "image height" => m.image_height = parse_num(key, v)?,
            "image width" => m.image_width = parse_num(key, v)?,
            "patch size" => m.patch_size = parse_num(key, v)?,
            "vit depth" => m.vit_depth = parse_num(key, v)?,
            "vit width" => m.vit_width = parse_num(key, v)?,
            "vit heads" => m.vit_heads = parse_num(key, v)?,
            "vocab size" => m.text_vocab = parse_num(key, v)?,
            "text depth" => m.text_depth = parse_num(key, v)?,
            "fusion depth" => m.fusion_depth = parse_num(key, v)?,
            "max tokens" => m.max_tokens = parse_num(key, v)?,
            "mlp ratio" => m.mlp_ratio = parse_num(key, v)?,
            "activation" => m.activation = v.parse()?,
            "text positions" => m.text_positions = parse_bool(key, v)?,
            "adapter" => self.adapter = parse_bool(key, v)?,
            "insertion layers" => {
                self.insertion_layers = if v == "quarters" { None } else { Some(parse_list(key, v)?) }
            }
            "reduction" => self.reduction = parse_num(key, v)?,
            "aggregation" => self.aggregation = v.parse()?,
            "mask ratio" => self.mask_ratio = parse_num(key, v)?,
            "attention reduction" => self.attention_reduction = v.parse()?,
            "decoder depth" => self.decoder_depth = parse_num(key, v)?,
            "inter depth" => self.inter_depth = parse_num(key, v)?,
            "mining" => {
                self.mining = match v {
                    "hardest" => MiningMode::Hardest,
                    s => match s.strip_prefix("sampled(").and_then(|s| s.strip_suffix(')')) {
                        Some(t) => MiningMode::Sampled {
                            temperature: parse_num(key, t)?,
                        },
                        None => return Err(Error::Config(format!("`{key}`: expected hardest or sampled(t)"))),
                    },
                }
            }
            "train scorer" => self.train_scorer = parse_bool(key, v)?,
            "candidates" => self.data.candidates = parse_num(key, v)?,
            "cue kinds" => {
                self.data.kinds = v.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<CueKind>>>()?
            }
            "noise" => self.data.noise = parse_num(key, v)?,
            "video fraction" => self.data.video_fraction = parse_num(key, v)?,
            "train sets" => self.train_sets = parse_num(key, v)?,
            "eval sets" => self.eval_sets = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let mut out: Vec<(String, String)> = vec![
            ("random seed".into(), self.seed.to_string()),
            ("image height".into(), m.image_height.to_string()),
            ("image width".into(), m.image_width.to_string()),
            ("patch size".into(), m.patch_size.to_string()),
            ("vit depth".into(), m.vit_depth.to_string()),
            ("vit width".into(), m.vit_width.to_string()),
            ("vit heads".into(), m.vit_heads.to_string()),
            ("vocab size".into(), m.text_vocab.to_string()),
            ("text depth".into(), m.text_depth.to_string()),
            ("fusion depth".into(), m.fusion_depth.to_string()),
            ("max tokens".into(), m.max_tokens.to_string()),
            ("mlp ratio".into(), m.mlp_ratio.to_string()),
            ("activation".into(), m.activation.to_string()),
            ("text positions".into(), m.text_positions.to_string()),
            ("adapter".into(), self.adapter.to_string()),
            (
                "insertion layers".into(),
                self.insertion_layers.as_deref().map_or("quarters".into(), join),
            ),
            ("reduction".into(), self.reduction.to_string()),
            ("aggregation".into(), self.aggregation.to_string()),
            ("mask ratio".into(), self.mask_ratio.to_string()),
            ("attention reduction".into(), self.attention_reduction.to_string()),
            ("decoder depth".into(), self.decoder_depth.to_string()),
            ("inter depth".into(), self.inter_depth.to_string()),
            (
                "mining".into(),
                match self.mining {
                    MiningMode::Hardest => "hardest".into(),
                    MiningMode::Sampled { temperature } => format!("sampled({temperature})"),
                },
            ),
            ("train scorer".into(), self.train_scorer.to_string()),
            ("candidates".into(), self.data.candidates.to_string()),
            ("cue kinds".into(), join(&self.data.kinds)),
            ("noise".into(), self.data.noise.to_string()),
            ("video fraction".into(), self.data.video_fraction.to_string()),
            ("train sets".into(), self.train_sets.to_string()),
            ("eval sets".into(), self.eval_sets.to_string()),
        ];
        for name in SECTIONS {
            let s = match name {
                "backbone" => &self.backbone,
                "pretrain" => &self.pretrain,
                "finetune" => &self.finetune,
                _ => &self.context,
            };
            let key = |k: &str| format!("{name}.{k}");
            out.push((key("max epoch"), s.max_epoch.to_string()));
            out.push((key("batch size"), s.batch_size.to_string()));
            out.push((
                key("optimizer"),
                match s.optimizer {
                    OptimizerKind::Adam => "Adam".into(),
                    OptimizerKind::AdamW => "AdamW".into(),
                },
            ));
            match s.backbone_lr {
                Some(b) => {
                    out.push((key("backbone learning rate"), format!("{b:e}")));
                    out.push((key("head learning rate"), format!("{:e}", s.base_lr)));
                }
                None => out.push((key("base learning rate"), format!("{:e}", s.base_lr))),
            }
            out.push((key("warmup learning rate"), format!("{:e}", s.warmup_lr)));
            out.push((key("warmup steps"), s.warmup_steps.to_string()));
            out.push((key("weight decay"), format!("{:e}", s.weight_decay)));
            out.push((key("momentum"), format!("({}, {})", s.betas.0, s.betas.1)));
            out.push((
                key("learning rate scheduler"),
                s.gamma.map_or("none".into(), |g| format!("ExponentialLR({g})")),
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; a `preset = name` line must come first.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k == "preset" {
                self = Self::preset(v.trim())?;
                continue;
            }
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().apply_text(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            layers: self
                .insertion_layers
                .clone()
                .unwrap_or_else(|| quarter_depths(self.model.vit_depth)),
            delta: self.reduction,
            aggregation: self.aggregation,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        let mut a = ArchConfig::new(self.model.clone());
        a.adapter = self.adapter.then(|| self.adapter_config());
        a.decoder.depth = self.decoder_depth;
        a.inter.depth = self.inter_depth;
        a.inter.max_candidates = a.inter.max_candidates.max(self.data.candidates);
        a
    }

    /// Synthetic data matching the model geometry.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            height: self.model.image_height,
            width: self.model.image_width,
            patch_size: self.model.patch_size,
            ..self.data.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.model.channels != 3 {
            return Err(Error::Config("only RGB images are supported".into()));
        }
        for name in SECTIONS {
            let s = match name {
                "backbone" => &self.backbone,
                "pretrain" => &self.pretrain,
                "finetune" => &self.finetune,
                _ => &self.context,
            };
            s.validate(name)?;
        }
        Ok(())
    }

    /// Short hex digest of the full settings text.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        for c in [RunConfig::default(), RunConfig::paper()] {
            assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn published_settings_are_stored_verbatim() {
        let text = RunConfig::paper().to_text();
        for line in [
            "pretrain.base learning rate = 3e-4",
            "pretrain.warmup learning rate = 1e-6",
            "pretrain.warmup steps = 3000",
            "pretrain.weight decay = 1e-4",
            "pretrain.momentum = (0.9, 0.999)",
            "mask ratio = 0.25",
            "reduction = 2",
            "finetune.backbone learning rate = 2e-6",
            "finetune.head learning rate = 1e-4",
            "finetune.learning rate scheduler = ExponentialLR(0.95)",
            "finetune.weight decay = 1e-2",
            "random seed = 42",
        ] {
            assert!(text.contains(line), "missing `{line}` in\n{text}");
        }
    }

    #[test]
    fn bad_documents_are_rejected() {
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("colour = red").is_err());
        assert!(RunConfig::parse("mask ratio = 1.5").is_err());
        assert!(RunConfig::parse("pretrain.base learning rate = 0").is_err());
        assert!(RunConfig::parse("reduction = 3").is_err());
    }

    #[test]
    fn values_split_on_first_equals() {
        let c = RunConfig::parse("preset = desk\nmask ratio = 0.5\nfinetune.learning rate scheduler = none").unwrap();
        assert_eq!(c.mask_ratio, 0.5);
        assert_eq!(c.finetune.gamma, None);
    }
}
