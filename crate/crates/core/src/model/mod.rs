//! The intra-context encoder: patch ViT, text encoder, cross-attention fusion
//! and the two-way matching scorer, plus the attached adapter, decoder and
//! inter-candidate encoder parameters.

pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapted_output, AdapterParams};
use crate::autograd::{AttentionLayout, Graph, NodeId};
use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence, PAD};
use crate::inter_context::InterContextParams;
use crate::masking::{apply_mask, CrossAttentionRecord, DecoderParams, MaskMatrix};
use crate::params::{Init, ParamGroup, ParamId, ParameterStore};
use crate::tensor::{Matrix, Scalar};
use layers::{Block, CrossBlock, Linear, Norm, Registrar};

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub patch_embed: Linear,
    pub vit_pos: ParamId,
    pub vit_blocks: Vec<Block>,
    pub vit_norm: Norm,
    pub token_embed: ParamId,
    pub text_pos: ParamId,
    pub text_blocks: Vec<Block>,
    pub text_norm: Norm,
    pub fusion_blocks: Vec<CrossBlock>,
    pub fusion_norm: Norm,
    pub scorer: Linear,
    pub adapter: Option<AdapterParams>,
    pub decoder: DecoderParams,
    pub inter: InterContextParams,
}

impl ModelLayout {
    fn build<T: Scalar, R: Rng>(arch: &ArchConfig, store: &mut ParameterStore<T>, rng: &mut R) -> Self {
        let m = &arch.model;
        let d = m.vit_width;
        let hidden = m.mlp_width();
        let act = m.activation;

        let mut reg = Registrar::new(store, rng, ParamGroup::ImageEncoder);
        let patch_embed = reg.linear("vit.patch_embed", m.pixels_per_patch(), d);
        let vit_pos = reg.tensor("vit.pos", m.num_patches(), d, Init::Normal(0.1));
        let vit_blocks = (0..m.vit_depth)
            .map(|i| reg.block(&format!("vit.blocks.{i}"), d, hidden, act))
            .collect();
        let vit_norm = reg.norm("vit.norm", d);

        reg.group = ParamGroup::TextEncoder;
        let token_embed = reg.tensor("text.token_embed", m.text_vocab, d, Init::Normal(1.0));
        let text_pos = reg.tensor("text.pos", m.max_tokens, d, Init::Normal(0.1));
        let text_blocks = (0..m.text_depth)
            .map(|i| reg.block(&format!("text.blocks.{i}"), d, hidden, act))
            .collect();
        let text_norm = reg.norm("text.norm", d);

        reg.group = ParamGroup::Fusion;
        let fusion_blocks = (0..m.fusion_depth)
            .map(|i| reg.cross_block(&format!("fusion.blocks.{i}"), d, hidden, act))
            .collect();
        let fusion_norm = reg.norm("fusion.norm", d);

        reg.group = ParamGroup::Scorer;
        let scorer = reg.linear("scorer", d, 2);

        reg.group = ParamGroup::Adapter;
        let adapter = arch.adapter.as_ref().map(|a| AdapterParams::build(&mut reg, m, a));
        let decoder = DecoderParams::build(&mut reg, m, &arch.decoder);
        reg.group = ParamGroup::InterContext;
        let inter = InterContextParams::build(&mut reg, m, &arch.inter);

        Self {
            patch_embed,
            vit_pos,
            vit_blocks,
            vit_norm,
            token_embed,
            text_pos,
            text_blocks,
            text_norm,
            fusion_blocks,
            fusion_norm,
            scorer,
            adapter,
            decoder,
            inter,
        }
    }
}

/// Architecture, parameters and the handles that address them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    arch: ArchConfig,
    params: ParameterStore<T>,
    layout: ModelLayout,
}

/// Per-layer ViT states and the final (optionally adapted) output for a
/// batch of `items` images, each `seq_len` rows.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    pub items: usize,
    pub seq_len: usize,
    /// X¹..Xᵐ.
    pub layers: Vec<NodeId>,
    /// Output of the ViT (after its final normalisation).
    pub vit_output: NodeId,
    /// `vit_output + Y` when the adapter is active, otherwise `vit_output`.
    pub output: NodeId,
}

#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub items: usize,
    pub seq_len: usize,
    pub states: NodeId,
    /// Per row, `true` for real tokens.
    pub valid: Vec<bool>,
}

/// Multimodal states for a list of (text, image) pairs.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub pairs: Vec<(usize, usize)>,
    pub seq_len: usize,
    pub patches: usize,
    pub states: NodeId,
    /// Cross-attention node of every fusion layer.
    pub cross_attention: Vec<NodeId>,
    valid: Vec<bool>,
}

impl FusionOutput {
    /// Detached cross-attention record of pair `pair`.
    pub fn record<T: Scalar>(&self, g: &Graph<'_, T>, pair: usize) -> Result<CrossAttentionRecord> {
        let mut data = Vec::new();
        let mut heads = 0;
        for &node in &self.cross_attention {
            let (layout, probs) = g
                .attention_probs(node)
                .ok_or_else(|| Error::Usage("fusion node holds no attention".into()))?;
            heads = layout.heads;
            let per_pair = heads * self.seq_len * self.patches;
            data.extend(probs[pair * per_pair..(pair + 1) * per_pair].iter().map(|p| p.as_f64()));
        }
        let pad = self.valid[pair * self.seq_len..(pair + 1) * self.seq_len]
            .iter()
            .map(|v| !v)
            .collect();
        CrossAttentionRecord::new(self.cross_attention.len(), heads, self.seq_len, self.patches, data, pad)
    }
}

/// Two-way matching logits `(match, mismatch)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    pub logits: [f64; 2],
}

impl MatchScore {
    pub fn match_probability(&self) -> f64 {
        let [a, b] = self.logits;
        1.0 / (1.0 + (b - a).exp())
    }

    /// Log-odds of a match, `e_match - e_mismatch`.
    pub fn log_odds(&self) -> f64 {
        self.logits[0] - self.logits[1]
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        Self::with_rng(arch, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParameterStore::new();
        let layout = ModelLayout::build(&arch, &mut params, rng);
        Ok(Self { arch, params, layout })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Trainable flags for a graph over this model's parameters.
    pub fn trainable_mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.params.iter().map(|(_, p)| groups.contains(&p.group)).collect()
    }

    fn patch_matrix(&self, g: &mut Graph<'_, T>, images: &[&Image]) -> Result<NodeId> {
        let cfg = &self.arch.model;
        let mut parts = Vec::with_capacity(images.len());
        for img in images {
            img.check_dims(cfg)?;
            parts.push(img.patches::<T>(cfg.patch_size));
        }
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        Ok(g.constant(Matrix::vstack(&refs)))
    }

    fn run_vit(&self, g: &mut Graph<'_, T>, mut x: NodeId, items: usize, seq_len: usize, adapter: bool) -> Result<ImageEncoding> {
        let cfg = &self.arch.model;
        let mut layers = Vec::with_capacity(cfg.vit_depth);
        for block in &self.layout.vit_blocks {
            let layout = AttentionLayout::self_attention(cfg.vit_heads, items, seq_len, None);
            x = block.forward(g, x, layout).0;
            layers.push(x);
        }
        let vit_output = self.layout.vit_norm.forward(g, x);
        let output = match (&self.layout.adapter, adapter) {
            (Some(a), true) => {
                let y = a.forward(g, &layers)?;
                adapted_output(g, vit_output, y)?
            }
            _ => vit_output,
        };
        Ok(ImageEncoding {
            items,
            seq_len,
            layers,
            vit_output,
            output,
        })
    }

    fn embed_patches(&self, g: &mut Graph<'_, T>, images: &[&Image]) -> Result<NodeId> {
        let p2 = self.arch.model.num_patches();
        let patches = self.patch_matrix(g, images)?;
        let h = self.layout.patch_embed.forward(g, patches);
        let table = g.param(self.layout.vit_pos);
        let pos = g.gather_rows(table, (0..images.len()).flat_map(|_| 0..p2).collect());
        Ok(g.add(h, pos))
    }

    /// Patchify, embed, run the ViT; add the adapter residual when the model
    /// has one.
    pub fn encode_images(&self, g: &mut Graph<'_, T>, images: &[&Image]) -> Result<ImageEncoding> {
        self.encode_images_with(g, images, true)
    }

    /// As [`Model::encode_images`]; `use_adapter = false` bypasses the adapter.
    pub fn encode_images_with(&self, g: &mut Graph<'_, T>, images: &[&Image], use_adapter: bool) -> Result<ImageEncoding> {
        let x = self.embed_patches(g, images)?;
        self.run_vit(g, x, images.len(), self.arch.model.num_patches(), use_adapter)
    }

    /// Encoder pass over visible patches only. All masks must share μ.
    pub fn encode_images_masked(&self, g: &mut Graph<'_, T>, images: &[&Image], masks: &[MaskMatrix]) -> Result<ImageEncoding> {
        if images.len() != masks.len() {
            return Err(Error::Shape("one mask per image required".into()));
        }
        let mu = masks.first().map_or(0, |m| m.count());
        if masks.iter().any(|m| m.count() != mu) {
            return Err(Error::Shape("masks in a batch must share their cardinality".into()));
        }
        let x = self.embed_patches(g, images)?;
        let (visible, _) = apply_mask(g, x, masks)?;
        let seq = self.arch.model.num_patches() - mu;
        self.run_vit(g, visible, images.len(), seq, true)
    }

    /// Token + positional embedding and the text transformer. Sequences are
    /// right-padded to the longest one in the batch.
    pub fn encode_text(&self, g: &mut Graph<'_, T>, texts: &[&TokenSequence]) -> Result<TextEncoding> {
        let cfg = &self.arch.model;
        for t in texts {
            t.validate(cfg)?;
        }
        let seq_len = texts.iter().map(|t| t.len()).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::Input("no tokens to encode".into()));
        }
        let mut ids = Vec::with_capacity(texts.len() * seq_len);
        let mut valid = Vec::with_capacity(texts.len() * seq_len);
        for t in texts {
            for i in 0..seq_len {
                match t.ids().get(i) {
                    Some(&id) => {
                        ids.push(id as usize);
                        valid.push(!t.pad_mask()[i]);
                    }
                    None => {
                        ids.push(PAD as usize);
                        valid.push(false);
                    }
                }
            }
        }
        let table = g.param(self.layout.token_embed);
        let mut x = g.gather_rows(table, ids);
        if cfg.text_positions {
            let pos_table = g.param(self.layout.text_pos);
            let pos = g.gather_rows(pos_table, (0..texts.len()).flat_map(|_| 0..seq_len).collect());
            x = g.add(x, pos);
        }
        for block in &self.layout.text_blocks {
            let layout = AttentionLayout::self_attention(cfg.vit_heads, texts.len(), seq_len, Some(valid.clone()));
            x = block.forward(g, x, layout).0;
        }
        let states = self.layout.text_norm.forward(g, x);
        Ok(TextEncoding {
            items: texts.len(),
            seq_len,
            states,
            valid,
        })
    }

    /// Cross-attention fusion of `(text index, image index)` pairs.
    pub fn fuse(
        &self,
        g: &mut Graph<'_, T>,
        text: &TextEncoding,
        image: &ImageEncoding,
        pairs: &[(usize, usize)],
    ) -> Result<FusionOutput> {
        let cfg = &self.arch.model;
        if let Some(&(t, i)) = pairs.iter().find(|&&(t, i)| t >= text.items || i >= image.items) {
            return Err(Error::Shape(format!("pair ({t}, {i}) is out of range")));
        }
        let l = text.seq_len;
        let rows: Vec<usize> = pairs.iter().flat_map(|&(t, _)| t * l..(t + 1) * l).collect();
        let valid: Vec<bool> = rows.iter().map(|&r| text.valid[r]).collect();
        let mut x = g.gather_rows(text.states, rows);
        let mut cross_attention = Vec::with_capacity(cfg.fusion_depth);
        for block in &self.layout.fusion_blocks {
            let self_layout = AttentionLayout::self_attention(cfg.vit_heads, pairs.len(), l, Some(valid.clone()));
            let cross_layout = AttentionLayout {
                heads: cfg.vit_heads,
                q_len: l,
                kv_len: image.seq_len,
                kv_index: pairs.iter().map(|&(_, i)| i).collect(),
                key_valid: None,
            };
            let (nx, probs) = block.forward(g, x, self_layout, image.output, cross_layout);
            x = nx;
            cross_attention.push(probs);
        }
        let states = self.layout.fusion_norm.forward(g, x);
        Ok(FusionOutput {
            pairs: pairs.to_vec(),
            seq_len: l,
            patches: image.seq_len,
            states,
            cross_attention,
            valid,
        })
    }

    /// First-token (BOS) multimodal state of every pair, `pairs x d`.
    pub fn pooled(&self, g: &mut Graph<'_, T>, fusion: &FusionOutput) -> NodeId {
        let idx = (0..fusion.pairs.len()).map(|p| p * fusion.seq_len).collect();
        g.gather_rows(fusion.states, idx)
    }

    /// Matching logits, `pairs x 2`.
    pub fn itm_logits(&self, g: &mut Graph<'_, T>, fusion: &FusionOutput) -> NodeId {
        let pooled = self.pooled(g, fusion);
        self.layout.scorer.forward(g, pooled)
    }

    pub fn match_scores(&self, g: &Graph<'_, T>, logits: NodeId) -> Vec<MatchScore> {
        let v = g.value(logits);
        (0..v.rows())
            .map(|r| MatchScore {
                logits: [v.get(r, 0).as_f64(), v.get(r, 1).as_f64()],
            })
            .collect()
    }

    /// Unimodal embeddings used for hard-negative mining: mean over patch
    /// rows of the (adapted) image output and over real tokens of the text
    /// output.
    pub fn unimodal_embeddings(&self, g: &Graph<'_, T>, image: &ImageEncoding, text: &TextEncoding) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let iv = g.value(image.output);
        let imgs = (0..image.items)
            .map(|b| mean_rows(iv, b * image.seq_len..(b + 1) * image.seq_len, |_| true))
            .collect();
        let tv = g.value(text.states);
        let txts = (0..text.items)
            .map(|b| mean_rows(tv, b * text.seq_len..(b + 1) * text.seq_len, |r| text.valid[r]))
            .collect();
        (imgs, txts)
    }
}

fn mean_rows<T: Scalar>(m: &Matrix<T>, rows: std::ops::Range<usize>, keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    let mut n = 0usize;
    for r in rows.filter(|&r| keep(r)) {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v.as_f64();
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}
