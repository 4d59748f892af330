//! Text-guided masking: salience from fusion cross-attention, top-μ patch
//! selection, patch removal, and the reconstruction decoder.

use rand::Rng;

use crate::autograd::{AttentionLayout, Graph, NodeId};
use crate::config::{DecoderConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::layers::{Block, Linear, Norm, Registrar};
use crate::params::{Init, ParamGroup, ParamId};
use crate::tensor::Scalar;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Cross-attention probabilities of one text/image pair, laid out as
/// `layers x heads x tokens x patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionRecord {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub patches: usize,
    pub data: Vec<f64>,
    /// `true` for padded token positions.
    pub pad: Vec<bool>,
}

impl CrossAttentionRecord {
    pub fn new(layers: usize, heads: usize, tokens: usize, patches: usize, data: Vec<f64>, pad: Vec<bool>) -> Result<Self> {
        let rec = Self {
            layers,
            heads,
            tokens,
            patches,
            data,
            pad,
        };
        rec.validate()?;
        Ok(rec)
    }

    #[inline]
    pub fn row(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let start = ((layer * self.heads + head) * self.tokens + token) * self.patches;
        &self.data[start..start + self.patches]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.layers * self.heads * self.tokens * self.patches {
            return Err(Error::Shape("attention record size does not match its dimensions".into()));
        }
        if self.pad.len() != self.tokens {
            return Err(Error::Shape("pad mask length differs from token count".into()));
        }
        for row in self.data.chunks(self.patches.max(1)) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Input("attention row is not a distribution over patches".into()));
            }
        }
        Ok(())
    }
}

/// Per-patch ranking key for mask selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceVector(pub Vec<f64>);

impl SalienceVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How the token axis is reduced when building salience.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenReduction {
    MeanTokens,
    MaxTokens,
    RandomToken,
}

impl std::str::FromStr for TokenReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_tokens" => Ok(Self::MeanTokens),
            "max_tokens" => Ok(Self::MaxTokens),
            "random_token" => Ok(Self::RandomToken),
            other => Err(Error::Config(format!("unknown token reduction `{other}`"))),
        }
    }
}

impl std::fmt::Display for TokenReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MeanTokens => "mean_tokens",
            Self::MaxTokens => "max_tokens",
            Self::RandomToken => "random_token",
        })
    }
}

/// Mean over layers and heads, then the token reduction over non-pad tokens.
pub fn aggregate_attention(
    record: &CrossAttentionRecord,
    strategy: TokenReduction,
    rng: &mut impl Rng,
) -> Result<SalienceVector> {
    let live: Vec<usize> = (0..record.tokens).filter(|&t| !record.pad[t]).collect();
    if live.is_empty() {
        return Err(Error::Input("every token of the attention record is padding".into()));
    }
    let lh = (record.layers * record.heads) as f64;
    let per_token = |t: usize| -> Vec<f64> {
        let mut acc = vec![0.0; record.patches];
        for l in 0..record.layers {
            for h in 0..record.heads {
                for (a, &p) in acc.iter_mut().zip(record.row(l, h, t)) {
                    *a += p;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= lh);
        acc
    };
    let out = match strategy {
        TokenReduction::MeanTokens => {
            let mut acc = vec![0.0; record.patches];
            for &t in &live {
                for (a, v) in acc.iter_mut().zip(per_token(t)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= live.len() as f64);
            acc
        }
        TokenReduction::MaxTokens => {
            let mut acc = vec![f64::NEG_INFINITY; record.patches];
            for &t in &live {
                for (a, v) in acc.iter_mut().zip(per_token(t)) {
                    *a = a.max(v);
                }
            }
            acc
        }
        TokenReduction::RandomToken => per_token(live[rng.random_range(0..live.len())]),
    };
    Ok(SalienceVector(out))
}

/// `max(1, round(π·p²))` with halves rounded up, capped at `p²`.
pub fn mask_count(ratio: f64, patches: usize) -> usize {
    let raw = (ratio * patches as f64 + 0.5).floor() as usize;
    raw.max(1).min(patches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    mask: Vec<bool>,
    ratio_bits: u64,
}

impl MaskMatrix {
    pub fn from_indices(patches: usize, indices: &[usize], ratio: f64) -> Result<Self> {
        let mut mask = vec![false; patches];
        for &i in indices {
            if i >= patches {
                return Err(Error::Shape(format!("mask index {i} outside {patches} patches")));
            }
            mask[i] = true;
        }
        let m = Self {
            mask,
            ratio_bits: ratio.to_bits(),
        };
        if m.count() != mask_count(ratio, patches) {
            return Err(Error::Input(format!(
                "{} masked patches, ratio {ratio} requires {}",
                m.count(),
                mask_count(ratio, patches)
            )));
        }
        Ok(m)
    }

    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// μ, the number of masked patches.
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Masked patch indices, ascending.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    /// Unmasked patch indices, ascending.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// The μ most salient patches; ties go to the lower patch index.
pub fn select_mask(salience: &SalienceVector, ratio: f64) -> Result<MaskMatrix> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Input(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let s = &salience.0;
    if s.is_empty() {
        return Err(Error::Input("empty salience vector".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("salience contains non-finite values".into()));
    }
    let mu = mask_count(ratio, s.len());
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    MaskMatrix::from_indices(s.len(), &order[..mu], ratio)
}

/// Uniformly random mask of the same cardinality (ablation only).
pub fn random_mask(patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskMatrix> {
    let mu = mask_count(ratio, patches);
    let picked = rand::seq::index::sample(rng, patches, mu).into_vec();
    MaskMatrix::from_indices(patches, &picked, ratio)
}

/// Drop masked rows from a batch of `items` patch sequences, each of
/// `masks[b].len()` rows. Returns the visible rows (original order within
/// each item) and each item's masked indices.
pub fn apply_mask<T: Scalar>(g: &mut Graph<'_, T>, embeddings: NodeId, masks: &[MaskMatrix]) -> Result<(NodeId, Vec<Vec<usize>>)> {
    let rows = g.value(embeddings).rows();
    let per_item = masks.first().map_or(0, |m| m.len());
    if masks.iter().any(|m| m.len() != per_item) || per_item * masks.len() != rows {
        return Err(Error::Shape(format!(
            "{} masks over {rows} embedding rows do not line up",
            masks.len()
        )));
    }
    let mut index = Vec::new();
    let mut masked = Vec::with_capacity(masks.len());
    for (b, m) in masks.iter().enumerate() {
        index.extend(m.visible().into_iter().map(|i| b * per_item + i));
        masked.push(m.masked());
    }
    Ok((g.gather_rows(embeddings, index), masked))
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

/// Predictions for masked patches: `items·μ x S`, item-major.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput {
    pub predictions: NodeId,
    pub masked: Vec<Vec<usize>>,
}

impl DecoderParams {
    pub fn build<T: Scalar, R: Rng>(reg: &mut Registrar<'_, T, R>, model: &ModelConfig, config: &DecoderConfig) -> Self {
        let w = config.width;
        reg.group = ParamGroup::Decoder;
        let embed = reg.linear("decoder.embed", model.vit_width, w);
        let pos = reg.tensor("decoder.pos", model.num_patches(), w, Init::Normal(0.1));
        let blocks = (0..config.depth)
            .map(|i| reg.block(&format!("decoder.blocks.{i}"), w, w * model.mlp_ratio, model.activation))
            .collect();
        let norm = reg.norm("decoder.norm", w);
        let head = reg.linear("decoder.head", w, model.pixels_per_patch());
        reg.group = ParamGroup::MaskEmbedding;
        let mask_token = reg.tensor("decoder.mask_token", 1, w, Init::Normal(0.1));
        Self {
            config: config.clone(),
            embed,
            mask_token,
            pos,
            blocks,
            norm,
            head,
        }
    }

    /// Rebuild full-length sequences (mask embedding at masked positions,
    /// positional table everywhere), run the decoder stack and project the
    /// masked positions to pixels.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, visible: NodeId, masks: &[MaskMatrix]) -> Result<ReconstructionOutput> {
        let items = masks.len();
        let patches = masks.first().map_or(0, |m| m.len());
        let n_visible: usize = masks.iter().map(|m| patches - m.count()).sum();
        if g.value(visible).rows() != n_visible {
            return Err(Error::Shape(format!(
                "decoder got {} visible rows, masks leave {n_visible}",
                g.value(visible).rows()
            )));
        }
        if g.store().value(self.pos).rows() != patches {
            return Err(Error::Shape(format!("decoder positional table does not cover {patches} patches")));
        }
        let emb = self.embed.forward(g, visible);
        let mask_tok = g.param(self.mask_token);
        let pool = g.concat_rows(vec![emb, mask_tok]);
        let mut index = Vec::with_capacity(items * patches);
        let mut positions = Vec::with_capacity(items * patches);
        let mut cursor = 0;
        for m in masks {
            for &is_masked in m.as_slice() {
                if is_masked {
                    index.push(n_visible);
                } else {
                    index.push(cursor);
                    cursor += 1;
                }
            }
            positions.extend(0..patches);
        }
        let seq = g.gather_rows(pool, index);
        let pos_table = g.param(self.pos);
        let pos = g.gather_rows(pos_table, positions);
        let mut x = g.add(seq, pos);
        for block in &self.blocks {
            let layout = AttentionLayout::self_attention(self.config.heads, items, patches, None);
            x = block.forward(g, x, layout).0;
        }
        let x = self.norm.forward(g, x);
        let out = self.head.forward(g, x);
        let mut pick = Vec::new();
        let mut masked = Vec::with_capacity(items);
        for (b, m) in masks.iter().enumerate() {
            let idx = m.masked();
            pick.extend(idx.iter().map(|&i| b * patches + i));
            masked.push(idx);
        }
        Ok(ReconstructionOutput {
            predictions: g.gather_rows(out, pick),
            masked,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn singleton_record_reduces_to_its_row() {
        let rec = CrossAttentionRecord::new(1, 1, 1, 4, vec![0.1, 0.2, 0.3, 0.4], vec![false]).unwrap();
        let s = aggregate_attention(&rec, TokenReduction::MeanTokens, &mut rng()).unwrap();
        assert_eq!(s.0, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn mean_of_two_tokens() {
        let r1 = [0.5, 0.25, 0.25, 0.0];
        let r2 = [0.0, 0.5, 0.25, 0.25];
        let data = [r1, r2].concat();
        let rec = CrossAttentionRecord::new(1, 1, 2, 4, data, vec![false, false]).unwrap();
        let s = aggregate_attention(&rec, TokenReduction::MeanTokens, &mut rng()).unwrap();
        let expect: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(s.0, expect);
        let mx = aggregate_attention(&rec, TokenReduction::MaxTokens, &mut rng()).unwrap();
        assert_eq!(mx.0, vec![0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn pad_tokens_are_excluded() {
        let data = [[1.0, 0.0], [0.0, 1.0]].concat();
        let rec = CrossAttentionRecord::new(1, 1, 2, 2, data, vec![false, true]).unwrap();
        let s = aggregate_attention(&rec, TokenReduction::MeanTokens, &mut rng()).unwrap();
        assert_eq!(s.0, vec![1.0, 0.0]);
        let all_pad = CrossAttentionRecord::new(1, 1, 1, 2, vec![0.5, 0.5], vec![true]).unwrap();
        assert!(aggregate_attention(&all_pad, TokenReduction::MeanTokens, &mut rng()).is_err());
    }

    #[test]
    fn record_rejects_non_distributions() {
        assert!(CrossAttentionRecord::new(1, 1, 1, 2, vec![0.5, 0.6], vec![false]).is_err());
        assert!(CrossAttentionRecord::new(1, 1, 1, 2, vec![1.5, -0.5], vec![false]).is_err());
    }

    #[test]
    fn select_mask_examples() {
        let m = select_mask(&SalienceVector(vec![0.1, 0.4, 0.2, 0.3]), 0.5).unwrap();
        assert_eq!(m.masked(), vec![1, 3]);
        let m = select_mask(&SalienceVector(vec![0.3, 0.3, 0.2, 0.2]), 0.25).unwrap();
        assert_eq!(m.masked(), vec![0]);
        assert_eq!(mask_count(0.25, 196), 49);
        assert_eq!(mask_count(0.0, 16), 1);
        assert_eq!(mask_count(1.0, 16), 16);
        assert_eq!(mask_count(0.5, 3), 2);
    }

    #[test]
    fn select_mask_rejects_bad_input() {
        assert!(select_mask(&SalienceVector(vec![0.1, f64::NAN]), 0.5).is_err());
        assert!(select_mask(&SalienceVector(vec![0.1, 0.2]), 1.5).is_err());
        assert!(select_mask(&SalienceVector(vec![]), 0.5).is_err());
    }

    #[test]
    fn random_mask_has_exact_cardinality() {
        let mut r = rng();
        for _ in 0..50 {
            let m = random_mask(16, 0.25, &mut r).unwrap();
            assert_eq!(m.count(), 4);
        }
    }

    #[test]
    fn apply_mask_keeps_visible_rows_in_order() {
        use crate::params::ParameterStore;
        use crate::tensor::Matrix;
        let store = ParameterStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let emb = g.constant(Matrix::from_fn(4, 2, |r, c| (r * 10 + c) as f64));
        let mask = MaskMatrix::from_indices(4, &[1, 3], 0.5).unwrap();
        let (vis, masked) = apply_mask(&mut g, emb, &[mask]).unwrap();
        assert_eq!(g.value(vis).data(), &[0.0, 1.0, 20.0, 21.0]);
        assert_eq!(masked, vec![vec![1, 3]]);
        let short = MaskMatrix::from_indices(3, &[0], 0.25).unwrap();
        assert!(apply_mask(&mut g, emb, &[short]).is_err());
    }
}
