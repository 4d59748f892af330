//! Inter-candidate encoder: a small transformer over the pooled multimodal
//! representations of all candidates of a set, with learned temporal
//! (position-in-set) embeddings, producing one retrieval logit per candidate.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{AttentionLayout, Graph, NodeId};
use crate::config::{InterContextConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence};
use crate::model::layers::{Block, Linear, Norm, Registrar};
use crate::model::Model;
use crate::params::{Init, ParamId};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetKind {
    Video,
    Static,
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetKind::Video => "video",
            SetKind::Static => "static",
        })
    }
}

impl FromStr for SetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(SetKind::Video),
            "static" => Ok(SetKind::Static),
            other => Err(Error::Input(format!("unknown set kind `{other}`"))),
        }
    }
}

/// M candidate images, one query, and the index of the golden image.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub set_id: String,
    pub images: Vec<Image>,
    pub query: TokenSequence,
    pub golden: usize,
    pub kind: SetKind,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::dataset(&self.set_id, "a candidate set needs at least 2 images"));
        }
        if self.golden >= self.images.len() {
            return Err(Error::dataset(
                &self.set_id,
                format!("golden index {} out of range for {} candidates", self.golden, self.images.len()),
            ));
        }
        let first = &self.images[0];
        if self
            .images
            .iter()
            .any(|i| (i.height, i.width, i.channels) != (first.height, first.width, first.channels))
        {
            return Err(Error::dataset(&self.set_id, "candidate images differ in dimensions"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InterContextParams {
    pub config: InterContextConfig,
    pub temporal: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

impl InterContextParams {
    pub fn build<T: Scalar, R: Rng>(reg: &mut Registrar<'_, T, R>, model: &ModelConfig, config: &InterContextConfig) -> Self {
        let d = model.vit_width;
        let temporal = reg.tensor("inter.temporal", config.max_candidates, d, Init::Normal(0.1));
        let blocks = (0..config.depth)
            .map(|i| reg.block(&format!("inter.blocks.{i}"), d, model.mlp_width(), model.activation))
            .collect();
        let norm = reg.norm("inter.norm", d);
        // Zero head: every candidate starts with the same logit.
        let head = reg.linear_with("inter.head", d, 1, Init::Zeros);
        Self {
            config: config.clone(),
            temporal,
            blocks,
            norm,
            head,
        }
    }

    /// Logits `sets x m` from pooled candidate states laid out set-major
    /// (`sets·m x d`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pooled: NodeId, sets: usize, m: usize) -> Result<NodeId> {
        if m > self.config.max_candidates {
            return Err(Error::Config(format!(
                "{m} candidates exceed the temporal table of {}",
                self.config.max_candidates
            )));
        }
        if g.value(pooled).rows() != sets * m {
            return Err(Error::Shape("pooled rows do not match sets x candidates".into()));
        }
        let table = g.param(self.temporal);
        let temporal = g.gather_rows(table, (0..sets).flat_map(|_| 0..m).collect());
        let mut x = g.add(pooled, temporal);
        for block in &self.blocks {
            let layout = AttentionLayout::self_attention(self.config.heads, sets, m, None);
            x = block.forward(g, x, layout).0;
        }
        let x = self.norm.forward(g, x);
        let out = self.head.forward(g, x);
        Ok(g.reshape(out, sets, m))
    }
}

impl<T: Scalar> Model<T> {
    /// Pooled multimodal state of every (query, candidate) pair for a batch of
    /// sets sharing one candidate count, `sets·m x d`.
    pub fn pooled_candidates(&self, g: &mut Graph<'_, T>, sets: &[&CandidateSet]) -> Result<(NodeId, usize)> {
        let m = sets.first().map_or(0, |s| s.len());
        for s in sets {
            s.validate()?;
            if s.len() != m {
                return Err(Error::Shape("sets in a batch must share their candidate count".into()));
            }
        }
        let images: Vec<&Image> = sets.iter().flat_map(|s| s.images.iter()).collect();
        let queries: Vec<&TokenSequence> = sets.iter().map(|s| &s.query).collect();
        let image = self.encode_images(g, &images)?;
        let text = self.encode_text(g, &queries)?;
        let pairs: Vec<(usize, usize)> = (0..sets.len())
            .flat_map(|b| (0..m).map(move |k| (b, b * m + k)))
            .collect();
        let fusion = self.fuse(g, &text, &image, &pairs)?;
        Ok((self.pooled(g, &fusion), m))
    }

    /// Inter-context retrieval logits, `sets x m`.
    pub fn candidate_logits(&self, g: &mut Graph<'_, T>, sets: &[&CandidateSet]) -> Result<NodeId> {
        let (pooled, m) = self.pooled_candidates(g, sets)?;
        self.layout().inter.forward(g, pooled, sets.len(), m)
    }

    /// Per-candidate matching log-odds used as retrieval logits without the
    /// inter-context encoder, `sets x m`.
    pub fn match_logits(&self, g: &mut Graph<'_, T>, sets: &[&CandidateSet]) -> Result<NodeId> {
        let (pooled, m) = self.pooled_candidates(g, sets)?;
        let logits = self.layout().scorer.forward(g, pooled);
        let diff = g.constant(crate::tensor::Matrix::from_vec(2, 1, vec![T::one(), -T::one()]));
        let odds = g.matmul(logits, diff);
        Ok(g.reshape(odds, sets.len(), m))
    }
}

/// `-log softmax(logits)[golden]`, averaged over rows.
pub fn retrieval_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: NodeId, golden: &[usize]) -> NodeId {
    g.softmax_cross_entropy(logits, golden.to_vec())
}

/// Scalar form of the retrieval loss for one set.
pub fn retrieval_loss_value(logits: &[f64], golden: usize) -> f64 {
    let top = predict(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, l)| (l - max).exp())
        .sum();
    (max - logits[golden]) + rest.ln_1p()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Argmax; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
