//! Staged training.
//!
//! * Stage 0 trains the backbone (encoders, fusion, scorer) with the matching
//!   loss only; the adapter is present but frozen.
//! * Stage 1 freezes the backbone and trains the adapter, decoder and mask
//!   embedding on matching plus masked reconstruction.
//! * Stage 2 fine-tunes backbone and adapter on candidate-set retrieval.
//! * Stage 3 trains the inter-candidate encoder alone.

pub mod checkpoint;
pub mod config;
pub mod optimizer;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, NodeId};
use crate::data::DatasetEntry;
use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence};
use crate::inter_context::retrieval_loss;
use crate::masking::{aggregate_attention, select_mask, MaskMatrix, TokenReduction};
use crate::model::Model;
use crate::objectives::{itm_loss, masked_targets, mine_hard_negatives, tmim_loss, LossReport, MiningMode, PairBatch};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::{Matrix, Scalar};
use config::RunConfig;
use optimizer::Adam;

/// Trainable parameter groups; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePolicy {
    pub trainable: Vec<ParamGroup>,
}

impl FreezePolicy {
    pub fn for_stage(stage: u8, train_scorer: bool) -> Self {
        let trainable = match stage {
            0 => ParamGroup::BACKBONE.to_vec(),
            1 => {
                let mut g = vec![ParamGroup::Adapter, ParamGroup::Decoder, ParamGroup::MaskEmbedding];
                if train_scorer {
                    g.push(ParamGroup::Scorer);
                }
                g
            }
            2 => {
                let mut g = ParamGroup::BACKBONE.to_vec();
                g.push(ParamGroup::Adapter);
                g
            }
            _ => vec![ParamGroup::InterContext],
        };
        Self { trainable }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn frozen(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| !self.is_trainable(*g)).collect()
    }

    /// One digest over the checksums of every frozen group.
    pub fn frozen_checksum<T: Scalar>(&self, store: &ParameterStore<T>) -> String {
        let mut h = Sha256::new();
        for g in self.frozen() {
            h.update(store.group_checksum(g).as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Per-tensor checksums of the frozen tensors.
    pub fn snapshot<T: Scalar>(&self, store: &ParameterStore<T>) -> BTreeMap<String, String> {
        store
            .iter()
            .filter(|(_, p)| !self.is_trainable(p.group))
            .map(|(id, p)| (p.name.clone(), store.tensor_checksum(id)))
            .collect()
    }

    pub fn audit<T: Scalar>(&self, before: &BTreeMap<String, String>, store: &ParameterStore<T>) -> Result<()> {
        let after = self.snapshot(store);
        match before.iter().find(|(k, v)| after.get(*k) != Some(v)) {
            Some((name, _)) => Err(Error::FreezeViolation(name.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub itm: Option<f64>,
    pub tmim: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub frozen_checksum: String,
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Masking settings used by the co-supervised step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSettings {
    pub ratio: f64,
    pub reduction: TokenReduction,
}

/// Negatives and masks of one co-supervised step. They are derived from
/// detached values, so holding them fixed gives the exact objective that the
/// step differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub pairs: PairBatch,
    pub masks: Vec<MaskMatrix>,
}

/// Loss nodes of one co-supervised step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub itm: NodeId,
    pub tmim: Option<NodeId>,
    pub total: NodeId,
}

impl StepLosses {
    pub fn report<T: Scalar>(&self, g: &Graph<'_, T>) -> LossReport {
        let itm = g.value(self.itm).get(0, 0).as_f64();
        let tmim = self.tmim.map_or(0.0, |n| g.value(n).get(0, 0).as_f64());
        LossReport::new(itm, tmim)
    }
}

/// Matching over N positives and 2N mined negatives and, when `masking` is
/// set, reconstruction of the attention-selected patches of the positive
/// images. `plan` replays earlier negatives and masks.
#[allow(clippy::too_many_arguments)]
pub fn co_supervision_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    images: &[&Image],
    texts: &[&TokenSequence],
    mining: MiningMode,
    masking: Option<MaskSettings>,
    plan: Option<&StepPlan>,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLosses, StepPlan)> {
    if images.len() != texts.len() {
        return Err(Error::BatchShape("one text per image required".into()));
    }
    let image = model.encode_images(g, images)?;
    let text = model.encode_text(g, texts)?;
    let pairs = match plan {
        Some(p) => p.pairs.clone(),
        None => {
            let (ie, te) = model.unimodal_embeddings(g, &image, &text);
            mine_hard_negatives(&ie, &te, mining, rng)?
        }
    };
    // Pairs hold (image, text); fusion takes (text, image).
    let fusion_pairs: Vec<(usize, usize)> = pairs.pairs.iter().map(|&(i, t)| (t, i)).collect();
    let fusion = model.fuse(g, &text, &image, &fusion_pairs)?;
    let logits = model.itm_logits(g, &fusion);
    let itm = itm_loss(g, logits, &pairs.labels())?;
    let Some(settings) = masking else {
        return Ok((StepLosses { itm, tmim: None, total: itm }, StepPlan { pairs, masks: Vec::new() }));
    };
    let masks = match plan {
        Some(p) => p.masks.clone(),
        None => (0..pairs.n)
            .map(|i| {
                let record = fusion.record(g, i)?;
                let salience = aggregate_attention(&record, settings.reduction, rng)?;
                select_mask(&salience, settings.ratio)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let positives: Vec<&Image> = pairs.positives().iter().map(|&(i, _)| images[i]).collect();
    let encoded = model.encode_images_masked(g, &positives, &masks)?;
    let recon = model.layout().decoder.decode(g, encoded.output, &masks)?;
    let targets = masked_targets::<T>(&positives, &masks, model.arch().model.patch_size);
    let mu = masks[0].count();
    let tmim = tmim_loss(g, recon.predictions, targets, pairs.n, mu)?;
    let total = g.add(itm, tmim);
    Ok((
        StepLosses {
            itm,
            tmim: Some(tmim),
            total,
        },
        StepPlan { pairs, masks },
    ))
}

/// `(set, candidate)` pairs available for matching: every candidate with a
/// known description, otherwise the golden candidate only.
fn pair_pool(data: &[DatasetEntry]) -> Vec<Vec<(usize, usize)>> {
    data.iter()
        .enumerate()
        .map(|(s, e)| match &e.cues {
            Some(c) => (0..c.len()).map(|k| (s, k)).collect(),
            None => vec![(s, e.set.golden)],
        })
        .collect()
}

/// Shuffle sets, keep each set's pairs together, cut into batches of `n`.
/// A trailing batch smaller than 2 pairs is dropped.
fn pair_batches(pool: &[Vec<(usize, usize)>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let flat: Vec<(usize, usize)> = order.iter().flat_map(|&s| pool[s].iter().copied()).collect();
    flat.chunks(n.max(2)).filter(|c| c.len() >= 2).map(<[_]>::to_vec).collect()
}

fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

/// Result of one stage.
pub struct StageOutcome {
    pub model: Model<f32>,
    pub rng: ChaCha8Rng,
    pub steps: usize,
    /// Mean total loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Callbacks invoked while a stage runs.
pub trait Observer {
    fn record(&mut self, _record: &LogRecord) {}
    fn epoch(&mut self, _stage: u8, _epoch: usize, _mean_loss: f64) {}
}

impl Observer for () {}

/// Collects every log record in memory.
impl Observer for Vec<LogRecord> {
    fn record(&mut self, record: &LogRecord) {
        self.push(record.clone());
    }
}

fn optimizer_for(stage: u8, cfg: &RunConfig, store: &ParameterStore<f32>, steps_per_epoch: usize) -> Adam<f32> {
    let s = cfg.stage(stage);
    let mut opt = Adam::new(s.adam_config(Some(1.0)), s.schedule(steps_per_epoch), store.len());
    if let Some(b) = s.backbone_lr {
        for g in ParamGroup::BACKBONE {
            opt.set_group_scale(g, b / s.base_lr);
        }
    }
    opt
}

/// Run one stage on `data` starting from `model`.
pub fn run_stage(
    stage: u8,
    cfg: &RunConfig,
    data: &[DatasetEntry],
    mut model: Model<f32>,
    observer: &mut dyn Observer,
) -> Result<StageOutcome> {
    if stage > 3 {
        return Err(Error::Usage(format!("unknown stage {stage}")));
    }
    if data.is_empty() {
        return Err(Error::Input("no training data".into()));
    }
    if stage == 1 && model.layout().adapter.is_none() {
        return Err(Error::Config("stage 1 needs a model with an adapter".into()));
    }
    let settings = cfg.stage(stage).clone();
    let policy = FreezePolicy::for_stage(stage, cfg.train_scorer);
    let mut rng = stage_rng(cfg.seed, stage);
    let mask = model.trainable_mask(&policy.trainable);
    let mut epoch_losses = Vec::with_capacity(settings.max_epoch);
    let mut steps = 0;

    // Stage 3 sees a frozen backbone, so candidate states are computed once.
    let cached: Vec<Matrix<f32>> = if stage == 3 {
        data.iter()
            .map(|e| {
                let mut g = Graph::inference(model.params());
                let (pooled, _) = model.pooled_candidates(&mut g, &[&e.set])?;
                Ok(g.value(pooled).clone())
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let pool = pair_pool(data);
    let steps_per_epoch = match stage {
        0 | 1 => pool.iter().map(Vec::len).sum::<usize>() / settings.batch_size.max(2),
        _ => data.len().div_ceil(settings.batch_size),
    }
    .max(1);
    let mut opt = optimizer_for(stage, cfg, model.params(), steps_per_epoch);
    let masking = (stage == 1).then_some(MaskSettings {
        ratio: cfg.mask_ratio,
        reduction: cfg.attention_reduction,
    });

    for epoch in 0..settings.max_epoch {
        let before = policy.snapshot(model.params());
        let frozen_checksum = policy.frozen_checksum(model.params());
        let mut sum = 0.0;
        let mut count = 0usize;
        let batches: Vec<Vec<(usize, usize)>> = match stage {
            0 | 1 => pair_batches(&pool, settings.batch_size, &mut rng),
            _ => {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.chunks(settings.batch_size).map(|c| c.iter().map(|&s| (s, 0)).collect()).collect()
            }
        };
        for batch in batches {
            let ((itm, tmim, total), grads) = {
                let mut g = Graph::with_trainable(model.params(), mask.clone());
                match stage {
                    0 | 1 => {
                        let images: Vec<&Image> = batch.iter().map(|&(s, k)| &data[s].set.images[k]).collect();
                        let texts: Vec<TokenSequence> = batch
                            .iter()
                            .map(|&(s, k)| data[s].description(k).expect("pair pool only holds described candidates"))
                            .collect();
                        let text_refs: Vec<&TokenSequence> = texts.iter().collect();
                        let (losses, _) =
                            co_supervision_loss(&mut g, &model, &images, &text_refs, cfg.mining, masking, None, &mut rng)?;
                        let r = losses.report(&g);
                        let tmim = masking.map(|_| r.tmim);
                        ((Some(r.itm), tmim, r.total), g.backward(losses.total))
                    }
                    2 => {
                        let sets: Vec<_> = batch.iter().map(|&(s, _)| &data[s].set).collect();
                        let logits = model.match_logits(&mut g, &sets)?;
                        let golden: Vec<usize> = sets.iter().map(|s| s.golden).collect();
                        let loss = retrieval_loss(&mut g, logits, &golden);
                        let v = g.value(loss).get(0, 0) as f64;
                        ((None, None, v), g.backward(loss))
                    }
                    _ => {
                        let parts: Vec<&Matrix<f32>> = batch.iter().map(|&(s, _)| &cached[s]).collect();
                        let m = data[batch[0].0].set.len();
                        if batch.iter().any(|&(s, _)| data[s].set.len() != m) {
                            return Err(Error::Shape("sets in a batch must share their candidate count".into()));
                        }
                        let pooled = g.constant(Matrix::vstack(&parts));
                        let logits = model.layout().inter.forward(&mut g, pooled, batch.len(), m)?;
                        let golden: Vec<usize> = batch.iter().map(|&(s, _)| data[s].set.golden).collect();
                        let loss = retrieval_loss(&mut g, logits, &golden);
                        let v = g.value(loss).get(0, 0) as f64;
                        ((None, None, v), g.backward(loss))
                    }
                }
            };
            let lr = opt.step(model.params_mut(), grads)?;
            sum += total;
            count += 1;
            observer.record(&LogRecord {
                step: steps,
                stage,
                itm,
                tmim,
                total,
                lr,
                frozen_checksum: frozen_checksum.clone(),
            });
            steps += 1;
        }
        policy.audit(&before, model.params())?;
        let mean = sum / count.max(1) as f64;
        observer.epoch(stage, epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(StageOutcome {
        model,
        rng,
        steps,
        epoch_losses,
    })
}

/// A fresh model for `cfg` carrying over every tensor of `from` whose name
/// and shape match.
pub fn transplant(cfg: &RunConfig, arch: crate::config::ArchConfig, from: &Model<f32>) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(arch, cfg.seed)?;
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if let Some(src) = from.params().id(&name) {
            let v = from.params().value(src);
            if v.shape() == model.params().value(id).shape() {
                *model.params_mut().value_mut(id) = v.clone();
            }
        }
    }
    Ok(model)
}
