//! Retrieval evaluation, mask inspection and the metrics report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{ppm, DatasetEntry};
use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence};
use crate::inter_context::{predict, CandidateSet, SetKind};
use crate::masking::{aggregate_attention, select_mask, MaskMatrix};
use crate::model::Model;
use crate::training::MaskSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Argmax of the per-pair match probability.
    ZeroShot,
    /// Argmax of the per-candidate match log-odds after fine-tuning.
    Match,
    /// Argmax of the inter-candidate logits.
    Finetuned,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::ZeroShot => "zeroshot",
            EvalMode::Match => "match",
            EvalMode::Finetuned => "finetuned",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeroshot" => Ok(EvalMode::ZeroShot),
            "match" => Ok(EvalMode::Match),
            "finetuned" => Ok(EvalMode::Finetuned),
            other => Err(Error::Usage(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

/// Match probability of the query against every candidate.
pub fn zero_shot_scores(model: &Model<f32>, set: &CandidateSet) -> Result<Vec<f64>> {
    let mut g = Graph::inference(model.params());
    let images: Vec<&Image> = set.images.iter().collect();
    let image = model.encode_images(&mut g, &images)?;
    let text = model.encode_text(&mut g, &[&set.query])?;
    let pairs: Vec<(usize, usize)> = (0..set.len()).map(|k| (0, k)).collect();
    let fusion = model.fuse(&mut g, &text, &image, &pairs)?;
    let logits = model.itm_logits(&mut g, &fusion);
    Ok(model.match_scores(&g, logits).iter().map(|s| s.match_probability()).collect())
}

/// Inter-candidate retrieval logits.
pub fn finetuned_logits(model: &Model<f32>, set: &CandidateSet) -> Result<Vec<f64>> {
    let mut g = Graph::inference(model.params());
    let logits = model.candidate_logits(&mut g, &[set])?;
    Ok(g.value(logits).data().iter().map(|&v| v as f64).collect())
}

/// Per-candidate match log-odds.
pub fn match_logits(model: &Model<f32>, set: &CandidateSet) -> Result<Vec<f64>> {
    let mut g = Graph::inference(model.params());
    let logits = model.match_logits(&mut g, &[set])?;
    Ok(g.value(logits).data().iter().map(|&v| v as f64).collect())
}

/// Text-guided mask of `image` for `query`, as selected during stage 1.
pub fn text_guided_mask(
    model: &Model<f32>,
    image: &Image,
    query: &TokenSequence,
    settings: MaskSettings,
    rng: &mut ChaCha8Rng,
) -> Result<MaskMatrix> {
    let mut g = Graph::inference(model.params());
    let enc = model.encode_images(&mut g, &[image])?;
    let text = model.encode_text(&mut g, &[query])?;
    let fusion = model.fuse(&mut g, &text, &enc, &[(0, 0)])?;
    let record = fusion.record(&g, 0)?;
    let salience = aggregate_attention(&record, settings.reduction, rng)?;
    select_mask(&salience, settings.ratio)
}

/// Fraction of cue patches covered by the mask.
pub fn cue_overlap(mask: &MaskMatrix, cue: &[usize]) -> f64 {
    if cue.is_empty() {
        return 0.0;
    }
    cue.iter().filter(|&&p| mask.as_slice()[p]).count() as f64 / cue.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetPrediction {
    pub set_id: String,
    pub kind: SetKind,
    pub category: Option<String>,
    pub candidates: usize,
    pub golden: usize,
    pub predicted: usize,
}

impl SetPrediction {
    pub fn correct(&self) -> bool {
        self.golden == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapStats {
    pub instances: usize,
    pub mean: f64,
    /// Expected overlap of a uniformly random mask.
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub seed: u64,
    pub fingerprint: String,
    pub accuracy_all: f64,
    pub accuracy_video: f64,
    pub accuracy_static: f64,
    pub predictions: Vec<SetPrediction>,
    pub overlap: Option<OverlapStats>,
}

fn accuracy<'a>(preds: impl Iterator<Item = &'a SetPrediction>) -> f64 {
    let (mut n, mut hit) = (0usize, 0usize);
    for p in preds {
        n += 1;
        hit += p.correct() as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

impl MetricsReport {
    pub fn new(
        mode: EvalMode,
        seed: u64,
        fingerprint: String,
        predictions: Vec<SetPrediction>,
        overlap: Option<OverlapStats>,
    ) -> Self {
        Self {
            mode,
            seed,
            fingerprint,
            accuracy_all: accuracy(predictions.iter()),
            accuracy_video: accuracy(predictions.iter().filter(|p| p.kind == SetKind::Video)),
            accuracy_static: accuracy(predictions.iter().filter(|p| p.kind == SetKind::Static)),
            predictions,
            overlap,
        }
    }

    /// Accuracy per user-supplied category, sorted by name.
    pub fn category_accuracy(&self) -> Vec<(String, f64)> {
        let mut names: Vec<&String> = self.predictions.iter().filter_map(|p| p.category.as_ref()).collect();
        names.sort();
        names.dedup();
        names
            .into_iter()
            .map(|c| {
                let acc = accuracy(self.predictions.iter().filter(|p| p.category.as_ref() == Some(c)));
                (c.clone(), acc)
            })
            .collect()
    }

    /// Sorted `key = value` lines with 6-decimal floats, then one line per
    /// set in evaluation order.
    pub fn to_text(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut keys: Vec<(String, String)> = vec![
            ("accuracy_all".into(), f(self.accuracy_all)),
            ("accuracy_static".into(), f(self.accuracy_static)),
            ("accuracy_video".into(), f(self.accuracy_video)),
            ("candidate_order".into(), "manifest".into()),
            ("config_fingerprint".into(), self.fingerprint.clone()),
            ("mode".into(), self.mode.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("sets".into(), self.predictions.len().to_string()),
        ];
        for (c, acc) in self.category_accuracy() {
            keys.push((format!("category.{c}"), f(acc)));
        }
        if let Some(o) = &self.overlap {
            keys.push(("mask_overlap_chance".into(), f(o.chance)));
            keys.push(("mask_overlap_instances".into(), o.instances.to_string()));
            keys.push(("mask_overlap_mean".into(), f(o.mean)));
        }
        keys.sort();
        let mut out = String::new();
        for (k, v) in keys {
            let _ = writeln!(out, "{k} = {v}");
        }
        for p in &self.predictions {
            let _ = write!(
                out,
                "set {} kind={} candidates={} golden={} predicted={}",
                p.set_id, p.kind, p.candidates, p.golden, p.predicted
            );
            if let Some(c) = &p.category {
                let _ = write!(out, " category={c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Predict every set with `mode`.
pub fn predict_sets(model: &Model<f32>, entries: &[DatasetEntry], mode: EvalMode) -> Result<Vec<SetPrediction>> {
    entries
        .iter()
        .map(|e| {
            let scores = match mode {
                EvalMode::ZeroShot => zero_shot_scores(model, &e.set)?,
                EvalMode::Match => match_logits(model, &e.set)?,
                EvalMode::Finetuned => finetuned_logits(model, &e.set)?,
            };
            Ok(SetPrediction {
                set_id: e.set.set_id.clone(),
                kind: e.set.kind,
                category: e.category.clone(),
                candidates: e.set.len(),
                golden: e.set.golden,
                predicted: predict(&scores),
            })
        })
        .collect()
}

/// Mean cue coverage of the golden image's text-guided mask over the
/// entries that carry cue annotations (at most `limit` of them).
pub fn mask_overlap(
    model: &Model<f32>,
    entries: &[DatasetEntry],
    settings: MaskSettings,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<OverlapStats>> {
    let mut values = Vec::new();
    for e in entries.iter().filter(|e| e.cues.is_some()).take(limit) {
        let cue = e.golden_cue_patches().unwrap_or_default();
        let mask = text_guided_mask(model, &e.set.images[e.set.golden], &e.set.query, settings, rng)?;
        values.push(cue_overlap(&mask, cue));
    }
    if values.is_empty() {
        return Ok(None);
    }
    let patches = model.arch().model.num_patches();
    let mu = crate::masking::mask_count(settings.ratio, patches);
    Ok(Some(OverlapStats {
        instances: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        chance: mu as f64 / patches as f64,
    }))
}

pub fn evaluate(
    model: &Model<f32>,
    entries: &[DatasetEntry],
    mode: EvalMode,
    seed: u64,
    fingerprint: String,
    overlap: Option<OverlapStats>,
) -> Result<MetricsReport> {
    let predictions = predict_sets(model, entries, mode)?;
    Ok(MetricsReport::new(mode, seed, fingerprint, predictions, overlap))
}

/// Files written for one set by [`mask_dump`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDumpItem {
    pub set_id: String,
    pub masked: Vec<usize>,
    pub overlap: Option<f64>,
}

/// Golden image with masked patches zeroed as `<out>/<set>.ppm` and the
/// masked indices as `<out>/<set>.mask.txt`.
pub fn mask_dump(
    model: &Model<f32>,
    entries: &[DatasetEntry],
    settings: MaskSettings,
    out: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskDumpItem>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ps = model.arch().model.patch_size;
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let golden = &e.set.images[e.set.golden];
        let mask = text_guided_mask(model, golden, &e.set.query, settings, rng)?;
        let masked = mask.masked();
        let mut img = golden.clone();
        img.zero_patches(ps, &masked);
        let stem = e.set.set_id.replace('/', "_");
        ppm::write(&img, &out.join(format!("{stem}.ppm")))?;
        let overlap = e.golden_cue_patches().map(|c| cue_overlap(&mask, c));
        let mut side = masked.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        side.push('\n');
        if let Some(o) = overlap {
            let _ = writeln!(side, "overlap {o:.6}");
        }
        let path = out.join(format!("{stem}.mask.txt"));
        fs::write(&path, side).map_err(|e| Error::io(&path, e))?;
        items.push(MaskDumpItem {
            set_id: e.set.set_id.clone(),
            masked,
            overlap,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, kind: SetKind, golden: usize, predicted: usize) -> SetPrediction {
        SetPrediction {
            set_id: id.into(),
            kind,
            category: None,
            candidates: 10,
            golden,
            predicted,
        }
    }

    #[test]
    fn accuracies_recount_from_predictions() {
        let preds = vec![
            pred("a", SetKind::Video, 1, 1),
            pred("b", SetKind::Video, 2, 0),
            pred("c", SetKind::Static, 0, 0),
        ];
        let r = MetricsReport::new(EvalMode::ZeroShot, 1, "f".into(), preds, None);
        assert!((r.accuracy_all - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy_video, 0.5);
        assert_eq!(r.accuracy_static, 1.0);
        let text = r.to_text();
        assert!(text.starts_with("accuracy_all = 0.666667\naccuracy_static = 1.000000\n"));
        assert!(text.contains("set b kind=video candidates=10 golden=2 predicted=0\n"));
    }

    #[test]
    fn overlap_fraction() {
        let m = MaskMatrix::from_indices(16, &[1, 2, 3, 4], 0.25).unwrap();
        assert_eq!(cue_overlap(&m, &[2]), 1.0);
        assert_eq!(cue_overlap(&m, &[2, 9]), 0.5);
        assert_eq!(cue_overlap(&m, &[9]), 0.0);
    }
}
