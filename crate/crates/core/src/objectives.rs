//! Co-supervision objectives: image-text matching over positives plus mined
//! hard negatives, and pixel reconstruction of text-guided masked patches.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::masking::MaskMatrix;
use crate::model::MatchScore;
use crate::tensor::{Matrix, Scalar};

/// Label index of a matching pair in the two-way logits.
pub const MATCH: usize = 0;
/// Label index of a non-matching pair.
pub const MISMATCH: usize = 1;

/// How negatives are drawn from cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MiningMode {
    /// Most similar non-matching element; lowest index on ties.
    Hardest,
    /// Draw in proportion to `exp(cos / temperature)`.
    Sampled { temperature: f64 },
}

/// N positive `(image, text)` index pairs followed by 2N mined negatives:
/// first the hardest text for every image, then the hardest image for every
/// text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl PairBatch {
    /// Labels in pair order: `MATCH` for the first N, `MISMATCH` after.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.pairs.len())
            .map(|i| if i < self.n { MATCH } else { MISMATCH })
            .collect()
    }

    pub fn positives(&self) -> &[(usize, usize)] {
        &self.pairs[..self.n]
    }

    pub fn negatives(&self) -> &[(usize, usize)] {
        &self.pairs[self.n..]
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn pick(sims: &[(usize, f64)], mode: MiningMode, rng: &mut impl Rng) -> usize {
    match mode {
        MiningMode::Hardest => {
            let mut best = sims[0];
            for &(j, s) in &sims[1..] {
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        }
        MiningMode::Sampled { temperature } => {
            let max = sims.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = sims.iter().map(|s| ((s.1 - max) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).expect("finite positive weights");
            sims[dist.sample(rng)].0
        }
    }
}

/// For positive pair `i` = (image i, text i): the text `j ≠ i` whose
/// embedding is most cosine-similar to image i, and the image `k ≠ i` most
/// similar to text i.
pub fn mine_hard_negatives(
    image_emb: &[Vec<f64>],
    text_emb: &[Vec<f64>],
    mode: MiningMode,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    let n = image_emb.len();
    if text_emb.len() != n {
        return Err(Error::BatchShape(format!(
            "{n} image embeddings but {} text embeddings",
            text_emb.len()
        )));
    }
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for i in 0..n {
        let sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(&image_emb[i], &text_emb[j])))
            .collect();
        pairs.push((i, pick(&sims, mode, rng)));
    }
    for i in 0..n {
        let sims: Vec<(usize, f64)> = (0..n)
            .filter(|&k| k != i)
            .map(|k| (k, cosine(&text_emb[i], &image_emb[k])))
            .collect();
        pairs.push((pick(&sims, mode, rng), i));
    }
    Ok(PairBatch { n, pairs })
}

fn check_triple(count: usize) -> Result<()> {
    if count == 0 || count % 3 != 0 {
        return Err(Error::BatchShape(format!(
            "{count} matching pairs is not a positive multiple of 3"
        )));
    }
    Ok(())
}

/// Mean two-way cross-entropy over the 3N pairs.
pub fn itm_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    check_triple(labels.len())?;
    if g.value(logits).shape() != (labels.len(), 2) {
        return Err(Error::BatchShape("one two-way score per label required".into()));
    }
    Ok(g.softmax_cross_entropy(logits, labels.to_vec()))
}

/// Scalar form of [`itm_loss`].
pub fn itm_loss_value(scores: &[MatchScore], labels: &[usize]) -> Result<f64> {
    check_triple(scores.len())?;
    if labels.len() != scores.len() {
        return Err(Error::BatchShape("one label per score required".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &q)| {
            let [a, b] = s.logits;
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            lse - s.logits[q]
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Original pixels of every masked patch, item-major, `items·μ x S`.
pub fn masked_targets<T: Scalar>(images: &[&Image], masks: &[MaskMatrix], patch_size: usize) -> Matrix<T> {
    let mut parts = Vec::new();
    for (img, m) in images.iter().zip(masks) {
        let patches = img.patches::<T>(patch_size);
        for i in m.masked() {
            parts.push(Matrix::from_vec(1, patches.cols(), patches.row(i).to_vec()));
        }
    }
    let refs: Vec<&Matrix<T>> = parts.iter().collect();
    Matrix::vstack(&refs)
}

/// `(1/N)(1/μ) Σ_i Σ_j Σ_s (y − ŷ)²`: pixels are summed within a patch, not
/// averaged.
pub fn tmim_loss<T: Scalar>(g: &mut Graph<'_, T>, predictions: NodeId, targets: Matrix<T>, n: usize, mu: usize) -> Result<NodeId> {
    if mu == 0 || n == 0 {
        return Err(Error::Shape("reconstruction needs N >= 1 and μ >= 1".into()));
    }
    if g.value(predictions).shape() != targets.shape() || targets.rows() != n * mu {
        return Err(Error::Shape(format!(
            "predictions {:?}, targets {:?}, expected {} rows",
            g.value(predictions).shape(),
            targets.shape(),
            n * mu
        )));
    }
    let scale = T::one() / T::of((n * mu) as f64);
    Ok(g.scaled_squared_error(predictions, targets, scale))
}

/// Scalar form of [`tmim_loss`] over per-instance `μ x S` matrices.
pub fn tmim_loss_value(originals: &[Matrix<f64>], predictions: &[Matrix<f64>]) -> Result<f64> {
    if originals.is_empty() || originals.len() != predictions.len() {
        return Err(Error::Shape("one prediction per original instance required".into()));
    }
    let mu = originals[0].rows();
    if mu == 0 {
        return Err(Error::Shape("μ must be at least 1".into()));
    }
    let mut acc = 0.0;
    for (y, yh) in originals.iter().zip(predictions) {
        if y.shape() != yh.shape() || y.rows() != mu {
            return Err(Error::Shape("instance shapes disagree".into()));
        }
        for (a, b) in y.data().iter().zip(yh.data()) {
            acc += (a - b) * (a - b);
        }
    }
    Ok(acc / (originals.len() * mu) as f64)
}

/// Per-step loss values; `total` is always `itm + tmim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub itm: f64,
    pub tmim: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(itm: f64, tmim: f64) -> Self {
        Self {
            itm,
            tmim,
            total: total_loss(itm, tmim),
        }
    }
}

pub fn total_loss(itm: f64, tmim: f64) -> f64 {
    itm + tmim
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_pair_batch_has_six_pairs() {
        let img = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let txt = vec![vec![1.0, 0.1], vec![0.1, 1.0]];
        let b = mine_hard_negatives(&img, &txt, MiningMode::Hardest, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.pairs.len(), 6);
        assert_eq!(b.negatives(), &[(0, 1), (1, 0), (1, 0), (0, 1)]);
        assert_eq!(b.labels(), vec![0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn closest_text_is_selected() {
        let img = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        // text 1 (0-based) is closest to image 0 among the non-matches.
        let txt = vec![vec![0.0, 0.0, 1.0], vec![0.9, 0.1, 0.0], vec![0.2, 0.0, 0.9]];
        let b = mine_hard_negatives(&img, &txt, MiningMode::Hardest, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.negatives()[0], (0, 1));
    }

    #[test]
    fn mining_needs_two_pairs() {
        let e = vec![vec![1.0]];
        assert!(matches!(
            mine_hard_negatives(&e, &e, MiningMode::Hardest, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::TooFewPairs(1))
        ));
    }

    #[test]
    fn sampled_mining_never_returns_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 1.0]).collect();
        let txt: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
        for _ in 0..20 {
            let b = mine_hard_negatives(&img, &txt, MiningMode::Sampled { temperature: 0.1 }, &mut rng).unwrap();
            assert!(b.negatives().iter().all(|&(i, t)| i != t));
        }
    }

    #[test]
    fn itm_loss_values() {
        let uniform = vec![MatchScore { logits: [0.0, 0.0] }; 6];
        let l = itm_loss_value(&uniform, &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(itm_loss_value(&uniform[..4], &[0, 0, 1, 1]).is_err());
    }

    #[test]
    fn tmim_worked_example() {
        let y = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let yh = Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]);
        assert_eq!(tmim_loss_value(&[y.clone()], &[yh]).unwrap(), 3.0);
        assert_eq!(tmim_loss_value(&[y.clone()], &[y]).unwrap(), 0.0);
    }

    #[test]
    fn total_is_exact_sum() {
        assert_eq!(LossReport::new(0.693, 0.0).total, 0.693);
        assert_eq!(LossReport::new(0.0, 3.0).total, 3.0);
    }
}
