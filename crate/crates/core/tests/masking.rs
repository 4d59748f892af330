use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contextalign::masking::{mask_count, random_mask, select_mask};
use contextalign::SalienceVector;

/// Subsets of size `mu` whose every member outranks every non-member, where
/// rank is (salience descending, index ascending).
fn dominant_subsets(s: &[f64], mu: usize) -> Vec<Vec<usize>> {
    let p = s.len();
    let outranks = |i: usize, j: usize| s[i] > s[j] || (s[i] == s[j] && i < j);
    (0u32..1 << p)
        .filter(|bits| bits.count_ones() as usize == mu)
        .map(|bits| (0..p).filter(|i| bits >> i & 1 == 1).collect::<Vec<_>>())
        .filter(|set| (0..p).filter(|j| !set.contains(j)).all(|j| set.iter().all(|&i| outranks(i, j))))
        .collect()
}

// Salience on a coarse grid so that ties are common and affine maps are exact.
fn salience(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..6).prop_map(f64::from), 1..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn selection_is_the_unique_top_set(s in salience(12), ratio in 0.0f64..=1.0) {
        let mask = select_mask(&SalienceVector(s.clone()), ratio).unwrap();
        let mu = mask_count(ratio, s.len());
        prop_assert_eq!(mask.count(), mu);
        prop_assert_eq!(mu, ((ratio * s.len() as f64 + 0.5).floor() as usize).clamp(1, s.len()));
        let top = dominant_subsets(&s, mu);
        prop_assert_eq!(top.len(), 1);
        prop_assert_eq!(&mask.masked(), &top[0]);
    }

    #[test]
    fn positive_affine_rescale_keeps_the_mask(
        s in salience(64),
        ratio in 0.05f64..0.95,
        scale in prop::sample::select(vec![0.5, 2.0, 3.0, 1024.0]),
        shift in -8i32..8,
    ) {
        let a = select_mask(&SalienceVector(s.clone()), ratio).unwrap();
        let t: Vec<f64> = s.iter().map(|v| v * scale + shift as f64).collect();
        let b = select_mask(&SalienceVector(t), ratio).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn constant_salience_masks_the_leading_patches(len in 1usize..200, v in -5.0f64..5.0, ratio in 0.0f64..=1.0) {
        let mask = select_mask(&SalienceVector(vec![v; len]), ratio).unwrap();
        let mu = mask_count(ratio, len);
        prop_assert_eq!(mask.masked(), (0..mu).collect::<Vec<_>>());
    }

    #[test]
    fn random_masks_share_the_cardinality(len in 1usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = random_mask(len, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.count(), mask_count(ratio, len));
        prop_assert_eq!(m.visible().len() + m.masked().len(), len);
    }
}

#[test]
fn quarter_of_196_patches_is_49() {
    assert_eq!(mask_count(0.25, 196), 49);
    assert_eq!(mask_count(0.25, 16), 4);
    assert_eq!(mask_count(0.01, 16), 1);
}
