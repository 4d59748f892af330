use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use contextalign::adapter::param_count;
use contextalign::autograd::Graph;
use contextalign::config::{AdapterConfig, Aggregation, ArchConfig, ModelConfig};
use contextalign::image::{BOS, EOS};
use contextalign::{CandidateSet, Error, Image, Model, ParamGroup, SetKind, TokenSequence};

fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Image {
    let n = cfg.image_height * cfg.image_width * cfg.channels;
    Image::from_pixels(cfg.image_height, cfg.image_width, cfg.channels, (0..n).map(|_| rng.random()).collect()).unwrap()
}

fn random_text(cfg: &ModelConfig, rng: &mut impl Rng) -> TokenSequence {
    let len = rng.random_range(1..=cfg.max_tokens - 2);
    let mut ids = vec![BOS];
    ids.extend((0..len).map(|_| rng.random_range(4..cfg.text_vocab as u32)));
    ids.push(EOS);
    TokenSequence::new(ids)
}

fn random_set(cfg: &ModelConfig, m: usize, rng: &mut impl Rng) -> CandidateSet {
    CandidateSet {
        set_id: "s".into(),
        images: (0..m).map(|_| random_image(cfg, rng)).collect(),
        query: random_text(cfg, rng),
        golden: 0,
        kind: SetKind::Static,
    }
}

/// Copy every tensor of `from` into `to` by name.
fn copy_shared<T: contextalign::Scalar>(from: &Model<T>, to: &mut Model<T>) {
    let ids: Vec<_> = to.params().iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if let Some(src) = from.params().id(&name) {
            *to.params_mut().value_mut(id) = from.params().value(src).clone();
        }
    }
}

fn itm_logits(model: &Model<f64>, image: &Image, text: &TokenSequence) -> Vec<f64> {
    let mut g = Graph::inference(model.params());
    let enc = model.encode_images(&mut g, &[image]).unwrap();
    let txt = model.encode_text(&mut g, &[text]).unwrap();
    let fusion = model.fuse(&mut g, &txt, &enc, &[(0, 0)]).unwrap();
    let logits = model.itm_logits(&mut g, &fusion);
    g.value(logits).data().to_vec()
}

#[test]
fn untrained_adapter_leaves_outputs_unchanged() {
    let cfg = ModelConfig::toy();
    let adapted = Model::<f64>::new(ArchConfig::new(cfg.clone()), 5).unwrap();
    let mut plain = Model::<f64>::new(ArchConfig::new(cfg.clone()).without_adapter(), 99).unwrap();
    copy_shared(&adapted, &mut plain);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let img = random_image(&cfg, &mut rng);
        let text = random_text(&cfg, &mut rng);
        let a = itm_logits(&adapted, &img, &text);
        let b = itm_logits(&plain, &img, &text);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn trained_adapter_changes_the_output() {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f64>::new(ArchConfig::new(cfg.clone()), 5).unwrap();
    let upal = model.params().id("adapter.upal.w").unwrap();
    model.params_mut().value_mut(upal).data_mut().iter_mut().for_each(|v| *v = 0.05);
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = Graph::inference(model.params());
    let with = model.encode_images_with(&mut g, &[&img], true).unwrap();
    let without = model.encode_images_with(&mut g, &[&img], false).unwrap();
    assert_ne!(g.value(with.output), g.value(without.output));
    assert_eq!(g.value(with.vit_output), g.value(without.output));
}

#[test]
fn adapter_tensors_follow_the_configuration() {
    let cfg = ModelConfig::desk();
    let mut arch = ArchConfig::new(cfg.clone());
    arch.adapter = Some(AdapterConfig {
        layers: vec![2, 4],
        delta: 4,
        aggregation: Aggregation::Concat,
    });
    let model = Model::<f32>::new(arch, 0).unwrap();
    let p = model.params();
    assert_eq!(p.value(p.id("adapter.dpal.2.w").unwrap()).shape(), (32, 8));
    assert_eq!(p.value(p.id("adapter.upal.w").unwrap()).shape(), (16, 32));
    assert!(p.id("adapter.dpal.1.w").is_none());
    assert!(p.value(p.id("adapter.upal.w").unwrap()).data().iter().all(|&v| v == 0.0));
}

#[test]
fn bad_adapter_settings_are_configuration_errors() {
    let cfg = ModelConfig::desk();
    for (layers, delta) in [(vec![], 2), (vec![5], 2), (vec![2, 1], 2), (vec![1], 3), (vec![1], 0)] {
        let mut arch = ArchConfig::new(cfg.clone());
        arch.adapter = Some(AdapterConfig {
            layers,
            delta,
            aggregation: Aggregation::Add,
        });
        assert!(matches!(Model::<f32>::new(arch, 0), Err(Error::Config(_))));
    }
}

#[test]
fn zero_head_gives_uniform_candidate_logits() {
    let cfg = ModelConfig::toy();
    let model = Model::<f64>::new(ArchConfig::new(cfg.clone()), 3).unwrap();
    let set = random_set(&cfg, 10, &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::inference(model.params());
    let logits = model.candidate_logits(&mut g, &[&set]).unwrap();
    assert_eq!(g.value(logits).shape(), (1, 10));
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn too_many_candidates_is_a_configuration_error() {
    let cfg = ModelConfig::toy();
    let model = Model::<f64>::new(ArchConfig::new(cfg.clone()), 3).unwrap();
    let set = random_set(&cfg, 11, &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::inference(model.params());
    assert!(matches!(model.candidate_logits(&mut g, &[&set]), Err(Error::Config(_))));
}

#[test]
fn swapping_candidates_and_temporal_rows_swaps_logits() {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f64>::new(ArchConfig::new(cfg.clone()), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let head = model.params().id("inter.head.w").unwrap();
    model.params_mut().value_mut(head).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let mut set = random_set(&cfg, 6, &mut rng);
    set.images[4] = set.images[1].clone();
    let logits = |model: &Model<f64>, set: &CandidateSet| {
        let mut g = Graph::inference(model.params());
        let l = model.candidate_logits(&mut g, &[set]).unwrap();
        g.value(l).data().to_vec()
    };
    let before = logits(&model, &set);
    set.images.swap(1, 4);
    let table = model.layout().inter.temporal;
    let t = model.params_mut().value_mut(table);
    for c in 0..t.cols() {
        let (a, b) = (t.get(1, c), t.get(4, c));
        t.set(1, c, b);
        t.set(4, c, a);
    }
    let after = logits(&model, &set);
    let mut expected = before.clone();
    expected.swap(1, 4);
    for (x, y) in after.iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12, "{after:?} vs {expected:?}");
    }
}

#[test]
fn adapter_count_for_twelve_layer_reference_geometry() {
    let mut m = ModelConfig::desk();
    m.vit_depth = 12;
    m.vit_width = 768;
    let cfg = AdapterConfig {
        layers: vec![3, 6, 9, 12],
        delta: 2,
        aggregation: Aggregation::Concat,
    };
    assert_eq!(param_count(&m, &cfg), 4 * (768 * 384 + 384) + (4 * 384 * 768 + 768));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_param_count_matches_registered_scalars(
        depth in 1usize..5,
        width_mult in 1usize..4,
        delta in prop::sample::select(vec![1usize, 2, 4, 8]),
        layer_bits in 1u32..16,
        add in any::<bool>(),
    ) {
        let mut m = ModelConfig::toy();
        m.vit_depth = depth;
        m.vit_width = 8 * width_mult;
        m.vit_heads = 2;
        let layers: Vec<usize> = (1..=depth).filter(|l| layer_bits >> (l - 1) & 1 == 1).collect();
        prop_assume!(!layers.is_empty() && m.vit_width % delta == 0);
        let cfg = AdapterConfig {
            layers,
            delta,
            aggregation: if add { Aggregation::Add } else { Aggregation::Concat },
        };
        let mut arch = ArchConfig::new(m.clone());
        arch.adapter = Some(cfg.clone());
        let model = Model::<f32>::new(arch, 0).unwrap();
        prop_assert_eq!(model.params().scalar_count(ParamGroup::Adapter), param_count(&m, &cfg));
    }
}

