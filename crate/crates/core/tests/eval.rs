use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contextalign::adapter::param_count;
use contextalign::data::{ingest_imagecode, ppm, read_dataset, write_dataset, DatasetEntry, TokenMap};
use contextalign::eval::{evaluate, mask_dump, text_guided_mask, EvalMode, MetricsReport, SetPrediction};
use contextalign::pipeline::{sensitivity_grid, synthetic_splits, GridAxis};
use contextalign::training::config::RunConfig;
use contextalign::training::MaskSettings;
use contextalign::{Image, Model, ModelConfig, SetKind, TokenReduction};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy();
    cfg.data.candidates = 4;
    cfg.train_sets = 4;
    cfg.eval_sets = 3;
    for s in [&mut cfg.backbone, &mut cfg.pretrain, &mut cfg.finetune, &mut cfg.context] {
        s.max_epoch = 1;
        s.batch_size = 4;
    }
    cfg
}

fn entries(cfg: &RunConfig) -> (Vec<DatasetEntry>, Vec<DatasetEntry>) {
    synthetic_splits(cfg).unwrap()
}

proptest! {
    #[test]
    fn accuracy_recounts_from_report_lines(
        preds in prop::collection::vec((0usize..10, 0usize..10, any::<bool>()), 1..60)
    ) {
        let predictions: Vec<SetPrediction> = preds
            .iter()
            .enumerate()
            .map(|(i, &(golden, predicted, video))| SetPrediction {
                set_id: format!("s{i}"),
                kind: if video { SetKind::Video } else { SetKind::Static },
                category: None,
                candidates: 10,
                golden,
                predicted,
            })
            .collect();
        let report = MetricsReport::new(EvalMode::Finetuned, 3, "x".into(), predictions, None);
        let text = report.to_text();
        let (mut n, mut hit) = (0usize, 0usize);
        for line in text.lines().filter(|l| l.starts_with("set ")) {
            let field = |k: &str| line.split(' ').find_map(|w| w.strip_prefix(k)).unwrap().to_string();
            n += 1;
            hit += (field("golden=") == field("predicted=")) as usize;
        }
        prop_assert_eq!(n, preds.len());
        let line = format!("accuracy_all = {:.6}\n", hit as f64 / n as f64);
        prop_assert!(text.starts_with(&line), "{}", text);
    }
}

#[test]
fn report_keys_are_sorted_and_repeatable() {
    let cfg = tiny();
    let (_, eval) = entries(&cfg);
    let model = Model::<f32>::new(cfg.arch(), 1).unwrap();
    let a = evaluate(&model, &eval, EvalMode::ZeroShot, 1, cfg.fingerprint(), None).unwrap().to_text();
    let b = evaluate(&model, &eval, EvalMode::ZeroShot, 1, cfg.fingerprint(), None).unwrap().to_text();
    assert_eq!(a, b);
    let keys: Vec<&str> = a.lines().filter(|l| !l.starts_with("set ")).map(|l| l.split(" = ").next().unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn untrained_context_head_predicts_the_first_candidate() {
    let cfg = tiny();
    let (_, eval) = entries(&cfg);
    let model = Model::<f32>::new(cfg.arch(), 1).unwrap();
    let report = evaluate(&model, &eval, EvalMode::Finetuned, 1, String::new(), None).unwrap();
    assert!(report.predictions.iter().all(|p| p.predicted == 0));
}

#[test]
fn dumped_image_matches_mask_then_serialize() {
    let cfg = tiny();
    let (_, eval) = entries(&cfg);
    let model = Model::<f32>::new(cfg.arch(), 1).unwrap();
    let settings = MaskSettings {
        ratio: 0.25,
        reduction: TokenReduction::MeanTokens,
    };
    let dir = tempfile::tempdir().unwrap();
    let items = mask_dump(&model, &eval[..1], settings, dir.path(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let set = &eval[0].set;
    let mask = text_guided_mask(&model, &set.images[set.golden], &set.query, settings, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(items[0].masked, mask.masked());
    assert_eq!(items[0].masked.len(), 4);

    let img: &Image = &set.images[set.golden];
    let ps = cfg.model.patch_size;
    let cols = img.width / ps;
    let mut expected = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            let hidden = mask.as_slice()[(y / ps) * cols + x / ps];
            for c in 0..3 {
                expected.push(if hidden { 0 } else { img.get(y, x, c) });
            }
        }
    }
    let written = fs::read(dir.path().join(format!("{}.ppm", set.set_id))).unwrap();
    assert_eq!(written, expected);
    let side = fs::read_to_string(dir.path().join(format!("{}.mask.txt", set.set_id))).unwrap();
    let overlap = items[0].overlap.unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    assert!(side.contains(&format!("overlap {overlap:.6}")));
}

#[test]
fn layer_grid_maps_the_published_patterns() {
    assert_eq!(GridAxis::InsertionLayers.default_values(12), ["12", "3,6,9,12", "1,2,3,4,5,6,7,8,9,10,11,12"]);
    assert_eq!(GridAxis::InsertionLayers.default_values(4), ["4", "2,4", "1,2,3,4"]);
    assert_eq!(GridAxis::Delta.default_values(4), ["1", "2", "4", "8"]);
    assert_eq!(GridAxis::MaskRatio.default_values(4), ["0.25", "0.5", "0.75"]);
}

#[test]
fn grid_rows_cover_every_value_and_flag_invalid_ones() {
    let cfg = tiny();
    let (train, eval) = entries(&cfg);
    let values = vec!["2".to_string(), "3".to_string(), "0.5".to_string()];
    let table = sensitivity_grid(&cfg, GridAxis::Delta, &values, &train, &eval, &mut ()).unwrap();
    assert_eq!(table.rows.len(), 3);
    let first = table.rows[0].outcome.as_ref().unwrap();
    let mut adapter = cfg.adapter_config();
    adapter.delta = 2;
    assert_eq!(first.param_count, param_count(&cfg.model, &adapter));
    assert!(table.rows[1].outcome.is_err());
    assert!(table.rows[2].outcome.is_err());
    let text = table.to_text();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(3).unwrap().starts_with("3\twarning: "));
}

#[test]
fn written_dataset_reads_back_pixel_exact() {
    let cfg = tiny();
    let (train, _) = entries(&cfg);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&train, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), train.len());
    for (a, b) in train.iter().zip(&back) {
        assert_eq!(a.set, b.set);
        assert_eq!(a.cues, b.cues);
    }
}

#[test]
fn imagecode_shaped_fixture_ingests_and_evaluates() {
    let cfg = tiny();
    let (_, eval) = entries(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let names = ["video-clip-a", "open-images-b"];
    for (name, entry) in names.iter().zip(&eval) {
        let d = dir.path().join("images").join(name);
        fs::create_dir_all(&d).unwrap();
        for (k, img) in entry.set.images.iter().enumerate() {
            ppm::write(img, &d.join(format!("img{k}.ppm"))).unwrap();
        }
    }
    let split = dir.path().join("valid.json");
    fs::write(
        &split,
        r#"{"video-clip-a": {"2": "the red patch on the left", "0": "stripes at the top"},
            "open-images-b": {"1": "a small white marker"}}"#,
    )
    .unwrap();
    let tokens = TokenMap::parse("red 5\nstripes 6\nwhite 7\nmarker 8\n").unwrap();
    let sets = ingest_imagecode(dir.path(), &split, &tokens, cfg.model.max_tokens).unwrap();
    let ids: Vec<&str> = sets.iter().map(|e| e.set.set_id.as_str()).collect();
    assert_eq!(ids, ["open-images-b/1", "video-clip-a/0", "video-clip-a/2"]);
    assert_eq!(sets[0].set.kind, SetKind::Static);
    assert_eq!(sets[1].set.kind, SetKind::Video);
    let model = Model::<f32>::new(cfg.arch(), 1).unwrap();
    for mode in [EvalMode::ZeroShot, EvalMode::Match, EvalMode::Finetuned] {
        let r = evaluate(&model, &sets, mode, 1, cfg.fingerprint(), None).unwrap();
        assert_eq!(r.predictions.len(), 3);
    }
}
