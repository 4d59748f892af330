//! Every synthetic description must single out its own candidate. The checks
//! here read the rendered pixels directly and do not reuse the generator's
//! own predicate code.

use std::collections::HashMap;

use contextalign::data::synthetic::{generate_split, CueKind, SyntheticSpec, PALETTE};
use contextalign::{Image, SetKind};

fn block_exists(img: &Image, y0: usize, x0: usize, ps: usize, test: impl Fn([u8; 3]) -> bool) -> bool {
    let px = |y: usize, x: usize| [0, 1, 2].map(|c| img.get(y0 + y, x0 + x, c));
    (0..ps - 1).any(|y| (0..ps - 1).any(|x| [(0, 0), (0, 1), (1, 0), (1, 1)].iter().all(|&(a, b)| test(px(y + a, x + b)))))
}

fn satisfied(words: &[&str], img: &Image, ps: usize) -> bool {
    let cols = img.width / ps;
    let origin = |p: usize| ((p / cols) * ps, (p % cols) * ps);
    let patch = |w: &str| w.strip_prefix("patch").unwrap().parse::<usize>().unwrap();
    match words[0] {
        "recolor" => {
            let (y0, x0) = origin(patch(words[1]));
            let color = PALETTE.iter().find(|(n, _)| *n == words[2]).unwrap().1;
            let mut err = 0.0;
            for y in 0..ps {
                for x in 0..ps {
                    for c in 0..3 {
                        err += (img.get(y0 + y, x0 + x, c) as f64 - color[c] as f64).abs();
                    }
                }
            }
            err / (ps * ps * 3) as f64 <= 24.0
        }
        "stripe" => {
            let (y0, x0) = origin(patch(words[1]));
            let row_mean = |y: usize| (0..ps).flat_map(|x| (0..3).map(move |c| (x, c))).map(|(x, c)| img.get(y0 + y, x0 + x, c) as f64).sum::<f64>() / (ps * 3) as f64;
            (0..ps - 1).all(|y| (row_mean(y) - row_mean(y + 1)).abs() > 150.0)
        }
        "marker" => {
            let (y0, x0) = origin(patch(words[1]));
            block_exists(img, y0, x0, ps, |p| p.iter().all(|&v| v >= 230))
        }
        "count" => {
            let n: usize = words[1].parse().unwrap();
            let dots = (0..(img.height / ps) * cols)
                .filter(|&p| {
                    let (y0, x0) = origin(p);
                    block_exists(img, y0, x0, ps, |q| q.iter().all(|&v| v <= 25))
                })
                .count();
            dots == n
        }
        other => panic!("unknown description kind {other}"),
    }
}

#[test]
fn descriptions_pick_out_exactly_their_candidate() {
    let spec = SyntheticSpec {
        kinds: CueKind::ALL.to_vec(),
        ..SyntheticSpec::default()
    };
    let vocab: HashMap<u32, String> = spec.vocabulary().words().into_iter().map(|(w, id)| (id, w)).collect();
    let instances = generate_split(&spec, 7, "oracle", 1000).unwrap();
    let mut kinds = [0usize; 2];
    for inst in &instances {
        kinds[(inst.set.kind == SetKind::Static) as usize] += 1;
        for (k, cue) in inst.cues.iter().enumerate() {
            let words: Vec<&str> = cue.tokens.iter().filter_map(|id| vocab.get(id).map(String::as_str)).collect();
            for (j, img) in inst.set.images.iter().enumerate() {
                assert_eq!(
                    satisfied(&words, img, spec.patch_size),
                    j == k,
                    "set {} description {k} ({words:?}) vs candidate {j}",
                    inst.set.set_id
                );
            }
        }
        let golden_words: Vec<&str> = inst.set.query.ids().iter().filter_map(|id| vocab.get(id).map(String::as_str)).collect();
        assert_eq!(golden_words.join(" "), inst.text);
    }
    assert!(kinds[0] > 300 && kinds[1] > 300, "{kinds:?}");
}
