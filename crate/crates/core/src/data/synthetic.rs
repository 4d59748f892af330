//! Synthetic contrastive retrieval sets.
//!
//! Every candidate of a set carries one small planted cue (a recoloured
//! patch, a striped patch, a tiny marker, or a number of dots) with cue
//! parameters that differ between candidates, so each candidate has its own
//! unique description. The query of a set is the description of its golden
//! candidate.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence, BOS, EOS};
use crate::inter_context::{CandidateSet, SetKind};

const MAX_ATTEMPTS: usize = 32;
const BASE_LOW: i32 = 64;
const BASE_HIGH: i32 = 191;

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("magenta", [255, 0, 255]),
    ("cyan", [0, 255, 255]),
    ("white", [255, 255, 255]),
    ("black", [0, 0, 0]),
];

pub const MAX_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CueKind {
    PatchRecolor,
    PatchBlurStripe,
    ObjectCount,
    PositionShift,
}

impl CueKind {
    pub const ALL: [CueKind; 4] = [
        CueKind::PatchRecolor,
        CueKind::PatchBlurStripe,
        CueKind::ObjectCount,
        CueKind::PositionShift,
    ];

    fn word(self) -> &'static str {
        match self {
            CueKind::PatchRecolor => "recolor",
            CueKind::PatchBlurStripe => "stripe",
            CueKind::ObjectCount => "count",
            CueKind::PositionShift => "marker",
        }
    }
}

impl fmt::Display for CueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CueKind::PatchRecolor => "patch_recolor",
            CueKind::PatchBlurStripe => "patch_blur_stripe",
            CueKind::ObjectCount => "object_count",
            CueKind::PositionShift => "position_shift",
        })
    }
}

impl FromStr for CueKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CueKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown cue kind `{s}`")))
    }
}

/// Fixed token ids for cue descriptors. Ids 0..4 are the special tokens,
/// then the four kind words, one word per patch position, one per palette
/// colour and one per count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    positions: usize,
}

impl Vocabulary {
    const KINDS: u32 = 4;

    pub fn new(positions: usize) -> Self {
        Self { positions }
    }

    pub fn kind(&self, kind: CueKind) -> u32 {
        Self::KINDS + CueKind::ALL.iter().position(|&k| k == kind).unwrap() as u32
    }

    pub fn position(&self, patch: usize) -> u32 {
        2 * Self::KINDS + patch as u32
    }

    pub fn color(&self, color: usize) -> u32 {
        2 * Self::KINDS + (self.positions + color) as u32
    }

    pub fn count(&self, n: usize) -> u32 {
        2 * Self::KINDS + (self.positions + PALETTE.len() + n - 1) as u32
    }

    pub fn size(&self) -> usize {
        2 * Self::KINDS as usize + self.positions + PALETTE.len() + MAX_COUNT
    }

    /// Every descriptor word with its id.
    pub fn words(&self) -> Vec<(String, u32)> {
        let mut out: Vec<(String, u32)> = CueKind::ALL.iter().map(|&k| (k.word().to_string(), self.kind(k))).collect();
        out.extend((0..self.positions).map(|p| (format!("patch{p}"), self.position(p))));
        out.extend(PALETTE.iter().enumerate().map(|(c, (name, _))| (name.to_string(), self.color(c))));
        out.extend((1..=MAX_COUNT).map(|n| (n.to_string(), self.count(n))));
        out
    }

    fn decode(&self, tokens: &[u32]) -> Option<Predicate> {
        let body: Vec<u32> = tokens.iter().copied().filter(|&t| t != BOS && t != EOS && t != 0).collect();
        let pos = |t: u32| {
            let base = self.position(0);
            (t >= base && t < base + self.positions as u32).then(|| (t - base) as usize)
        };
        let kind = *body.first()?;
        match (CueKind::ALL.into_iter().find(|&k| self.kind(k) == kind)?, &body[1..]) {
            (CueKind::PatchRecolor, &[p, c]) => {
                let c0 = self.color(0);
                let color = (c >= c0 && c < c0 + PALETTE.len() as u32).then(|| (c - c0) as usize)?;
                Some(Predicate::Recolor { patch: pos(p)?, color })
            }
            (CueKind::PatchBlurStripe, &[p]) => Some(Predicate::Stripe { patch: pos(p)? }),
            (CueKind::PositionShift, &[p]) => Some(Predicate::Marker { patch: pos(p)? }),
            (CueKind::ObjectCount, &[n]) => {
                let n0 = self.count(1);
                (n >= n0 && n < n0 + MAX_COUNT as u32).then(|| Predicate::Count { n: (n - n0) as usize + 1 })
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub candidates: usize,
    pub kinds: Vec<CueKind>,
    /// Amplitude of uniform pixel noise on the base scene, as a fraction of 255.
    pub noise: f64,
    /// Probability that a set is a drifting "video" set.
    pub video_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            patch_size: 4,
            candidates: 10,
            kinds: vec![CueKind::PatchRecolor, CueKind::PatchBlurStripe, CueKind::PositionShift],
            noise: 0.03,
            video_fraction: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * self.grid_cols()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_patches())
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "{}x{} images cannot be tiled by {}-pixel patches of at least 4 pixels",
                self.height, self.width, self.patch_size
            )));
        }
        if self.candidates < 2 {
            return Err(Error::Config("a set needs at least 2 candidates".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("no cue kinds enabled".into()));
        }
        if !(0.0..=0.25).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.25]", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.video_fraction) {
            return Err(Error::Config(format!("video fraction {} outside [0, 1]", self.video_fraction)));
        }
        let words = self.vocabulary().words();
        let mut ids: Vec<u32> = words.iter().map(|w| w.1).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != words.len() {
            return Err(Error::Config("descriptor vocabulary is not injective".into()));
        }
        Ok(())
    }

    fn patch_origin(&self, patch: usize) -> (usize, usize) {
        let cols = self.grid_cols();
        ((patch / cols) * self.patch_size, (patch % cols) * self.patch_size)
    }

    fn patch_pixels(&self, image: &Image, patch: usize) -> Vec<[u8; 3]> {
        let (y0, x0) = self.patch_origin(patch);
        let ps = self.patch_size;
        (0..ps * ps)
            .map(|i| {
                let (y, x) = (y0 + i / ps, x0 + i % ps);
                [image.get(y, x, 0), image.get(y, x, 1), image.get(y, x, 2)]
            })
            .collect()
    }
}

/// The planted cue of one candidate: its description and the patches it
/// occupies.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CandidateCue {
    pub tokens: Vec<u32>,
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub set: CandidateSet,
    pub cues: Vec<CandidateCue>,
    pub text: String,
}

impl Instance {
    /// Description of candidate `k` as a token sequence.
    pub fn description(&self, k: usize) -> TokenSequence {
        TokenSequence::new(self.cues[k].tokens.clone())
    }
}

/// A query predicate decoded from descriptor tokens and checked on pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predicate {
    Recolor { patch: usize, color: usize },
    Stripe { patch: usize },
    Marker { patch: usize },
    Count { n: usize },
}

fn near(p: [u8; 3], q: [u8; 3]) -> bool {
    p.iter().zip(q).all(|(&a, b)| (a as i32 - b as i32).abs() <= 16)
}

impl Predicate {
    pub fn from_tokens(spec: &SyntheticSpec, tokens: &[u32]) -> Option<Self> {
        spec.vocabulary().decode(tokens)
    }

    pub fn holds(&self, spec: &SyntheticSpec, image: &Image) -> bool {
        match *self {
            Predicate::Recolor { patch, color } => {
                let px = spec.patch_pixels(image, patch);
                px.iter().filter(|&&p| near(p, PALETTE[color].1)).count() * 4 >= px.len() * 3
            }
            Predicate::Stripe { patch } => has_stripes(spec, image, patch),
            Predicate::Marker { patch } => has_marker(spec, image, patch),
            Predicate::Count { n } => (0..spec.num_patches()).filter(|&p| has_dot(spec, image, p)).count() == n,
        }
    }
}

fn has_stripes(spec: &SyntheticSpec, image: &Image, patch: usize) -> bool {
    let px = spec.patch_pixels(image, patch);
    let ps = spec.patch_size;
    let mut diff = 0i64;
    for y in 0..ps - 1 {
        for x in 0..ps {
            for c in 0..3 {
                diff += (px[y * ps + x][c] as i64 - px[(y + 1) * ps + x][c] as i64).abs();
            }
        }
    }
    diff / ((ps - 1) * ps * 3) as i64 > 100
}

fn has_marker(spec: &SyntheticSpec, image: &Image, patch: usize) -> bool {
    spec.patch_pixels(image, patch).iter().filter(|&&p| near(p, [255, 255, 255])).count() >= 3
}

fn has_dot(spec: &SyntheticSpec, image: &Image, patch: usize) -> bool {
    spec.patch_pixels(image, patch).iter().filter(|&&p| near(p, [0, 0, 0])).count() >= 3
}

/// Deterministic generator state for one set, derived from the global seed
/// and the set id only.
pub fn instance_rng(seed: u64, set_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(set_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct Scene {
    base: [f64; 3],
    gx: [f64; 3],
    gy: [f64; 3],
}

impl Scene {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut s = Scene {
            base: [0.0; 3],
            gx: [0.0; 3],
            gy: [0.0; 3],
        };
        for c in 0..3 {
            s.base[c] = rng.random_range(96.0..160.0);
            s.gx[c] = rng.random_range(-28.0..28.0);
            s.gy[c] = rng.random_range(-28.0..28.0);
        }
        s
    }

    fn drifted(&self, step: f64, drift: &[f64; 3]) -> Self {
        Scene {
            base: [0, 1, 2].map(|c| self.base[c] + step * drift[c]),
            gx: self.gx,
            gy: self.gy,
        }
    }

    fn render(&self, spec: &SyntheticSpec, rng: &mut impl Rng) -> Image {
        let mut img = Image::new(spec.height, spec.width, 3);
        let amp = (spec.noise * 255.0).round() as i32;
        for y in 0..spec.height {
            for x in 0..spec.width {
                for c in 0..3 {
                    let v = self.base[c]
                        + self.gx[c] * x as f64 / spec.width as f64
                        + self.gy[c] * y as f64 / spec.height as f64;
                    let n = if amp > 0 { rng.random_range(-amp..=amp) } else { 0 };
                    img.set(y, x, c, (v.round() as i32 + n).clamp(BASE_LOW, BASE_HIGH) as u8);
                }
            }
        }
        img
    }
}

fn plant(spec: &SyntheticSpec, img: &mut Image, pred: Predicate, rng: &mut impl Rng) -> Vec<usize> {
    let ps = spec.patch_size;
    let fill = |img: &mut Image, patch: usize, f: &dyn Fn(usize, usize) -> Option<[u8; 3]>| {
        let (y0, x0) = spec.patch_origin(patch);
        for dy in 0..ps {
            for dx in 0..ps {
                if let Some(px) = f(dy, dx) {
                    for (c, &v) in px.iter().enumerate() {
                        img.set(y0 + dy, x0 + dx, c, v);
                    }
                }
            }
        }
    };
    match pred {
        Predicate::Recolor { patch, color } => {
            fill(img, patch, &|_, _| Some(PALETTE[color].1));
            vec![patch]
        }
        Predicate::Stripe { patch } => {
            fill(img, patch, &|dy, _| Some(if dy % 2 == 0 { [255, 255, 255] } else { [0, 0, 0] }));
            vec![patch]
        }
        Predicate::Marker { patch } => {
            let oy = rng.random_range(0..ps - 1);
            let ox = rng.random_range(0..ps - 1);
            fill(img, patch, &|dy, dx| {
                (dy >= oy && dy < oy + 2 && dx >= ox && dx < ox + 2).then_some([255, 255, 255])
            });
            vec![patch]
        }
        Predicate::Count { n } => {
            let mut patches: Vec<usize> = (0..spec.num_patches()).collect();
            patches.shuffle(rng);
            patches.truncate(n);
            patches.sort_unstable();
            for &p in &patches {
                let oy = rng.random_range(0..ps - 1);
                let ox = rng.random_range(0..ps - 1);
                fill(img, p, &|dy, dx| (dy >= oy && dy < oy + 2 && dx >= ox && dx < ox + 2).then_some([0, 0, 0]));
            }
            patches
        }
    }
}

fn describe(vocab: &Vocabulary, pred: Predicate) -> (Vec<u32>, String) {
    let (kind, mut words, text) = match pred {
        Predicate::Recolor { patch, color } => (
            CueKind::PatchRecolor,
            vec![vocab.position(patch), vocab.color(color)],
            format!("recolor patch{patch} {}", PALETTE[color].0),
        ),
        Predicate::Stripe { patch } => (CueKind::PatchBlurStripe, vec![vocab.position(patch)], format!("stripe patch{patch}")),
        Predicate::Marker { patch } => (CueKind::PositionShift, vec![vocab.position(patch)], format!("marker patch{patch}")),
        Predicate::Count { n } => (CueKind::ObjectCount, vec![vocab.count(n)], format!("count {n}")),
    };
    let mut tokens = vec![BOS, vocab.kind(kind)];
    tokens.append(&mut words);
    tokens.push(EOS);
    (tokens, text)
}

/// `m` pairwise-distinct cue predicates of one kind, or `None` when the cue
/// space is too small.
fn distinct_predicates(spec: &SyntheticSpec, kind: CueKind, m: usize, rng: &mut impl Rng) -> Option<Vec<Predicate>> {
    let p = spec.num_patches();
    let mut space: Vec<Predicate> = match kind {
        CueKind::PatchRecolor => (0..p)
            .flat_map(|patch| (0..PALETTE.len()).map(move |color| Predicate::Recolor { patch, color }))
            .collect(),
        CueKind::PatchBlurStripe => (0..p).map(|patch| Predicate::Stripe { patch }).collect(),
        CueKind::PositionShift => (0..p).map(|patch| Predicate::Marker { patch }).collect(),
        CueKind::ObjectCount => (1..=MAX_COUNT.min(p)).map(|n| Predicate::Count { n }).collect(),
    };
    if space.len() < m {
        return None;
    }
    space.shuffle(rng);
    space.truncate(m);
    Some(space)
}

fn attempt(spec: &SyntheticSpec, set_id: &str, rng: &mut ChaCha8Rng) -> Option<Instance> {
    let m = spec.candidates;
    let kind = *spec.kinds.choose(rng)?;
    let preds = distinct_predicates(spec, kind, m, rng)?;
    let set_kind = if rng.random_bool(spec.video_fraction) {
        SetKind::Video
    } else {
        SetKind::Static
    };
    let golden = rng.random_range(0..m);
    let vocab = spec.vocabulary();

    let first = Scene::sample(rng);
    let drift = [0, 1, 2].map(|_| rng.random_range(-4.0..4.0));
    let mut images = Vec::with_capacity(m);
    let mut cues = Vec::with_capacity(m);
    let mut texts = Vec::with_capacity(m);
    for (k, &pred) in preds.iter().enumerate() {
        let scene = match set_kind {
            SetKind::Video => first.drifted(k as f64, &drift),
            SetKind::Static => Scene::sample(rng),
        };
        let mut img = scene.render(spec, rng);
        let patches = plant(spec, &mut img, pred, rng);
        let (tokens, text) = describe(&vocab, pred);
        images.push(img);
        cues.push(CandidateCue { tokens, patches });
        texts.push(text);
    }

    // Every description must pick out exactly its own candidate.
    for (k, cue) in cues.iter().enumerate() {
        let pred = vocab.decode(&cue.tokens)?;
        let hits: Vec<usize> = (0..m).filter(|&j| pred.holds(spec, &images[j])).collect();
        if hits != [k] {
            return None;
        }
    }

    let set = CandidateSet {
        set_id: set_id.to_string(),
        images,
        query: TokenSequence::new(cues[golden].tokens.clone()),
        golden,
        kind: set_kind,
    };
    Some(Instance {
        set,
        cues,
        text: texts.swap_remove(golden),
    })
}

/// One candidate set. The result depends only on `(spec, seed, set_id)`.
pub fn generate_instance(spec: &SyntheticSpec, seed: u64, set_id: &str) -> Result<Instance> {
    spec.validate()?;
    let mut rng = instance_rng(seed, set_id);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(inst) = attempt(spec, set_id, &mut rng) {
            return Ok(inst);
        }
    }
    Err(Error::Generation(format!(
        "set {set_id}: no instance with a unique satisfier after {MAX_ATTEMPTS} attempts"
    )))
}

/// `count` sets named `<prefix>-000000`, `<prefix>-000001`, ...
pub fn generate_split(spec: &SyntheticSpec, seed: u64, prefix: &str, count: usize) -> Result<Vec<Instance>> {
    (0..count)
        .map(|i| generate_instance(spec, seed, &format!("{prefix}-{i:06}")))
        .collect()
}
