//! Datasets on disk: a line-delimited JSON manifest plus one P6 pixmap per
//! candidate image.
//!
//! ```text
//! <root>/manifest.jsonl
//! <root>/sets/<set_id>/<k>.ppm
//! ```
//!
//! Each manifest line holds `set_id`, `images` (paths relative to the root),
//! `tokens`, `text` (optional), `golden`, `kind` (`video` or `static`),
//! `category` (optional) and, for synthetic sets, `cues`: the description
//! tokens and cue patch indices of every candidate.

pub mod ppm;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, TokenSequence, BOS, EOS, UNK};
use crate::inter_context::{CandidateSet, SetKind};
use synthetic::{CandidateCue, Instance};

pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub set_id: String,
    pub images: Vec<String>,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub golden: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cues: Option<Vec<CandidateCue>>,
}

/// A loaded candidate set with its optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub set: CandidateSet,
    pub text: Option<String>,
    pub category: Option<String>,
    pub cues: Option<Vec<CandidateCue>>,
}

impl DatasetEntry {
    /// Description of candidate `k`; falls back to the query for the golden
    /// candidate when no per-candidate cues are stored.
    pub fn description(&self, k: usize) -> Option<TokenSequence> {
        match &self.cues {
            Some(c) => Some(TokenSequence::new(c[k].tokens.clone())),
            None => (k == self.set.golden).then(|| self.set.query.clone()),
        }
    }

    /// Cue patches of the golden candidate, when known.
    pub fn golden_cue_patches(&self) -> Option<&[usize]> {
        self.cues.as_ref().map(|c| c[self.set.golden].patches.as_slice())
    }
}

impl From<Instance> for DatasetEntry {
    fn from(inst: Instance) -> Self {
        Self {
            set: inst.set,
            text: Some(inst.text),
            category: None,
            cues: Some(inst.cues),
        }
    }
}

fn image_path(set_id: &str, k: usize) -> String {
    format!("sets/{set_id}/{k}.ppm")
}

pub fn write_dataset(entries: &[DatasetEntry], root: &Path) -> Result<()> {
    let manifest = root.join(MANIFEST);
    let mut lines = String::new();
    for e in entries {
        let dir = root.join("sets").join(&e.set.set_id);
        fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
        let mut images = Vec::with_capacity(e.set.images.len());
        for (k, img) in e.set.images.iter().enumerate() {
            let rel = image_path(&e.set.set_id, k);
            ppm::write(img, &root.join(&rel))?;
            images.push(rel);
        }
        let record = ManifestRecord {
            set_id: e.set.set_id.clone(),
            images,
            tokens: e.set.query.ids().to_vec(),
            text: e.text.clone(),
            golden: e.set.golden,
            kind: e.set.kind.to_string(),
            category: e.category.clone(),
            cues: e.cues.clone(),
        };
        lines.push_str(&serde_json::to_string(&record).expect("manifest records serialize"));
        lines.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(lines.as_bytes()).map_err(|e| Error::io(&manifest, e))
}

fn load_record(root: &Path, record: ManifestRecord) -> Result<DatasetEntry> {
    let id = record.set_id.clone();
    if record.golden >= record.images.len() {
        return Err(Error::dataset(
            &id,
            format!("golden index {} out of range for {} images", record.golden, record.images.len()),
        ));
    }
    if let Some(cues) = &record.cues {
        if cues.len() != record.images.len() {
            return Err(Error::dataset(&id, "one cue per candidate required"));
        }
    }
    let kind: SetKind = record.kind.parse().map_err(|_| Error::dataset(&id, format!("unknown kind `{}`", record.kind)))?;
    let mut images = Vec::with_capacity(record.images.len());
    for rel in &record.images {
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::dataset(&id, format!("missing image {}", path.display())));
        }
        images.push(ppm::read(&path).map_err(|e| Error::dataset(&id, e.to_string()))?);
    }
    let set = CandidateSet {
        set_id: record.set_id,
        images,
        query: TokenSequence::new(record.tokens),
        golden: record.golden,
        kind,
    };
    set.validate()?;
    Ok(DatasetEntry {
        set,
        text: record.text,
        category: record.category,
        cues: record.cues,
    })
}

pub fn read_dataset(root: &Path) -> Result<Vec<DatasetEntry>> {
    let manifest = root.join(MANIFEST);
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::dataset(format!("line {}", n + 1), e.to_string()))?;
        out.push(load_record(root, record)?);
    }
    Ok(out)
}

/// Word to token id map for ingesting natural-language queries.
#[derive(Debug, Clone, Default)]
pub struct TokenMap {
    ids: HashMap<String, u32>,
}

impl TokenMap {
    /// One `word id` pair per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(word), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Input(format!("token map line {}: expected `word id`", n + 1)));
            };
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Input(format!("token map line {}: bad id `{id}`", n + 1)))?;
            ids.insert(word.to_lowercase(), id);
        }
        Ok(Self { ids })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Lowercased whitespace words wrapped in BOS/EOS, truncated to
    /// `max_tokens`; unknown words map to UNK.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(
            text.split_whitespace()
                .map(|w| *self.ids.get(&w.to_lowercase()).unwrap_or(&UNK))
                .take(max_tokens.saturating_sub(2)),
        );
        ids.push(EOS);
        TokenSequence::new(ids)
    }
}

/// Read an IMAGECODE-shaped directory: `<root>/images/<set>/img<k>.ppm`
/// and a split file mapping `set -> {golden index -> description}`. Every
/// description becomes one candidate set. Set names containing
/// `open-images` are static, all others video.
pub fn ingest_imagecode(root: &Path, split: &Path, tokens: &TokenMap, max_tokens: usize) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(split).map_err(|e| Error::io(split, e))?;
    let split: BTreeMap<String, BTreeMap<String, String>> =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("split file: {e}")))?;
    let mut out = Vec::new();
    for (set_name, queries) in split {
        let dir = root.join("images").join(&set_name);
        let mut paths: Vec<(usize, PathBuf)> = Vec::new();
        let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in listing {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let index = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("img"))
                .and_then(|s| s.parse().ok());
            if let (Some(k), Some("ppm")) = (index, path.extension().and_then(|e| e.to_str())) {
                paths.push((k, path));
            }
        }
        paths.sort();
        if paths.iter().enumerate().any(|(i, (k, _))| i != *k) {
            return Err(Error::dataset(&set_name, "image indices are not contiguous from img0"));
        }
        let images: Vec<Image> = paths
            .iter()
            .map(|(_, p)| ppm::read(p).map_err(|e| Error::dataset(&set_name, e.to_string())))
            .collect::<Result<_>>()?;
        let kind = if set_name.contains("open-images") {
            SetKind::Static
        } else {
            SetKind::Video
        };
        let mut queries: Vec<(usize, String)> = queries
            .into_iter()
            .map(|(k, t)| {
                k.parse()
                    .map(|k| (k, t))
                    .map_err(|_| Error::dataset(&set_name, format!("bad golden index `{k}`")))
            })
            .collect::<Result<_>>()?;
        queries.sort();
        for (golden, description) in queries {
            let set = CandidateSet {
                set_id: format!("{set_name}/{golden}"),
                images: images.clone(),
                query: tokens.tokenize(&description, max_tokens),
                golden,
                kind,
            };
            set.validate()?;
            out.push(DatasetEntry {
                set,
                text: Some(description),
                category: None,
                cues: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::synthetic::{generate_split, SyntheticSpec};
    use super::*;

    #[test]
    fn round_trip_is_pixel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<DatasetEntry> = generate_split(&SyntheticSpec::default(), 4, "rt", 10)
            .unwrap()
            .into_iter()
            .map(Into::into)
            .collect();
        write_dataset(&entries, dir.path()).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), entries);
    }

    #[test]
    fn out_of_range_golden_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries: Vec<DatasetEntry> = generate_split(&SyntheticSpec::default(), 4, "bad", 1)
            .unwrap()
            .into_iter()
            .map(Into::into)
            .collect();
        entries[0].set.golden = 10;
        write_dataset(&entries, dir.path()).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Dataset { record, .. } if record == "bad-000000"), "{err}");
    }

    #[test]
    fn missing_image_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<DatasetEntry> = generate_split(&SyntheticSpec::default(), 4, "gone", 1)
            .unwrap()
            .into_iter()
            .map(Into::into)
            .collect();
        write_dataset(&entries, dir.path()).unwrap();
        fs::remove_file(dir.path().join("sets/gone-000000/3.ppm")).unwrap();
        assert!(read_dataset(dir.path()).unwrap_err().to_string().contains("gone-000000"));
    }

    #[test]
    fn tokenizer_wraps_and_truncates() {
        let map = TokenMap::parse("# words\nred 7\nleft 9\n").unwrap();
        assert_eq!(map.tokenize("Red ball LEFT", 8).ids(), &[BOS, 7, UNK, 9, EOS]);
        assert_eq!(map.tokenize("red red red red", 4).ids(), &[BOS, 7, 7, EOS]);
        assert!(TokenMap::parse("red").is_err());
    }
}
