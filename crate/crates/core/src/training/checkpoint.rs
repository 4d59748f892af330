//! Checkpoint files: a text header followed by raw little-endian f32 data.
//!
//! ```text
//! contextalign-checkpoint 1
//! stage <0-3>
//! rng <seed hex> <stream> <word position>
//! config <key> = <value>          (one line per setting)
//! tensor <name> f32 <rows>x<cols> <byte offset> <group>
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::ArchConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamGroup;
use crate::tensor::Matrix;

const MAGIC: &str = "contextalign-checkpoint 1";

/// Resumable generator state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub rng: RngState,
    /// Settings snapshot as `(key, value)` lines.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, stage: u8, rng: &ChaCha8Rng, config: Vec<(String, String)>) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                value: p.value.clone(),
            })
            .collect();
        Self {
            stage,
            rng: RngState::capture(rng),
            config,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nstage {}\n", self.stage);
        header += &format!(
            "rng {} {} {}\n",
            hex::encode(self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        );
        for (k, v) in &self.config {
            header += &format!("config {k} = {v}\n");
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            header += &format!(
                "tensor {} f32 {}x{} {} {}\n",
                t.name,
                t.value.rows(),
                t.value.cols(),
                offset,
                t.group
            );
            offset += t.value.len() * 4;
        }
        header += "end\n";
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::checkpoint("<header>", m);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("header is not terminated by `end`".into()))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| corrupt("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let stage = next_line()?
            .strip_prefix("stage ")
            .and_then(|s| s.parse().ok())
            .filter(|&s: &u8| s <= 3)
            .ok_or_else(|| corrupt("bad stage line".into()))?;
        let rng_line = next_line()?;
        let rng = (|| {
            let mut parts = rng_line.strip_prefix("rng ")?.split(' ');
            let seed: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
            let stream = parts.next()?.parse().ok()?;
            let word_pos = parts.next()?.parse().ok()?;
            parts.next().is_none().then_some(RngState { seed, stream, word_pos })
        })()
        .ok_or_else(|| corrupt("bad rng line".into()))?;

        let mut config = Vec::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                let (k, v) = kv
                    .split_once(" = ")
                    .ok_or_else(|| corrupt(format!("bad config line `{line}`")))?;
                config.push((k.to_string(), v.to_string()));
                continue;
            }
            let f: Vec<&str> = line
                .strip_prefix("tensor ")
                .ok_or_else(|| corrupt(format!("unexpected line `{line}`")))?
                .split(' ')
                .collect();
            let &[name, dtype, shape, offset, group] = f.as_slice() else {
                return Err(corrupt(format!("bad tensor line `{line}`")));
            };
            let bad = |m: &str| Error::checkpoint(name, m);
            if dtype != "f32" {
                return Err(bad("only f32 tensors are supported"));
            }
            let (r, c) = shape.split_once('x').ok_or_else(|| bad("bad shape"))?;
            let rows: usize = r.parse().map_err(|_| bad("bad shape"))?;
            let cols: usize = c.parse().map_err(|_| bad("bad shape"))?;
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let group: ParamGroup = group.parse().map_err(|_| bad("bad group"))?;
            layout.push((name.to_string(), rows, cols, offset, group));
        }
        let payload = &bytes[pos..];
        let mut tensors = Vec::with_capacity(layout.len());
        let mut expected = 0usize;
        for (name, rows, cols, offset, group) in layout {
            let len = rows * cols * 4;
            if offset != expected {
                return Err(Error::checkpoint(&name, format!("offset {offset}, expected {expected}")));
            }
            let raw = payload
                .get(offset..offset + len)
                .ok_or_else(|| Error::checkpoint(&name, "payload is truncated"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(TensorEntry {
                name,
                group,
                value: Matrix::from_vec(rows, cols, data),
            });
            expected += len;
        }
        if payload.len() != expected {
            return Err(corrupt(format!(
                "payload holds {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            stage,
            rng,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Load every tensor into a model laid out by `arch`, checking names,
    /// groups and shapes.
    pub fn restore(&self, arch: ArchConfig) -> Result<Model<f32>> {
        let mut model = Model::<f32>::new(arch, 0)?;
        let expected = model.params().len();
        if self.tensors.len() != expected {
            let names: Vec<&str> = model.params().iter().map(|(_, p)| p.name.as_str()).collect();
            let extra = self.tensors.iter().find(|t| !names.contains(&t.name.as_str()));
            let missing = names.iter().find(|n| !self.tensors.iter().any(|t| &t.name == *n));
            let culprit = extra.map(|t| t.name.clone()).or(missing.map(|n| n.to_string()));
            return Err(Error::checkpoint(
                culprit.unwrap_or_default(),
                format!("checkpoint has {} tensors, the configuration expects {expected}", self.tensors.len()),
            ));
        }
        for t in &self.tensors {
            let id = model
                .params()
                .id(&t.name)
                .ok_or_else(|| Error::checkpoint(&t.name, "not part of the configured model"))?;
            let p = model.params().get(id);
            if p.value.shape() != t.value.shape() {
                let mut msg = format!(
                    "shape {:?} in the checkpoint, {:?} in the configuration",
                    t.value.shape(),
                    p.value.shape()
                );
                if t.group == ParamGroup::Adapter {
                    msg = format!("adapter width mismatch (check the reduction setting): {msg}");
                }
                return Err(Error::checkpoint(&t.name, msg));
            }
            if p.group != t.group {
                return Err(Error::checkpoint(&t.name, format!("group {} expected {}", t.group, p.group)));
            }
            *model.params_mut().value_mut(id) = t.value.clone();
        }
        Ok(model)
    }
}
