//! Named trainable tensors, partitioned into parameter groups.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter groups. Freeze policies are expressed over these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    Fusion,
    Scorer,
    Adapter,
    Decoder,
    MaskEmbedding,
    InterContext,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Fusion,
        ParamGroup::Scorer,
        ParamGroup::Adapter,
        ParamGroup::Decoder,
        ParamGroup::MaskEmbedding,
        ParamGroup::InterContext,
    ];

    /// Groups that make up the frozen pretrained backbone analog.
    pub const BACKBONE: [ParamGroup; 4] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Fusion,
        ParamGroup::Scorer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Scorer => "scorer",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Decoder => "decoder",
            ParamGroup::MaskEmbedding => "mask_embedding",
            ParamGroup::InterContext => "inter_context",
        }
    }

    pub fn is_backbone(self) -> bool {
        Self::BACKBONE.contains(&self)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, T::one()),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                Matrix::from_fn(rows, cols, |_, _| T::of(normal.sample(rng)))
            }
        };
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of scalars held by `group`.
    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same layout, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over the little-endian f32 images of every tensor in `group`,
    /// in registration order.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hasher.update(p.name.as_bytes());
            for &x in p.value.data() {
                hasher.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn tensor_checksum(&self, id: ParamId) -> String {
        let mut hasher = Sha256::new();
        for &x in self.value(id).data() {
            hasher.update(x.as_f64().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_group_contents_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::<f32>::new();
        let a = store.register("a", ParamGroup::Adapter, 2, 2, Init::Normal(1.0), &mut rng);
        store.register("b", ParamGroup::Fusion, 2, 2, Init::Normal(1.0), &mut rng);
        let fusion = store.group_checksum(ParamGroup::Fusion);
        let adapter = store.group_checksum(ParamGroup::Adapter);
        store.value_mut(a).set(0, 0, 42.0);
        assert_eq!(store.group_checksum(ParamGroup::Fusion), fusion);
        assert_ne!(store.group_checksum(ParamGroup::Adapter), adapter);
    }

    #[test]
    fn group_names_parse_back() {
        for g in ParamGroup::ALL {
            assert_eq!(g.name().parse::<ParamGroup>().unwrap(), g);
        }
        assert!("nope".parse::<ParamGroup>().is_err());
    }
}
