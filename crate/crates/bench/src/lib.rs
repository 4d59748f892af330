//! Shared fixtures for the benchmarks.

use contextalign::data::synthetic::{generate_split, SyntheticSpec};
use contextalign::data::DatasetEntry;
use contextalign::training::config::RunConfig;
use contextalign::Model;

/// A model for `cfg` and `sets` synthetic training sets.
pub fn fixture(cfg: &RunConfig, sets: usize) -> (Model<f32>, Vec<DatasetEntry>) {
    let spec: SyntheticSpec = cfg.synthetic_spec();
    let data = generate_split(&spec, cfg.seed, "bench", sets)
        .expect("synthetic generation")
        .into_iter()
        .map(Into::into)
        .collect();
    (Model::new(cfg.arch(), cfg.seed).expect("valid configuration"), data)
}

pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = contextalign::ModelConfig::toy();
    cfg.data.candidates = 4;
    cfg
}
