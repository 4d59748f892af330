//! The stage 0 → 3 sequence on synthetic splits, with and without adapter.

use crate::adapter::param_count;
use crate::config::quarter_depths;
use crate::data::synthetic::generate_split;
use crate::data::DatasetEntry;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode};
use crate::model::Model;
use crate::training::config::RunConfig;
use crate::training::{run_stage, transplant, Observer};

/// Held-out and training sets for `cfg`. Set ids differ by prefix, so the
/// two splits never share an instance.
pub fn synthetic_splits(cfg: &RunConfig) -> Result<(Vec<DatasetEntry>, Vec<DatasetEntry>)> {
    let spec = cfg.synthetic_spec();
    let train = generate_split(&spec, cfg.seed, "train", cfg.train_sets)?;
    let eval = generate_split(&spec, cfg.seed, "eval", cfg.eval_sets)?;
    Ok((
        train.into_iter().map(Into::into).collect(),
        eval.into_iter().map(Into::into).collect(),
    ))
}

/// Models after each stage. `pretrained` is `None` for the ablation.
pub struct Trained {
    pub backbone: Model<f32>,
    pub pretrained: Option<Model<f32>>,
    pub finetuned: Model<f32>,
    pub context: Model<f32>,
}

pub fn train_all(cfg: &RunConfig, train: &[DatasetEntry], observer: &mut dyn Observer) -> Result<Trained> {
    let base = cfg.arch().without_adapter();
    let backbone = run_stage(0, cfg, train, Model::new(base.clone(), cfg.seed)?, observer)?.model;
    let (pretrained, start) = if cfg.adapter {
        let adapted = transplant(cfg, cfg.arch(), &backbone)?;
        let m = run_stage(1, cfg, train, adapted, observer)?.model;
        (Some(m.clone()), m)
    } else {
        (None, transplant(cfg, base, &backbone)?)
    };
    let finetuned = run_stage(2, cfg, train, start, observer)?.model;
    let context = run_stage(3, cfg, train, finetuned.clone(), observer)?.model;
    Ok(Trained {
        backbone,
        pretrained,
        finetuned,
        context,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    MaskRatio,
    InsertionLayers,
    Delta,
}

impl GridAxis {
    /// Settings key the grid value is written to.
    pub fn key(self) -> &'static str {
        match self {
            GridAxis::MaskRatio => "mask ratio",
            GridAxis::InsertionLayers => "insertion layers",
            GridAxis::Delta => "reduction",
        }
    }

    /// The published grids, with layer patterns mapped onto `depth`: the
    /// last layer, quarter depths, every layer. Quarter depths that already
    /// cover every layer are replaced by `{depth/2, depth}`.
    pub fn default_values(self, depth: usize) -> Vec<String> {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match self {
            GridAxis::MaskRatio => ["0.25", "0.5", "0.75"].map(String::from).to_vec(),
            GridAxis::Delta => ["1", "2", "4", "8"].map(String::from).to_vec(),
            GridAxis::InsertionLayers => {
                let all: Vec<usize> = (1..=depth).collect();
                let mut quarters = quarter_depths(depth);
                if quarters == all {
                    quarters = vec![(depth / 2).max(1), depth];
                    quarters.dedup();
                }
                vec![depth.to_string(), join(&quarters), join(&all)]
            }
        }
    }
}

impl std::fmt::Display for GridAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GridAxis::MaskRatio => "mask_ratio",
            GridAxis::InsertionLayers => "insertion_layers",
            GridAxis::Delta => "delta",
        })
    }
}

impl std::str::FromStr for GridAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(GridAxis::MaskRatio),
            "insertion_layers" => Ok(GridAxis::InsertionLayers),
            "delta" => Ok(GridAxis::Delta),
            other => Err(Error::Usage(format!(
                "unknown grid axis `{other}` (mask_ratio, insertion_layers, delta)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridScores {
    pub accuracy_all: f64,
    pub accuracy_video: f64,
    pub accuracy_static: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub value: String,
    /// Scores, or the reason the value was skipped.
    pub outcome: std::result::Result<GridScores, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub axis: GridAxis,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    /// Tab-separated table with a header line.
    pub fn to_text(&self) -> String {
        let mut out = format!("# axis = {}\nvalue\taccuracy_all\taccuracy_video\taccuracy_static\tparam_count\n", self.axis);
        for r in &self.rows {
            match &r.outcome {
                Ok(s) => out += &format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                    r.value, s.accuracy_all, s.accuracy_video, s.accuracy_static, s.param_count
                ),
                Err(w) => out += &format!("{}\twarning: {w}\n", r.value),
            }
        }
        out
    }
}

/// Stage 0 once, then stage 1 and zero-shot evaluation for every value.
pub fn sensitivity_grid(
    cfg: &RunConfig,
    axis: GridAxis,
    values: &[String],
    train: &[DatasetEntry],
    eval: &[DatasetEntry],
    observer: &mut dyn Observer,
) -> Result<GridTable> {
    let base = cfg.arch().without_adapter();
    let backbone = run_stage(0, cfg, train, Model::new(base, cfg.seed)?, observer)?.model;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut c = cfg.clone();
        c.adapter = true;
        let checked = c.set(axis.key(), value).and_then(|_| c.validate());
        if let Err(e) = checked {
            rows.push(GridRow {
                value: value.clone(),
                outcome: Err(e.to_string()),
            });
            continue;
        }
        let model = transplant(&c, c.arch(), &backbone)?;
        let model = run_stage(1, &c, train, model, observer)?.model;
        let report = evaluate(&model, eval, EvalMode::ZeroShot, c.seed, c.fingerprint(), None)?;
        rows.push(GridRow {
            value: value.clone(),
            outcome: Ok(GridScores {
                accuracy_all: report.accuracy_all,
                accuracy_video: report.accuracy_video,
                accuracy_static: report.accuracy_static,
                param_count: param_count(&c.model, &c.adapter_config()),
            }),
        });
    }
    Ok(GridTable { axis, rows })
}
