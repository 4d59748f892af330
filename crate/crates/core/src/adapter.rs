//! Multi-scale adapter.
//!
//! One down-projection layer (DPAL) is attached to each selected ViT layer;
//! their reduced outputs are concatenated (or summed) and fed to a single
//! shared up-projection layer (UPAL) that lives outside the ViT. The UPAL
//! output is added to the ViT output. The UPAL starts at zero, so inserting
//! an adapter does not change the model until it is trained.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::config::{AdapterConfig, Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::model::layers::{Linear, Registrar};
use crate::params::Init;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    /// `(1-based layer, affine d -> d/δ)` per inserted layer.
    pub dpal: Vec<(usize, Linear)>,
    pub upal: Linear,
    reduced_width: usize,
    model_width: usize,
}

impl AdapterParams {
    pub fn build<T: Scalar, R: Rng>(reg: &mut Registrar<'_, T, R>, model: &ModelConfig, config: &AdapterConfig) -> Self {
        let d = model.vit_width;
        let reduced = config.reduced_width(model);
        let dpal = config
            .layers
            .iter()
            .map(|&l| (l, reg.linear(&format!("adapter.dpal.{l}"), d, reduced)))
            .collect();
        let upal = reg.linear_with("adapter.upal", config.upal_input_width(model), d, Init::Zeros);
        Self {
            config: config.clone(),
            dpal,
            upal,
            reduced_width: reduced,
            model_width: d,
        }
    }

    pub fn reduced_width(&self) -> usize {
        self.reduced_width
    }

    /// DPAL of ViT layer `layer`: affine map followed by a rectifier.
    pub fn dpal_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, layer: usize, states: NodeId) -> Result<NodeId> {
        let (_, lin) = self
            .dpal
            .iter()
            .find(|(l, _)| *l == layer)
            .ok_or_else(|| Error::Usage(format!("no adapter is inserted at layer {layer}")))?;
        if g.value(states).cols() != self.model_width {
            return Err(Error::Shape(format!(
                "DPAL expects width {}, got {}",
                self.model_width,
                g.value(states).cols()
            )));
        }
        let h = lin.forward(g, states);
        Ok(g.relu(h))
    }

    pub fn upal_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, aggregated: NodeId) -> Result<NodeId> {
        let want = match self.config.aggregation {
            Aggregation::Concat => self.dpal.len() * self.reduced_width,
            Aggregation::Add => self.reduced_width,
        };
        let got = g.value(aggregated).cols();
        if got != want {
            return Err(Error::Shape(format!(
                "UPAL expects {want} input features for {} aggregation, got {got}",
                self.config.aggregation
            )));
        }
        Ok(self.upal.forward(g, aggregated))
    }

    /// Adapter residual `Y` from the per-layer ViT states (index 0 = layer 1).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, layer_states: &[NodeId]) -> Result<NodeId> {
        let mut reduced = Vec::with_capacity(self.dpal.len());
        for &(l, _) in &self.dpal {
            let states = *layer_states
                .get(l - 1)
                .ok_or_else(|| Error::Usage(format!("ViT layer {l} was not produced")))?;
            reduced.push(self.dpal_forward(g, l, states)?);
        }
        let agg = aggregate(g, self.config.aggregation, &reduced)?;
        self.upal_forward(g, agg)
    }
}

/// Combine DPAL outputs: column concatenation or element-wise sum.
pub fn aggregate<T: Scalar>(g: &mut Graph<'_, T>, mode: Aggregation, reduced: &[NodeId]) -> Result<NodeId> {
    let first = *reduced
        .first()
        .ok_or_else(|| Error::Shape("nothing to aggregate".into()))?;
    let shape = g.value(first).shape();
    if let Some(bad) = reduced.iter().find(|&&r| g.value(r).shape() != shape) {
        return Err(Error::Shape(format!(
            "adapter outputs disagree: {:?} vs {:?}",
            shape,
            g.value(*bad).shape()
        )));
    }
    Ok(match mode {
        Aggregation::Concat => {
            if reduced.len() == 1 {
                first
            } else {
                g.concat_cols(reduced.to_vec())
            }
        }
        Aggregation::Add => reduced[1..].iter().fold(first, |acc, &r| g.add(acc, r)),
    })
}

/// ViT output plus the adapter residual.
pub fn adapted_output<T: Scalar>(g: &mut Graph<'_, T>, vit_final: NodeId, y: NodeId) -> Result<NodeId> {
    if g.value(vit_final).shape() != g.value(y).shape() {
        return Err(Error::Shape(format!(
            "ViT output {:?} and adapter residual {:?} differ",
            g.value(vit_final).shape(),
            g.value(y).shape()
        )));
    }
    Ok(g.add(vit_final, y))
}

/// Number of adapter-owned scalars:
/// `Σ_inserted (d·d̃ + d̃) + (w_in·d + d)` with `w_in = k·d̃` (concat) or `d̃` (add).
pub fn param_count(model: &ModelConfig, config: &AdapterConfig) -> usize {
    let d = model.vit_width;
    let reduced = config.reduced_width(model);
    let dpal = config.layers.len() * (d * reduced + reduced);
    let upal = config.upal_input_width(model) * d + d;
    dpal + upal
}
