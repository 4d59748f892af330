//! Parameterised building blocks: affine maps, layer norm, attention and
//! pre-normalised transformer blocks.

use rand::Rng;

use crate::autograd::{AttentionLayout, Graph, NodeId};
use crate::config::Activation;
use crate::params::{Init, ParamGroup, ParamId, ParameterStore};
use crate::tensor::Scalar;

/// Registers parameters under a common name prefix and group.
pub struct Registrar<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParameterStore<T>,
    pub rng: &'a mut R,
    pub group: ParamGroup,
}

impl<'a, T: Scalar, R: Rng> Registrar<'a, T, R> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut R, group: ParamGroup) -> Self {
        Self { store, rng, group }
    }

    pub fn tensor(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.register(name, self.group, rows, cols, init, self.rng)
    }

    /// `input -> output` affine map, LeCun-normal weights and zero bias.
    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Linear {
        let std = 1.0 / (input as f64).sqrt();
        self.linear_with(name, input, output, Init::Normal(std))
    }

    pub fn linear_with(&mut self, name: &str, input: usize, output: usize, init: Init) -> Linear {
        Linear {
            w: self.tensor(&format!("{name}.w"), input, output, init),
            b: self.tensor(&format!("{name}.b"), 1, output, Init::Zeros),
        }
    }

    pub fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gamma: self.tensor(&format!("{name}.gamma"), 1, width, Init::Ones),
            beta: self.tensor(&format!("{name}.beta"), 1, width, Init::Zeros),
        }
    }

    pub fn attention(&mut self, name: &str, width: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), width, width),
            k: self.linear(&format!("{name}.k"), width, width),
            v: self.linear(&format!("{name}.v"), width, width),
            o: self.linear(&format!("{name}.o"), width, width),
        }
    }

    pub fn mlp(&mut self, name: &str, width: usize, hidden: usize, act: Activation) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), width, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, width),
            act,
        }
    }

    pub fn block(&mut self, name: &str, width: usize, hidden: usize, act: Activation) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), width),
            attn: self.attention(&format!("{name}.attn"), width),
            ln2: self.norm(&format!("{name}.ln2"), width),
            mlp: self.mlp(&format!("{name}.mlp"), width, hidden, act),
        }
    }

    pub fn cross_block(&mut self, name: &str, width: usize, hidden: usize, act: Activation) -> CrossBlock {
        CrossBlock {
            ln_self: self.norm(&format!("{name}.ln_self"), width),
            self_attn: self.attention(&format!("{name}.self_attn"), width),
            ln_cross: self.norm(&format!("{name}.ln_cross"), width),
            cross_attn: self.attention(&format!("{name}.cross_attn"), width),
            ln_mlp: self.norm(&format!("{name}.ln_mlp"), width),
            mlp: self.mlp(&format!("{name}.mlp"), width, hidden, act),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_bias(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    /// Returns the projected output and the raw attention node (which holds
    /// the probabilities).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        queries: NodeId,
        context: NodeId,
        layout: AttentionLayout,
    ) -> (NodeId, NodeId) {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = g.attention(q, k, v, layout);
        (self.o.forward(g, a), a)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, x);
        let h = match self.act {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        self.fc2.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId, layout: AttentionLayout) -> (NodeId, NodeId) {
        let h = self.ln1.forward(g, x);
        let (a, probs) = self.attn.forward(g, h, h, layout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        (g.add(x, m), probs)
    }
}

/// Text block with self-attention, cross-attention into image states, and a
/// feed-forward layer, each pre-normalised and residual.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln_self: Norm,
    pub self_attn: Attention,
    pub ln_cross: Norm,
    pub cross_attn: Attention,
    pub ln_mlp: Norm,
    pub mlp: Mlp,
}

impl CrossBlock {
    /// Returns the new text states and the cross-attention node.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: NodeId,
        self_layout: AttentionLayout,
        image: NodeId,
        cross_layout: AttentionLayout,
    ) -> (NodeId, NodeId) {
        let h = self.ln_self.forward(g, x);
        let (a, _) = self.self_attn.forward(g, h, h, self_layout);
        let x = g.add(x, a);
        let h = self.ln_cross.forward(g, x);
        let (c, probs) = self.cross_attn.forward(g, h, image, cross_layout);
        let x = g.add(x, c);
        let h = self.ln_mlp.forward(g, x);
        let m = self.mlp.forward(g, h);
        (g.add(x, m), probs)
    }
}
