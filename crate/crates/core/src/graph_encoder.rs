//! Multi-head graph attention over knowledge-graph nodes.
//!
//! Each node attends over itself and its in-neighbours with unscaled
//! dot-product scores; head outputs pass through the activation and are
//! concatenated, so every layer keeps the model width.

use punchline_autograd::{Matrix, SoftmaxMask, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::nn::{AttentionSite, Ctx, Init, ParamId, ParamStore, Partition};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            Activation::Identity => x,
        }
    }
}

/// Query, key and value projections of one layer; head `m` owns columns
/// `m*d/heads .. (m+1)*d/heads`.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub layers: Vec<GatLayer>,
    pub heads: usize,
    pub activation: Activation,
}

impl GraphEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        layers: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "graph heads must divide the model width");
        let part = Partition::KnowledgeOnly;
        let layers = (0..layers)
            .map(|l| GatLayer {
                query: store.add(format!("{name}.{l}.q"), (d_model, d_model), Init::XavierUniform, part, rng),
                key: store.add(format!("{name}.{l}.k"), (d_model, d_model), Init::XavierUniform, part, rng),
                value: store.add(format!("{name}.{l}.v"), (d_model, d_model), Init::XavierUniform, part, rng),
            })
            .collect();
        Self { layers, heads, activation }
    }

    /// Runs every layer; with zero layers the input comes back unchanged.
    pub fn forward(&self, ctx: &Ctx, features: Var, neighbours: &[Vec<usize>]) -> Var {
        let mut h = features;
        for (l, layer) in self.layers.iter().enumerate() {
            ctx.set_layer(l);
            let w = [ctx.p(layer.query), ctx.p(layer.key), ctx.p(layer.value)];
            h = gat_layer_on_tape(ctx.tape, h, w, self.heads, self.activation, neighbours, Some(ctx));
        }
        h
    }
}

/// Attention weights of each head, `nodes x nodes`, zero off the neighbourhood.
fn head_weights(tape: &Tape, q: Var, k: Var, neighbours: &[Vec<usize>]) -> Var {
    tape.softmax(tape.matmul_t(q, k), SoftmaxMask::Lists(neighbours))
}

fn gat_layer_on_tape(
    tape: &Tape,
    h: Var,
    [wq, wk, wv]: [Var; 3],
    heads: usize,
    activation: Activation,
    neighbours: &[Vec<usize>],
    ctx: Option<&Ctx>,
) -> Var {
    let d = tape.shape(wq).1;
    let dh = d / heads;
    let (q, k, v) = (tape.matmul(h, wq), tape.matmul(h, wk), tape.matmul(h, wv));
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let (a, b) = (m * dh, (m + 1) * dh);
        let alpha = head_weights(tape, tape.slice_cols(q, a, b), tape.slice_cols(k, a, b), neighbours);
        if let Some(ctx) = ctx {
            ctx.record_attention(AttentionSite::Graph, m, alpha);
        }
        outs.push(activation.apply(tape, tape.matmul(alpha, tape.slice_cols(v, a, b))));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    }
}

/// Plain-matrix weights of one layer, for use outside a model.
#[derive(Clone, Debug)]
pub struct GatWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Per-head attention weights of one layer.
pub fn gat_attention(features: &Matrix, weights: &GatWeights, heads: usize, neighbours: &[Vec<usize>]) -> Vec<Matrix> {
    let tape = Tape::new();
    let h = tape.constant(features.clone());
    let (wq, wk) = (tape.constant(weights.query.clone()), tape.constant(weights.key.clone()));
    let (q, k) = (tape.matmul(h, wq), tape.matmul(h, wk));
    let dh = weights.query.cols() / heads;
    (0..heads)
        .map(|m| {
            let (a, b) = (m * dh, (m + 1) * dh);
            let alpha = head_weights(&tape, tape.slice_cols(q, a, b), tape.slice_cols(k, a, b), neighbours);
            tape.value(alpha).clone()
        })
        .collect()
}

/// One layer applied to plain matrices.
pub fn gat_layer(
    features: &Matrix,
    weights: &GatWeights,
    heads: usize,
    activation: Activation,
    neighbours: &[Vec<usize>],
) -> Matrix {
    let tape = Tape::new();
    let h = tape.constant(features.clone());
    let w = [&weights.query, &weights.key, &weights.value].map(|m| tape.constant(m.clone()));
    let out = gat_layer_on_tape(&tape, h, w, heads, activation, neighbours, None);
    let value = tape.value(out).clone();
    value
}

/// A stack of layers applied to plain matrices.
pub fn encode_knowledge(
    features: &Matrix,
    layers: &[GatWeights],
    heads: usize,
    activation: Activation,
    neighbours: &[Vec<usize>],
) -> Matrix {
    layers
        .iter()
        .fold(features.clone(), |h, w| gat_layer(&h, w, heads, activation, neighbours))
}
