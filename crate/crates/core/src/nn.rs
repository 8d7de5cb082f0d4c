//! Parameter storage and the layers shared by the encoder, decoder and
//! knowledge side of the model.

use std::cell::RefCell;
use std::collections::HashMap;

use punchline_autograd::{Gradients, Matrix, SoftmaxMask, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which training stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Present in the plain Transformer; learned in pretraining.
    Pretrainable,
    /// Fusion attention, gates and the knowledge encoder.
    KnowledgeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    XavierUniform,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub partition: Partition,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

pub fn initialise(rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Matrix {
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Ones => Matrix::filled(rows, cols, 1.0),
        Init::XavierUniform => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
        }
    }
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        init: Init,
        partition: Partition,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let value = initialise(shape.0, shape.1, init, rng);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, partition, init });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Where an attention distribution was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    EncoderSelf,
    DecoderSelf,
    Cross,
    Fusion,
    Graph,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub layer: usize,
    pub head: usize,
    pub weights: Matrix,
}

/// Intermediate values captured during a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub attention: Vec<AttentionRecord>,
    /// Per decoder block: (S, A, lambda) where the fusion layer ran.
    pub fusion: Vec<FusionRecord>,
}

#[derive(Clone, Debug)]
pub struct FusionRecord {
    pub block: usize,
    pub states: Matrix,
    pub attended: Matrix,
    pub gate: Matrix,
}

/// Nested-row view of a matrix for JSON dumps.
pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Everything a forward pass needs besides the inputs: the tape, the
/// parameters bound onto it, and optional dropout and tracing.
pub struct Ctx<'t, 'a> {
    pub tape: &'t Tape<'a>,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
    trace: Option<RefCell<Trace>>,
    layer_hint: RefCell<usize>,
}

impl<'t, 'a> Ctx<'t, 'a> {
    pub fn new(tape: &'t Tape<'a>, store: &'a ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            dropout: None,
            trace: None,
            layer_hint: RefCell::new(0),
        }
    }

    /// Enables dropout with rate `p` drawn from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, RefCell::new(rng)));
        }
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Trace::default()));
        self
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    /// The tape variable for a parameter, bound on first use.
    pub fn p(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.param(self.store.value(id)))
    }

    pub fn dropout(&self, x: Var) -> Var {
        let Some((p, rng)) = &self.dropout else { return x };
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 - p;
        let mut rng = rng.borrow_mut();
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.tape.constant(Matrix::from_vec(r, c, mask));
        self.tape.mul(x, m)
    }

    pub fn set_layer(&self, layer: usize) {
        *self.layer_hint.borrow_mut() = layer;
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record_attention(&self, site: AttentionSite, head: usize, weights: Var) {
        if let Some(trace) = &self.trace {
            let layer = *self.layer_hint.borrow();
            let weights = self.tape.value(weights).clone();
            trace.borrow_mut().attention.push(AttentionRecord { site, layer, head, weights });
        }
    }

    pub fn record_fusion(&self, block: usize, states: Var, attended: Var, gate: Var) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().fusion.push(FusionRecord {
                block,
                states: self.tape.value(states).clone(),
                attended: self.tape.value(attended).clone(),
                gate: self.tape.value(gate).clone(),
            });
        }
    }

    pub fn take_trace(&self) -> Trace {
        self.trace.as_ref().map(|t| std::mem::take(&mut *t.borrow_mut())).unwrap_or_default()
    }

    /// Per-parameter gradients, `None` where a parameter took no part.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Matrix>> {
        self.bound.borrow().iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        bias: bool,
        partition: Partition,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), (fan_in, fan_out), Init::XavierUniform, partition, rng);
        let bias = bias.then(|| store.add(format!("{name}.b"), (1, fan_out), Init::Zeros, partition, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let t = ctx.tape;
        let y = t.matmul(x, ctx.p(self.weight));
        match self.bias {
            Some(b) => t.add_row(y, ctx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, partition: Partition, rng: &mut ChaCha8Rng) -> Self {
        let gain = store.add(format!("{name}.gain"), (1, dim), Init::Ones, partition, rng);
        let bias = store.add(format!("{name}.bias"), (1, dim), Init::Zeros, partition, rng);
        Self { gain, bias, eps }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), self.eps)
    }
}

/// Scaled dot-product attention with `heads` heads over a shared model width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub site: AttentionSite,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        site: AttentionSite,
        partition: Partition,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "heads must divide the model width");
        let shape = (d_model, d_model);
        Self {
            query: Linear::new(store, &format!("{name}.q"), shape, true, partition, rng),
            key: Linear::new(store, &format!("{name}.k"), shape, true, partition, rng),
            value: Linear::new(store, &format!("{name}.v"), shape, true, partition, rng),
            output: Linear::new(store, &format!("{name}.o"), shape, true, partition, rng),
            heads,
            site,
        }
    }

    /// `MultiHead(queries, keys_values, keys_values)`.
    pub fn forward(&self, ctx: &Ctx, queries: Var, keys_values: Var, mask: SoftmaxMask<'_>) -> Var {
        let t = ctx.tape;
        let q = self.query.forward(ctx, queries);
        let k = self.key.forward(ctx, keys_values);
        let v = self.value.forward(ctx, keys_values);
        let d = t.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b);
            let kh = t.slice_cols(k, a, b);
            let vh = t.slice_cols(v, a, b);
            let scores = t.scale(t.matmul_t(qh, kh), scale);
            let weights = t.softmax(scores, mask);
            ctx.record_attention(self.site, h, weights);
            let weights = ctx.dropout(weights);
            outs.push(t.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.output.forward(ctx, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, partition: Partition, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), (d_model, d_ff), true, partition, rng),
            outer: Linear::new(store, &format!("{name}.outer"), (d_ff, d_model), true, partition, rng),
        }
    }

    pub fn forward(&self, ctx: &Ctx, x: Var) -> Var {
        let h = ctx.tape.relu(self.inner.forward(ctx, x));
        self.outer.forward(ctx, ctx.dropout(h))
    }
}

/// Fixed sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
