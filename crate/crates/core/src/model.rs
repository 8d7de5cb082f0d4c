//! The encoder-decoder network, with an optional knowledge fusion sub-layer
//! in every decoder block.

use punchline_autograd::{log_softmax, softmax_rows, Matrix, SoftmaxMask, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::JokeRecord;
use crate::graph_encoder::{Activation, GraphEncoder};
use crate::kgraph::{GraphInput, KnowledgeGraph, NodeInitializer};
use crate::nn::{
    sinusoidal_positions, AttentionSite, Ctx, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamId, ParamStore,
    Partition, Trace,
};
use crate::tokenizer::{Tokenizer, BOS, EOS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the trained tokenizer.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub gat_slope: f64,
    pub dropout: f64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 256,
            gat_layers: 2,
            gat_heads: 4,
            gat_slope: 0.2,
            dropout: 0.1,
            max_src_len: 128,
            max_tgt_len: 64,
            ln_eps: 1e-5,
        }
    }

    pub fn paper() -> Self {
        Self { d_model: 512, n_blocks: 4, n_heads: 8, d_ff: 2048, gat_heads: 8, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("gat_heads", self.gat_heads),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.d_model % self.gat_heads != 0 {
            return Err(Error::Config(format!("gat_heads {} does not divide d_model {}", self.gat_heads, self.d_model)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder-decoder without any knowledge path.
    Plain,
    /// Adds the graph encoder and a fusion sub-layer per decoder block.
    Fused,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Bypass every fusion sub-layer, as if each gate were saturated at 1.
    pub force_lambda_one: bool,
}

/// One training or decoding instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub graph: Option<GraphInput>,
}

impl Example {
    /// Tokenizes a record, truncating the set-up to `max_src_len` and the
    /// punchline so that it plus EOS fits in `max_tgt_len`.
    pub fn from_record(record: &JokeRecord, tokenizer: &Tokenizer, config: &ModelConfig) -> Result<Self> {
        let mut source = tokenizer.encode(&record.setup);
        source.truncate(config.max_src_len);
        let mut target = tokenizer.encode(&record.punchline);
        target.truncate(config.max_tgt_len.saturating_sub(1));
        let graph = GraphInput::new(&KnowledgeGraph::build(&record.triples), tokenizer)?;
        Ok(Self { source, target, graph })
    }

    pub fn decoder_input(&self) -> Vec<u32> {
        std::iter::once(BOS).chain(self.target.iter().copied()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.target.iter().chain(std::iter::once(&EOS)).map(|&t| t as usize).collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Attention from decoder states to graph nodes, the gate matrix, and the
/// normalisation applied to the gated output.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub attention: MultiHeadAttention,
    pub gate: ParamId,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attention: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm2: LayerNorm,
    fusion: Option<FusionLayer>,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
struct KnowledgeEncoder {
    nodes: NodeInitializer,
    graph: GraphEncoder,
}

/// Set-up memory and encoded graph nodes, reused across decoding steps.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub memory: Matrix,
    pub knowledge: Option<Matrix>,
    pub options: ForwardOptions,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub store: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: ParamId,
    knowledge: Option<KnowledgeEncoder>,
    positions: Matrix,
}

/// `lambda = sigmoid(states W_g)` and `A + lambda * (S - A)`, which is
/// `lambda S + (1 - lambda) A`. Returns (gated, lambda).
pub fn knowledge_gate(tape: &Tape, states: Var, attended: Var, gate: Var) -> (Var, Var) {
    let lambda = tape.sigmoid(tape.matmul(states, gate));
    let gated = tape.add(attended, tape.mul(lambda, tape.sub(states, attended)));
    (gated, lambda)
}

impl Seq2Seq {
    /// Pretrainable parameters are created first and in the same order for
    /// both kinds, so equal seeds give equal shared weights.
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, v, eps) = (config.d_model, config.vocab_size, config.ln_eps);
        let pre = Partition::Pretrainable;
        let rng = &mut rng;
        let embedding = store.add("embed.tokens", (v, d), Init::XavierUniform, pre, rng);
        let encoder = (0..config.n_blocks)
            .map(|i| {
                let n = format!("encoder.{i}");
                EncoderBlock {
                    attention: MultiHeadAttention::new(&mut store, &format!("{n}.self_attn"), d, config.n_heads, AttentionSite::EncoderSelf, pre, rng),
                    norm1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d, eps, pre, rng),
                    ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.d_ff, pre, rng),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d, eps, pre, rng),
                }
            })
            .collect();
        let mut decoder: Vec<DecoderBlock> = (0..config.n_blocks)
            .map(|i| {
                let n = format!("decoder.{i}");
                DecoderBlock {
                    self_attention: MultiHeadAttention::new(&mut store, &format!("{n}.self_attn"), d, config.n_heads, AttentionSite::DecoderSelf, pre, rng),
                    norm1: LayerNorm::new(&mut store, &format!("{n}.ln1"), d, eps, pre, rng),
                    cross_attention: MultiHeadAttention::new(&mut store, &format!("{n}.cross_attn"), d, config.n_heads, AttentionSite::Cross, pre, rng),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.ln2"), d, eps, pre, rng),
                    fusion: None,
                    ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.d_ff, pre, rng),
                    norm3: LayerNorm::new(&mut store, &format!("{n}.ln3"), d, eps, pre, rng),
                }
            })
            .collect();
        let output = store.add("output.w", (v, d), Init::XavierUniform, pre, rng);

        let mut knowledge = None;
        if kind == ModelKind::Fused {
            let ko = Partition::KnowledgeOnly;
            for (i, block) in decoder.iter_mut().enumerate() {
                let n = format!("decoder.{i}.fusion");
                block.fusion = Some(FusionLayer {
                    attention: MultiHeadAttention::new(&mut store, &format!("{n}.attn"), d, config.n_heads, AttentionSite::Fusion, ko, rng),
                    gate: store.add(format!("{n}.gate"), (d, d), Init::XavierUniform, ko, rng),
                    norm: LayerNorm::new(&mut store, &format!("{n}.ln"), d, eps, ko, rng),
                });
            }
            knowledge = Some(KnowledgeEncoder {
                nodes: NodeInitializer::new(&mut store, "knowledge.node_init", v, d, rng),
                graph: GraphEncoder::new(
                    &mut store,
                    "knowledge.gat",
                    d,
                    config.gat_heads,
                    config.gat_layers,
                    Activation::LeakyRelu(config.gat_slope),
                    rng,
                ),
            });
        }
        let positions = sinusoidal_positions(config.max_src_len.max(config.max_tgt_len), d);
        Ok(Self { config, kind, store, embedding, encoder, decoder, output, knowledge, positions })
    }

    pub fn fusion_layers(&self) -> impl Iterator<Item = &FusionLayer> {
        self.decoder.iter().filter_map(|b| b.fusion.as_ref())
    }

    pub fn output_projection(&self) -> ParamId {
        self.output
    }

    fn embed(&self, ctx: &Ctx, tokens: &[u32]) -> Var {
        let t = ctx.tape;
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let scaled = t.scale(t.gather_rows(ctx.p(self.embedding), &ids), (self.config.d_model as f64).sqrt());
        let mut pos = Matrix::zeros(tokens.len(), self.config.d_model);
        for r in 0..tokens.len() {
            pos.row_mut(r).copy_from_slice(self.positions.row(r));
        }
        ctx.dropout(t.add(scaled, t.constant(pos)))
    }

    fn check_tokens(&self, tokens: &[u32], max: usize) -> Result<()> {
        if tokens.is_empty() || tokens.len() > max {
            return Err(Error::Length { len: tokens.len(), max });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(format!("token id {bad}")));
        }
        Ok(())
    }

    /// Encoder memory for a set-up, `len x d`.
    pub fn encode_setup(&self, ctx: &Ctx, source: &[u32]) -> Result<Var> {
        self.check_tokens(source, self.config.max_src_len)?;
        let t = ctx.tape;
        let mut x = self.embed(ctx, source);
        for (i, block) in self.encoder.iter().enumerate() {
            ctx.set_layer(i);
            let a = block.attention.forward(ctx, x, x, SoftmaxMask::Full);
            x = block.norm1.forward(ctx, t.add(x, ctx.dropout(a)));
            let f = block.ffn.forward(ctx, x);
            x = block.norm2.forward(ctx, t.add(x, ctx.dropout(f)));
        }
        Ok(x)
    }

    /// Encoded graph nodes; `None` for the plain kind or an empty graph.
    pub fn encode_knowledge(&self, ctx: &Ctx, graph: Option<&GraphInput>) -> Option<Var> {
        let (k, g) = (self.knowledge.as_ref()?, graph?);
        let h0 = k.nodes.node_features(ctx, g);
        Some(k.graph.forward(ctx, h0, &g.neighbours))
    }

    /// Logits for every prefix position, `len x vocab`.
    pub fn decode(
        &self,
        ctx: &Ctx,
        memory: Var,
        knowledge: Option<Var>,
        prefix: &[u32],
        options: ForwardOptions,
    ) -> Result<Var> {
        self.check_tokens(prefix, self.config.max_tgt_len)?;
        let t = ctx.tape;
        let mut x = self.embed(ctx, prefix);
        for (i, block) in self.decoder.iter().enumerate() {
            ctx.set_layer(i);
            let a = block.self_attention.forward(ctx, x, x, SoftmaxMask::Causal { offset: 0 });
            x = block.norm1.forward(ctx, t.add(x, ctx.dropout(a)));
            let c = block.cross_attention.forward(ctx, x, memory, SoftmaxMask::Full);
            x = block.norm2.forward(ctx, t.add(x, ctx.dropout(c)));
            if let (Some(fusion), Some(nodes), false) = (&block.fusion, knowledge, options.force_lambda_one) {
                let attended = ctx.dropout(fusion.attention.forward(ctx, x, nodes, SoftmaxMask::Full));
                let (gated, lambda) = knowledge_gate(t, x, attended, ctx.p(fusion.gate));
                ctx.record_fusion(i, x, attended, lambda);
                x = fusion.norm.forward(ctx, gated);
            }
            let f = block.ffn.forward(ctx, x);
            x = block.norm3.forward(ctx, t.add(x, ctx.dropout(f)));
        }
        Ok(t.matmul_t(x, ctx.p(self.output)))
    }

    /// Summed token cross-entropy of an example and its token count.
    pub fn loss(&self, ctx: &Ctx, example: &Example, options: ForwardOptions) -> Result<(Var, usize)> {
        let memory = self.encode_setup(ctx, &example.source)?;
        let knowledge = self.encode_knowledge(ctx, example.graph.as_ref());
        let logits = self.decode(ctx, memory, knowledge, &example.decoder_input(), options)?;
        let labels = example.labels();
        Ok((ctx.tape.cross_entropy(logits, &labels), labels.len()))
    }

    pub fn prepare(&self, source: &[u32], graph: Option<&GraphInput>, options: ForwardOptions) -> Result<Prepared> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let memory = self.encode_setup(&ctx, source)?;
        let knowledge = if options.force_lambda_one { None } else { self.encode_knowledge(&ctx, graph) };
        let memory = tape.value(memory).clone();
        let knowledge = knowledge.map(|k| tape.value(k).clone());
        Ok(Prepared { memory, knowledge, options })
    }

    fn logits_prepared(&self, ctx: &Ctx, prepared: &Prepared, prefix: &[u32]) -> Result<Var> {
        let t = ctx.tape;
        let memory = t.constant(prepared.memory.clone());
        let knowledge = prepared.knowledge.as_ref().map(|k| t.constant(k.clone()));
        self.decode(ctx, memory, knowledge, prefix, prepared.options)
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next_log_probs(&self, prepared: &Prepared, prefix: &[u32]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let logits = self.logits_prepared(&ctx, prepared, prefix)?;
        let value = tape.value(logits);
        Ok(log_softmax(value.row(value.rows() - 1)))
    }

    /// Next-token distributions at every prefix position, `len x vocab`.
    pub fn distributions(
        &self,
        source: &[u32],
        graph: Option<&GraphInput>,
        prefix: &[u32],
        options: ForwardOptions,
    ) -> Result<Matrix> {
        let prepared = self.prepare(source, graph, options)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let logits = self.logits_prepared(&ctx, &prepared, prefix)?;
        let probs = softmax_rows(&tape.value(logits), SoftmaxMask::Full);
        Ok(probs)
    }

    /// Attention weights and fusion states of one full forward pass.
    pub fn trace(
        &self,
        source: &[u32],
        graph: Option<&GraphInput>,
        prefix: &[u32],
        options: ForwardOptions,
    ) -> Result<Trace> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store).with_trace();
        let memory = self.encode_setup(&ctx, source)?;
        let knowledge = if options.force_lambda_one { None } else { self.encode_knowledge(&ctx, graph) };
        self.decode(&ctx, memory, knowledge, prefix, options)?;
        Ok(ctx.take_trace())
    }

    /// Copies every pretrainable tensor of `source` by name. Returns the
    /// number of tensors copied.
    pub fn transplant_from(&mut self, source: &Seq2Seq) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let param = self.store.param(id);
            if param.partition != Partition::Pretrainable {
                continue;
            }
            let name = param.name.clone();
            let src = source
                .store
                .by_name(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("source lacks tensor {name}")))?;
            let value = source.store.value(src);
            if value.shape() != self.store.value(id).shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {name}: shape {:?} vs {:?}",
                    value.shape(),
                    self.store.value(id).shape()
                )));
            }
            *self.store.value_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
