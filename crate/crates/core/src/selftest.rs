//! Gradient and invariant checks that run in seconds against freshly
//! initialised networks. Shared by the `selftest` command and the
//! acceptance suite.

use std::collections::BTreeSet;

use punchline_autograd::check::{relative_error, spread_indices};
use punchline_autograd::{Matrix, SoftmaxMask, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::graph_encoder::{Activation, GraphEncoder};
use crate::kgraph::{GraphInput, KnowledgeGraph};
use crate::knowledge::Triple;
use crate::model::{knowledge_gate, Example, ForwardOptions, ModelConfig, ModelKind, Seq2Seq};
use crate::nn::{AttentionSite, Ctx, Init, LayerNorm, MultiHeadAttention, ParamId, ParamStore, Partition};
use crate::tokenizer::{Tokenizer, BOS};
use crate::training::{transplant, TrainConfig, Trainer};
use crate::Result;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const COLLAPSE_TOLERANCE: f64 = 1e-6;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Finite-difference step and the gradient magnitude below which errors
/// are measured absolutely. Round-off in a desk-model loss puts about
/// 1e-10 of noise on each difference, so relative error is only
/// meaningful well above that.
const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed deviation.
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    fn below(name: &str, measured: f64, bound: f64, detail: String) -> Self {
        Self { name: name.into(), passed: measured < bound, measured, bound, detail }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: {:.3e} (bound {:.0e}) {}", self.name, self.measured, self.bound, self.detail)
    }
}

/// Vocabulary used by the synthetic checks.
const WORDS: [&str; 24] = [
    "Donald Trump", "President", "position held", "Cocaine", "drug", "instance of", "Birth control", "family planning",
    "subclass of", "Paris", "France", "capital of", "lawyer", "occupation", "doctor", "penguin", "bird", "has part",
    "coffee", "beverage", "Monday", "weekday", "cat", "pet",
];

pub fn synthetic_tokenizer() -> Tokenizer {
    Tokenizer::train(WORDS.iter().copied(), 400)
}

pub fn random_triples(rng: &mut ChaCha8Rng, max: usize) -> Vec<Triple> {
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng| WORDS[rng.gen_range(0..WORDS.len())];
            Triple::new(pick(rng), pick(rng), pick(rng))
        })
        .collect()
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Outcome of comparing back-propagated and central-difference gradients.
struct GradientProbe {
    worst: f64,
    compared: usize,
    /// Probes whose `x ± h` straddles a rectifier kink. The central
    /// difference is meaningless there, so they are left out of `worst`.
    skipped: usize,
    /// Tensors where every candidate entry sat at a kink.
    uncovered: usize,
}

impl GradientProbe {
    fn check(&self, name: &str, detail: String) -> Check {
        let detail = format!("{detail}, {} probes, {} skipped at kinks", self.compared, self.skipped);
        let mut check = Check::below(name, self.worst, GRADIENT_TOLERANCE, detail);
        check.passed &= self.uncovered == 0;
        check
    }
}

/// Compares gradients on `per_tensor` kink-free entries of every listed
/// parameter, drawing extra candidates when some straddle a kink.
fn parameter_gradient_error(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    loss: impl Fn(&Ctx) -> Var,
) -> GradientProbe {
    let (analytic, pattern) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let out = loss(&ctx);
        let pattern = tape.rectifier_pattern();
        let mut grads = tape.backward(out);
        (ctx.param_grads(&mut grads), pattern)
    };
    let mut result = GradientProbe { worst: 0.0, compared: 0, skipped: 0, uncovered: 0 };
    for &id in ids {
        let value = store.value(id).clone();
        let grad = analytic[id.index()].clone().unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
        let mut candidates = spread_indices(value.len(), per_tensor);
        for i in spread_indices(value.len(), 4 * per_tensor) {
            if !candidates.contains(&i) {
                candidates.push(i);
            }
        }
        let mut compared = 0;
        for i in candidates {
            if compared == per_tensor {
                break;
            }
            let mut eval = |shift: f64| {
                let mut probe = value.clone();
                probe.data_mut()[i] += shift;
                *store.value_mut(id) = probe;
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, store);
                let out = loss(&ctx);
                (tape.item(out), tape.rectifier_pattern() == pattern)
            };
            let (up, same_up) = eval(FD_STEP);
            let (down, same_down) = eval(-FD_STEP);
            if !(same_up && same_down) {
                result.skipped += 1;
                continue;
            }
            compared += 1;
            let numeric = (up - down) / (2.0 * FD_STEP);
            result.worst = result.worst.max(relative_error(grad.data()[i], numeric, FD_FLOOR));
        }
        result.compared += compared;
        result.uncovered += usize::from(compared == 0);
        *store.value_mut(id) = value;
    }
    result
}

/// Registers an input as a parameter so its gradient is checked too.
fn input(store: &mut ParamStore, name: &str, value: Matrix) -> ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let id = store.add(name, value.shape(), Init::Zeros, Partition::Pretrainable, &mut rng);
    *store.value_mut(id) = value;
    id
}

fn weighted_sum(ctx: &Ctx, x: Var, weights: &Matrix) -> Var {
    let t = ctx.tape;
    t.sum(t.mul(x, t.constant(weights.clone())))
}

/// Two-layer graph attention on a six-node graph, inputs included.
pub fn gat_gradients(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    // Two entities linked both ways: 2 entity + 4 relation nodes.
    let graph = KnowledgeGraph::build(&[Triple::new("A", "likes", "B"), Triple::new("B", "knows", "A")]);
    assert_eq!(graph.nodes.len(), 6);
    let neighbours = graph.in_neighbourhoods();
    let mut store = ParamStore::default();
    let features = input(&mut store, "features", random_matrix(&mut rng, 6, d));
    let encoder = GraphEncoder::new(&mut store, "gat", d, 2, 2, Activation::LeakyRelu(0.2), &mut rng);
    let weights = random_matrix(&mut rng, 6, d);
    let ids: Vec<ParamId> = store.ids().collect();
    let probe = parameter_gradient_error(&mut store, &ids, 12, |ctx| {
        let out = encoder.forward(ctx, ctx.p(features), &neighbours);
        weighted_sum(ctx, out, &weights)
    });
    probe.check("gradients/graph-attention", "6 nodes".into())
}

/// Fusion attention, gate and the normalisation after it.
pub fn fusion_gradients(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads, steps, nodes) = (8, 2, 5, 7);
    let mut store = ParamStore::default();
    let states = input(&mut store, "states", random_matrix(&mut rng, steps, d));
    let knowledge = input(&mut store, "nodes", random_matrix(&mut rng, nodes, d));
    let ko = Partition::KnowledgeOnly;
    let attention = MultiHeadAttention::new(&mut store, "attn", d, heads, AttentionSite::Fusion, ko, &mut rng);
    let gate = store.add("gate", (d, d), Init::XavierUniform, ko, &mut rng);
    let norm = LayerNorm::new(&mut store, "ln", d, 1e-5, ko, &mut rng);
    let weights = random_matrix(&mut rng, steps, d);
    let ids: Vec<ParamId> = store.ids().collect();
    let probe = parameter_gradient_error(&mut store, &ids, 12, |ctx| {
        let s = ctx.p(states);
        let attended = attention.forward(ctx, s, ctx.p(knowledge), SoftmaxMask::Full);
        let (gated, _) = knowledge_gate(ctx.tape, s, attended, ctx.p(gate));
        let out = norm.forward(ctx, gated);
        weighted_sum(ctx, out, &weights)
    });
    probe.check("gradients/fusion-gate", "attention and gate".into())
}

/// Teacher-forced loss of the fused desk model, every tensor probed.
pub fn model_gradients(seed: u64) -> Result<Check> {
    let tok = synthetic_tokenizer();
    let config = ModelConfig { vocab_size: tok.vocab_size(), dropout: 0.0, ..ModelConfig::desk() };
    let mut model = Seq2Seq::new(config, ModelKind::Fused, seed)?;
    let triples = [Triple::new("Cocaine", "instance of", "drug"), Triple::new("Donald Trump", "position held", "President")];
    let example = Example {
        source: tok.encode("Donald Trump tried cocaine on a Monday"),
        target: tok.encode("President drug"),
        graph: GraphInput::new(&KnowledgeGraph::build(&triples), &tok)?,
    };
    let ids: Vec<ParamId> = model.store.ids().collect();
    let shape = model.clone();
    let opts = ForwardOptions::default();
    let probe = parameter_gradient_error(&mut model.store, &ids, 3, |ctx| {
        shape.loss(ctx, &example, opts).expect("example fits the model").0
    });
    Ok(probe.check("gradients/desk-model", format!("{} tensors", ids.len())))
}

/// A few optimizer steps on synthetic pairs so the weights are no longer
/// at their initial values.
pub fn briefly_trained_plain(config: ModelConfig, seed: u64, steps: u64) -> Result<Seq2Seq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let data: Vec<Example> = (0..8)
        .map(|_| {
            let n = rng.gen_range(3..10);
            let source = random_tokens(&mut rng, n, config.vocab_size);
            let target = random_tokens(&mut rng, n / 2 + 1, config.vocab_size);
            Example { source, target, graph: None }
        })
        .collect();
    let model = Seq2Seq::new(config, ModelKind::Plain, seed)?;
    let train = TrainConfig { batch_size: 4, max_steps: Some(steps), seed, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, train)?;
    for _ in 0..steps {
        trainer.train_step(&data)?;
    }
    Ok(trainer.model)
}

/// With every gate forced to 1 the transplanted fused model must give the
/// plain model's next-token distributions.
pub fn collapse(seed: u64, cases: usize) -> Result<Check> {
    let tok = synthetic_tokenizer();
    let config = ModelConfig { vocab_size: tok.vocab_size(), ..ModelConfig::desk() };
    let plain = briefly_trained_plain(config.clone(), seed, 5)?;
    let fused = transplant(&plain, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forced = ForwardOptions { force_lambda_one: true };
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(1..=24);
        let source = random_tokens(&mut rng, n, config.vocab_size);
        let mut prefix = vec![BOS];
        let m = rng.gen_range(0..16);
        prefix.extend(random_tokens(&mut rng, m, config.vocab_size));
        let graph = GraphInput::new(&KnowledgeGraph::build(&random_triples(&mut rng, 6)), &tok)?;
        let want = plain.distributions(&source, None, &prefix, ForwardOptions::default())?;
        let got = fused.distributions(&source, graph.as_ref(), &prefix, forced)?;
        worst = worst.max(got.max_abs_diff(&want));
    }
    Ok(Check::below("collapse", worst, COLLAPSE_TOLERANCE, format!("{cases} prefixes")))
}

/// Every attention distribution of the fused model sums to one per row.
pub fn attention_rows(seed: u64, cases: usize) -> Result<Check> {
    let tok = synthetic_tokenizer();
    let config = ModelConfig { vocab_size: tok.vocab_size(), ..ModelConfig::desk() };
    let model = Seq2Seq::new(config.clone(), ModelKind::Fused, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    let mut sites = BTreeSet::new();
    for _ in 0..cases {
        let n = rng.gen_range(1..=20);
        let source = random_tokens(&mut rng, n, config.vocab_size);
        let mut prefix = vec![BOS];
        let m = rng.gen_range(0..12);
        prefix.extend(random_tokens(&mut rng, m, config.vocab_size));
        let graph = GraphInput::new(&KnowledgeGraph::build(&random_triples(&mut rng, 8)), &tok)?;
        let trace = model.trace(&source, graph.as_ref(), &prefix, ForwardOptions::default())?;
        for rec in &trace.attention {
            sites.insert(format!("{:?}", rec.site));
            for r in 0..rec.weights.rows() {
                let row = rec.weights.row(r);
                let bad = row.iter().any(|w| !(0.0..=1.0).contains(w));
                let dev = (row.iter().sum::<f64>() - 1.0).abs();
                worst = worst.max(if bad { f64::INFINITY } else { dev });
                rows += 1;
            }
        }
    }
    let mut check = Check::below("attention-rows", worst, ROW_SUM_TOLERANCE, format!("{rows} rows"));
    if sites.len() < 5 {
        check.passed = false;
        check.detail = format!("only saw sites {sites:?}");
    }
    Ok(check)
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        gat_gradients(seed),
        fusion_gradients(seed),
        model_gradients(seed)?,
        collapse(seed, 100)?,
        attention_rows(seed, 20)?,
    ])
}
