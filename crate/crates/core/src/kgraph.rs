//! Knowledge graphs built from triple sets, and the recurrent encoder that
//! gives every node its initial feature vector.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use punchline_autograd::{Matrix, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::knowledge::Triple;
use crate::nn::{Ctx, Init, ParamId, ParamStore, Partition};
use crate::tokenizer::{Tokenizer, PAD, REVERSE};
use crate::{Error, Result};

pub const REVERSE_PREFIX: &str = "<r>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entity,
    Relation,
    ReverseRelation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub label: String,
}

/// Directed graph over entity, relation and reverse-relation nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<(usize, usize)>,
}

impl KnowledgeGraph {
    /// Folds entities with identical trimmed labels into one node; every
    /// triple adds its own relation node `r` and reverse node `<r>r`, wired
    /// `s -> r -> o` and `o -> <r>r -> s`. Ids follow first appearance.
    pub fn build(triples: &[Triple]) -> Self {
        let mut g = KnowledgeGraph::default();
        let mut entities: HashMap<String, usize> = HashMap::new();
        let mut entity = |g: &mut KnowledgeGraph, label: &str| -> usize {
            let label = label.trim();
            *entities.entry(label.to_string()).or_insert_with(|| g.push(NodeKind::Entity, label.to_string()))
        };
        for t in triples {
            let s = entity(&mut g, &t.subject);
            let r = g.push(NodeKind::Relation, t.relation.trim().to_string());
            let rr = g.push(NodeKind::ReverseRelation, format!("{REVERSE_PREFIX}{}", t.relation.trim()));
            let o = entity(&mut g, &t.object);
            g.edges.extend([(s, r), (r, o), (o, rr), (rr, s)]);
        }
        g
    }

    fn push(&mut self, kind: NodeKind, label: String) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node { id, kind, label });
        id
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// For each node, itself plus every node with an edge into it, sorted.
    pub fn in_neighbourhoods(&self) -> Vec<Vec<usize>> {
        let mut n: Vec<Vec<usize>> = (0..self.nodes.len()).map(|i| vec![i]).collect();
        for &(src, dst) in &self.edges {
            n[dst].push(src);
        }
        for list in &mut n {
            list.sort_unstable();
            list.dedup();
        }
        n
    }

    pub fn is_weakly_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Graphviz rendering: entities red, relations blue, reverse relations green.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph knowledge {\n  node [shape=box, style=rounded];\n");
        for n in &self.nodes {
            let colour = match n.kind {
                NodeKind::Entity => "red",
                NodeKind::Relation => "blue",
                NodeKind::ReverseRelation => "green",
            };
            let label = n.label.replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(out, "  n{} [label=\"{label}\", color={colour}];", n.id);
        }
        for (a, b) in &self.edges {
            let _ = writeln!(out, "  n{a} -> n{b};");
        }
        out.push_str("}\n");
        out
    }
}

/// Token sequence that feeds a node's label to the recurrent encoder.
pub fn node_tokens(node: &Node, tokenizer: &Tokenizer) -> Result<Vec<u32>> {
    let tokens = match node.kind {
        NodeKind::ReverseRelation => {
            let base = node.label.strip_prefix(REVERSE_PREFIX).unwrap_or(&node.label);
            let mut t = vec![REVERSE];
            t.extend(tokenizer.encode(base));
            t
        }
        _ => tokenizer.encode(&node.label),
    };
    if tokens.is_empty() || (node.kind == NodeKind::ReverseRelation && tokens.len() == 1 && node.label.len() > REVERSE_PREFIX.len()) {
        return Err(Error::UnknownToken(node.label.clone()));
    }
    Ok(tokens)
}

/// Model-side view of a graph: distinct label token sequences, the label
/// used by each node, and attention neighbourhoods.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphInput {
    pub labels: Vec<Vec<u32>>,
    pub node_label: Vec<usize>,
    pub neighbours: Vec<Vec<usize>>,
}

impl GraphInput {
    pub fn new(graph: &KnowledgeGraph, tokenizer: &Tokenizer) -> Result<Option<Self>> {
        if graph.is_empty() {
            return Ok(None);
        }
        let mut labels: Vec<Vec<u32>> = Vec::new();
        let mut seen: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut node_label = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let toks = node_tokens(node, tokenizer)?;
            let idx = *seen.entry(toks.clone()).or_insert_with(|| {
                labels.push(toks);
                labels.len() - 1
            });
            node_label.push(idx);
        }
        Ok(Some(Self { labels, node_label, neighbours: graph.in_neighbourhoods() }))
    }

    pub fn num_nodes(&self) -> usize {
        self.node_label.len()
    }
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

impl LstmParams {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let part = Partition::KnowledgeOnly;
        Self {
            input: store.add(format!("{name}.wx"), (d_in, 4 * hidden), Init::XavierUniform, part, rng),
            recurrent: store.add(format!("{name}.wh"), (hidden, 4 * hidden), Init::XavierUniform, part, rng),
            bias: store.add(format!("{name}.b"), (1, 4 * hidden), Init::Zeros, part, rng),
        }
    }
}

/// Bidirectional LSTM over label tokens; the last forward and last backward
/// hidden states are concatenated and projected to the model width.
/// Gate layout along the 4h axis is (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct NodeInitializer {
    pub embedding: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub projection: ParamId,
    pub hidden: usize,
}

impl NodeInitializer {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d_model % 2 == 0, "model width must be even for the bidirectional encoder");
        let hidden = d_model / 2;
        let part = Partition::KnowledgeOnly;
        let embedding = store.add(format!("{name}.embed"), (vocab, d_model), Init::XavierUniform, part, rng);
        let forward = LstmParams::new(store, &format!("{name}.fwd"), d_model, hidden, rng);
        let backward = LstmParams::new(store, &format!("{name}.bwd"), d_model, hidden, rng);
        let projection = store.add(format!("{name}.proj"), (2 * hidden, d_model), Init::XavierUniform, part, rng);
        Self { embedding, forward, backward, projection, hidden }
    }

    /// Final hidden state of every sequence, run as one masked batch.
    fn run(&self, ctx: &Ctx, lstm: &LstmParams, seqs: &[Vec<u32>]) -> Var {
        let t = ctx.tape;
        let (u, h) = (seqs.len(), self.hidden);
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut hs = t.constant(Matrix::zeros(u, h));
        let mut cs = t.constant(Matrix::zeros(u, h));
        let (wx, wh, b) = (ctx.p(lstm.input), ctx.p(lstm.recurrent), ctx.p(lstm.bias));
        let emb = ctx.p(self.embedding);
        for step in 0..max_len {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(step).copied().unwrap_or(PAD) as usize).collect();
            let x = t.gather_rows(emb, &ids);
            let z = t.add_row(t.add(t.matmul(x, wx), t.matmul(hs, wh)), b);
            let i = t.sigmoid(t.slice_cols(z, 0, h));
            let f = t.sigmoid(t.slice_cols(z, h, 2 * h));
            let g = t.tanh(t.slice_cols(z, 2 * h, 3 * h));
            let o = t.sigmoid(t.slice_cols(z, 3 * h, 4 * h));
            let c_new = t.add(t.mul(f, cs), t.mul(i, g));
            let h_new = t.mul(o, t.tanh(c_new));
            let active: Vec<bool> = seqs.iter().map(|s| step < s.len()).collect();
            if active.iter().all(|&a| a) {
                hs = h_new;
                cs = c_new;
            } else {
                let keep = |on: bool| {
                    let data = active.iter().flat_map(|&a| std::iter::repeat(if a == on { 1.0 } else { 0.0 }).take(h)).collect();
                    t.constant(Matrix::from_vec(u, h, data))
                };
                let (m_new, m_old) = (keep(true), keep(false));
                hs = t.add(t.mul(h_new, m_new), t.mul(hs, m_old));
                cs = t.add(t.mul(c_new, m_new), t.mul(cs, m_old));
            }
        }
        hs
    }

    /// Feature rows for the distinct labels of a graph, `labels x d`.
    pub fn label_features(&self, ctx: &Ctx, labels: &[Vec<u32>]) -> Var {
        let t = ctx.tape;
        let fwd = self.run(ctx, &self.forward, labels);
        let reversed: Vec<Vec<u32>> = labels.iter().map(|l| l.iter().rev().copied().collect()).collect();
        let bwd = self.run(ctx, &self.backward, &reversed);
        t.matmul(t.concat_cols(&[fwd, bwd]), ctx.p(self.projection))
    }

    /// H0: one row per node.
    pub fn node_features(&self, ctx: &Ctx, graph: &GraphInput) -> Var {
        let per_label = self.label_features(ctx, &graph.labels);
        ctx.tape.gather_rows(per_label, &graph.node_label)
    }
}

/// Initial node features of a graph, outside any training step.
pub fn init_node_features(
    graph: &KnowledgeGraph,
    initializer: &NodeInitializer,
    store: &ParamStore,
    tokenizer: &Tokenizer,
) -> Result<Matrix> {
    let Some(input) = GraphInput::new(graph, tokenizer)? else {
        return Ok(Matrix::zeros(0, store.value(initializer.projection).cols()));
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let h0 = initializer.node_features(&ctx, &input);
    let out = tape.value(h0).clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use punchline_autograd::sigmoid;
    use rand::SeedableRng;

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o)
    }

    #[test]
    fn single_triple() {
        let g = KnowledgeGraph::build(&[t("A", "r1", "B")]);
        let labels: Vec<_> = g.nodes.iter().map(|n| n.label.as_str()).collect();
        assert_eq!(labels, ["A", "r1", "<r>r1", "B"]);
        assert_eq!(g.edges, vec![(0, 1), (1, 3), (3, 2), (2, 0)]);
    }

    #[test]
    fn shared_subject_folds() {
        let g = KnowledgeGraph::build(&[t("A", "r1", "B"), t(" A ", "r2", "C")]);
        assert_eq!(g.nodes.len(), 7);
        assert_eq!(g.edges.len(), 8);
        assert_eq!(g.nodes.iter().filter(|n| n.label == "A").count(), 1);
        assert!(g.is_weakly_connected());
        for n in &g.nodes {
            if n.kind != NodeKind::Entity {
                assert_eq!(g.edges.iter().filter(|e| e.0 == n.id).count(), 1);
                assert_eq!(g.edges.iter().filter(|e| e.1 == n.id).count(), 1);
            }
        }
    }

    #[test]
    fn disjoint_triples_give_disconnected_graph() {
        let g = KnowledgeGraph::build(&[t("A", "r", "B"), t("C", "r", "D")]);
        assert!(!g.is_weakly_connected());
    }

    #[test]
    fn neighbourhoods_are_in_edges_plus_self() {
        let g = KnowledgeGraph::build(&[t("A", "r1", "B")]);
        let n = g.in_neighbourhoods();
        assert_eq!(n[0], vec![0, 2]); // A <- <r>r1
        assert_eq!(n[1], vec![0, 1]); // r1 <- A
        assert_eq!(n[3], vec![1, 3]); // B <- r1
    }

    #[test]
    fn dot_export_colours_by_kind() {
        let dot = KnowledgeGraph::build(&[t("A", "r1", "B")]).to_dot();
        assert!(dot.contains("label=\"A\", color=red"));
        assert!(dot.contains("label=\"r1\", color=blue"));
        assert!(dot.contains("label=\"<r>r1\", color=green"));
        assert!(dot.contains("n0 -> n1;"));
    }

    #[test]
    fn reverse_nodes_start_with_the_reserved_token() {
        let tok = Tokenizer::default();
        let g = KnowledgeGraph::build(&[t("A", "part of", "B")]);
        let toks = node_tokens(&g.nodes[2], &tok).unwrap();
        assert_eq!(toks[0], REVERSE);
        assert_eq!(&toks[1..], tok.encode("part of").as_slice());
    }

    fn setup(d: usize, seed: u64) -> (ParamStore, NodeInitializer, Tokenizer) {
        let tok = Tokenizer::train(["President of the United States"].iter().copied(), 270);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let init = NodeInitializer::new(&mut store, "k", tok.vocab_size(), d, &mut rng);
        // Non-zero biases exercise the bias path in the oracle.
        for p in [init.forward.bias, init.backward.bias] {
            let m = store.value_mut(p);
            for (i, v) in m.data_mut().iter_mut().enumerate() {
                *v = 0.1 * (i as f64 + 1.0).sin();
            }
        }
        (store, init, tok)
    }

    /// Scalar loop LSTM, independent of the batched tape version.
    fn lstm_trace(store: &ParamStore, p: &LstmParams, emb: &Matrix, tokens: &[u32], h: usize) -> Vec<f64> {
        let (wx, wh, b) = (store.value(p.input), store.value(p.recurrent), store.value(p.bias));
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        for &tok in tokens {
            let x = emb.row(tok as usize);
            let mut z = vec![0.0; 4 * h];
            for (k, zk) in z.iter_mut().enumerate() {
                let mut acc = b.get(0, k);
                for (j, xj) in x.iter().enumerate() {
                    acc += xj * wx.get(j, k);
                }
                for (j, hj) in hs.iter().enumerate() {
                    acc += hj * wh.get(j, k);
                }
                *zk = acc;
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                cs[k] = f * cs[k] + i * g;
                hs[k] = o * cs[k].tanh();
            }
        }
        hs
    }

    fn project(store: &ParamStore, init: &NodeInitializer, fwd: &[f64], bwd: &[f64]) -> Vec<f64> {
        let cat: Vec<f64> = fwd.iter().chain(bwd).copied().collect();
        let w = store.value(init.projection);
        (0..w.cols()).map(|c| cat.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum()).collect()
    }

    #[test]
    fn multi_word_label_matches_hand_unrolled_recurrence() {
        // d = 4 gives a recurrent width of 2.
        let (store, init, tok) = setup(4, 3);
        let g = KnowledgeGraph::build(&[
            t("Donald Trump", "position held", "President of the United States"),
            t("Cocaine", "instance of", "drug"),
        ]);
        let feats = init_node_features(&g, &init, &store, &tok).unwrap();
        assert_eq!(feats.shape(), (g.nodes.len(), 4));
        assert!(feats.is_finite());
        let emb = store.value(init.embedding);
        for node in &g.nodes {
            let toks = node_tokens(node, &tok).unwrap();
            let fwd = lstm_trace(&store, &init.forward, emb, &toks, 2);
            let rev: Vec<u32> = toks.iter().rev().copied().collect();
            let bwd = lstm_trace(&store, &init.backward, emb, &rev, 2);
            let want = project(&store, &init, &fwd, &bwd);
            for (c, w) in want.iter().enumerate() {
                assert!((feats.get(node.id, c) - w).abs() < 1e-12, "node {} col {c}", node.label);
            }
        }
    }

    #[test]
    fn single_token_label_is_projection_of_both_first_states() {
        let (store, init, tok) = setup(4, 5);
        let g = KnowledgeGraph::build(&[t("a", "b", "c")]);
        let feats = init_node_features(&g, &init, &store, &tok).unwrap();
        let emb = store.value(init.embedding);
        let toks = node_tokens(&g.nodes[0], &tok).unwrap();
        assert_eq!(toks.len(), 1);
        let fwd = lstm_trace(&store, &init.forward, emb, &toks, 2);
        let bwd = lstm_trace(&store, &init.backward, emb, &toks, 2);
        let want = project(&store, &init, &fwd, &bwd);
        for (c, w) in want.iter().enumerate() {
            assert!((feats.get(0, c) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_labels_get_identical_rows() {
        let (store, init, tok) = setup(8, 9);
        // Entity "is" and relation "is" share a label.
        let g = KnowledgeGraph::build(&[t("is", "is", "x")]);
        let feats = init_node_features(&g, &init, &store, &tok).unwrap();
        assert_eq!(feats.row(0), feats.row(1));
        assert_ne!(feats.row(0), feats.row(2));
    }
}
