//! The nine acceptance criteria, one PASS/FAIL line each. Runs as a plain
//! binary so the lines always reach the terminal.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use punchline::config::{Preset, RunConfig};
use punchline::corpus::{bow_cosine, build_dataset, deduplicate, read_raw_jokes, BowVector, CharsetPolicy, JokeRecord};
use punchline::decoding::{beam_search, generate, greedy, BeamConfig, Hypothesis, StepScorer};
use punchline::evaluation::{evaluate_files, rouge_l, rouge_n, score_tokens, Prf};
use punchline::kgraph::{KnowledgeGraph, NodeKind, REVERSE_PREFIX};
use punchline::knowledge::{annotate_dataset, FixtureProvider, Triple};
use punchline::model::{Example, ModelConfig, ModelKind, Seq2Seq};
use punchline::pipeline::{examples, train_tokenizer};
use punchline::selftest;
use punchline::tokenizer::{BOS, EOS};
use punchline::training::{evaluate_loss, finetune, pretrain, transplant, Metric};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn gradient_suite() -> Outcome {
    let seed = RunConfig::default().seed;
    let start = Instant::now();
    let checks = [selftest::gat_gradients(seed), selftest::fusion_gradients(seed), selftest::model_gradients(seed).map_err(|e| e.to_string())?];
    let elapsed = start.elapsed();
    let detail = checks.iter().map(|c| format!("{} {:.2e}", c.name, c.measured)).collect::<Vec<_>>().join(", ");
    for c in &checks {
        ensure(c.passed, c.line())?;
    }
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("{detail}; {:.1}s", elapsed.as_secs_f64()))
}

fn collapse() -> Outcome {
    let c = selftest::collapse(21, 100).map_err(|e| e.to_string())?;
    ensure(c.passed, c.line())?;
    Ok(format!("max |diff| {:.2e} over 100 prefixes", c.measured))
}

/// Node and edge multisets written out directly from the triple list.
fn brute_force_graph(triples: &[Triple]) -> (BTreeMap<(u8, String), usize>, BTreeMap<((u8, String), (u8, String)), usize>) {
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeMap::new();
    let mut entities: Vec<String> = Vec::new();
    for t in triples {
        for e in [t.subject.trim(), t.object.trim()] {
            if !entities.iter().any(|x| x == e) {
                entities.push(e.to_string());
            }
        }
    }
    for e in &entities {
        nodes.insert((0, e.clone()), 1);
    }
    for t in triples {
        let s = (0u8, t.subject.trim().to_string());
        let o = (0u8, t.object.trim().to_string());
        let r = (1u8, t.relation.trim().to_string());
        let rr = (2u8, format!("{REVERSE_PREFIX}{}", t.relation.trim()));
        *nodes.entry(r.clone()).or_insert(0) += 1;
        *nodes.entry(rr.clone()).or_insert(0) += 1;
        for e in [(s.clone(), r.clone()), (r, o.clone()), (o, rr.clone()), (rr, s)] {
            *edges.entry(e).or_insert(0) += 1;
        }
    }
    (nodes, edges)
}

fn graph_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let entities = ["Paris", " Paris", "France ", "cat", "Cat", "coffee", "Donald Trump", "President"];
    let relations = ["capital of", "likes", " instance of", "position held"];
    for case in 0..1000 {
        let n = rng.gen_range(0..=20);
        let triples: Vec<Triple> = (0..n)
            .map(|_| {
                Triple::new(
                    entities[rng.gen_range(0..entities.len())],
                    relations[rng.gen_range(0..relations.len())],
                    entities[rng.gen_range(0..entities.len())],
                )
            })
            .collect();
        let g = KnowledgeGraph::build(&triples);
        let key = |id: usize| {
            let node = &g.nodes[id];
            let kind = match node.kind {
                NodeKind::Entity => 0u8,
                NodeKind::Relation => 1,
                NodeKind::ReverseRelation => 2,
            };
            (kind, node.label.clone())
        };
        let mut nodes = BTreeMap::new();
        for id in 0..g.nodes.len() {
            *nodes.entry(key(id)).or_insert(0) += 1;
        }
        let mut edges = BTreeMap::new();
        for &(a, b) in &g.edges {
            *edges.entry((key(a), key(b))).or_insert(0) += 1;
        }
        let (want_nodes, want_edges) = brute_force_graph(&triples);
        let unique = want_nodes.keys().filter(|k| k.0 == 0).count();
        ensure(nodes == want_nodes, format!("case {case}: node multiset differs"))?;
        ensure(edges == want_edges, format!("case {case}: edge multiset differs"))?;
        ensure(g.nodes.len() == unique + 2 * n, format!("case {case}: {} nodes", g.nodes.len()))?;
        ensure(g.edges.len() == 4 * n, format!("case {case}: {} edges", g.edges.len()))?;
    }
    Ok("1000 random triple sets".into())
}

fn attention_rows() -> Outcome {
    let c = selftest::attention_rows(41, 30).map_err(|e| e.to_string())?;
    ensure(c.passed, c.line())?;
    Ok(format!("{}, worst deviation {:.2e}", c.detail, c.measured))
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let raw = read_raw_jokes(&fixture("jokes.csv")).map_err(|e| e.to_string())?;
    let (split, _) = build_dataset(raw, &CharsetPolicy::default(), 0.93, 0);
    let records: Vec<JokeRecord> = split.train.into_iter().chain(split.valid).chain(split.test).collect();
    ensure(records.len() == 32, format!("{} fixture pairs", records.len()))?;
    let fx = FixtureProvider::load(&fixture("knowledge.json")).map_err(|e| e.to_string())?;
    let (records, _) = annotate_dataset(records, &fx, &fx, 10, 1);

    let config = RunConfig::preset(Preset::Desk);
    let tokenizer = train_tokenizer(&records, config.tokenizer.vocab_size);
    let model_config = ModelConfig { vocab_size: tokenizer.vocab_size(), ..config.model.clone() };
    let fused_examples = examples(&records, &tokenizer, &model_config).map_err(|e| e.to_string())?;
    let plain_examples: Vec<Example> = fused_examples.iter().map(|e| Example { graph: None, ..e.clone() }).collect();

    let mut quiet = |_: &Metric| {};
    let plain = Seq2Seq::new(model_config, ModelKind::Plain, config.seed).map_err(|e| e.to_string())?;
    let pre = pretrain(plain, &plain_examples, &[], config.pretrain.clone(), &mut quiet).map_err(|e| e.to_string())?;
    let ppl = evaluate_loss(&pre.best, &plain_examples).map_err(|e| e.to_string())?.exp();
    let steps = pre.last.state.step;
    ensure(steps <= 500 && ppl < 1.2, format!("pretrain ppl {ppl:.4} after {steps} steps"))?;

    let fused = transplant(&pre.best, config.seed).map_err(|e| e.to_string())?;
    let ft = finetune(fused, &fused_examples, &[], config.finetune.clone(), &mut quiet).map_err(|e| e.to_string())?;
    let beam = BeamConfig { beam: 5, ..config.decode.beam_config() };
    let hyps = generate(&ft.best, &tokenizer, &records, beam).map_err(|e| e.to_string())?;
    let exact = hyps.iter().zip(&records).filter(|(h, r)| h.as_str() == r.punchline).count();
    let elapsed = start.elapsed();
    let detail = format!(
        "pretrain ppl {ppl:.4} at step {steps}; {} fine-tune steps; {exact}/32 exact; {:.0}s",
        ft.last.state.step,
        elapsed.as_secs_f64()
    );
    ensure(ft.last.state.step == 200, format!("fine-tune ran {} steps", ft.last.state.step))?;
    ensure(exact * 10 >= 9 * records.len(), detail.clone())?;
    ensure(elapsed < Duration::from_secs(600), detail.clone())?;
    Ok(detail)
}

/// Log-distribution over `vocab` tokens fixed by the prefix.
struct RandomTable {
    seed: u64,
    vocab: usize,
}

impl StepScorer for RandomTable {
    fn next_log_probs(&self, prefix: &[u32]) -> punchline::Result<Vec<f64>> {
        let key = prefix.iter().fold(self.seed, |acc, &t| acc.wrapping_mul(1_000_003).wrapping_add(t as u64 + 7));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = w.iter().sum();
        Ok(w.iter().map(|x| (x / z).ln()).collect())
    }
}

/// Greedy picks `a` (0.54) but `b` then ends with 0.9.
struct Trap;

const TOK_A: u32 = 3;
const TOK_B: u32 = 4;

impl StepScorer for Trap {
    fn next_log_probs(&self, prefix: &[u32]) -> punchline::Result<Vec<f64>> {
        let eps = 1e-6;
        let p = match prefix {
            [_] => [eps, eps, 0.01, 0.54, 0.45],
            [_, TOK_A] => [eps, eps, 0.30, 0.36, 0.34],
            [_, TOK_B] => [eps, eps, 0.90, 0.05, 0.05],
            _ => [eps, eps, 0.98, 0.01, 0.01],
        };
        let z: f64 = p.iter().sum();
        Ok(p.iter().map(|x| (x / z).ln()).collect())
    }
}

/// Best finished sequence of at most `max_len` generated tokens.
fn enumerate_best(scorer: &dyn StepScorer, vocab: u32, max_len: usize, normalize: bool) -> (Vec<u32>, f64) {
    let mut best: (Vec<u32>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut frontier = vec![(vec![BOS], 0.0)];
    while let Some((seq, lp)) = frontier.pop() {
        let lps = scorer.next_log_probs(&seq).unwrap();
        for v in 0..vocab {
            let mut next = seq.clone();
            next.push(v);
            let total = lp + lps[v as usize];
            if v == EOS {
                let score = if normalize { total / (next.len() - 1) as f64 } else { total };
                if score > best.1 {
                    best = (next, score);
                }
            } else if next.len() - 1 < max_len {
                frontier.push((next, total));
            }
        }
    }
    best
}

fn beam_correctness() -> Outcome {
    for seed in 0..50 {
        let table = RandomTable { seed, vocab: 7 };
        let b = beam_search(&table, BeamConfig { beam: 1, max_len: 12, length_normalize: true }).map_err(|e| e.to_string())?;
        let g: Hypothesis = greedy(&table, 12).map_err(|e| e.to_string())?;
        ensure(b.tokens == g.tokens, format!("context {seed}: beam 1 {:?} vs greedy {:?}", b.tokens, g.tokens))?;
    }
    let g = greedy(&Trap, 3).map_err(|e| e.to_string())?;
    ensure(g.tokens == [BOS, TOK_A, TOK_A, EOS], format!("greedy escaped the trap: {:?}", g.tokens))?;
    for normalize in [false, true] {
        let (best, _) = enumerate_best(&Trap, 5, 3, normalize);
        let h = beam_search(&Trap, BeamConfig { beam: 2, max_len: 3, length_normalize: normalize }).map_err(|e| e.to_string())?;
        ensure(h.tokens == best, format!("beam 2 {:?}, optimum {best:?} (normalize {normalize})", h.tokens))?;
    }
    Ok("beam 1 = greedy on 50 contexts; beam 2 finds the trap optimum".into())
}

fn fraction(s: &str) -> f64 {
    match s.split_once('/') {
        Some((n, d)) => n.parse::<f64>().unwrap() / d.parse::<f64>().unwrap(),
        None => s.parse().unwrap(),
    }
}

fn matches(p: Prf, want: &Value) -> bool {
    let w: Vec<f64> = want.as_array().unwrap().iter().map(|v| fraction(v.as_str().unwrap())).collect();
    [p.precision, p.recall, p.f1].iter().zip(&w).all(|(a, b)| (a - b).abs() <= 1e-12)
}

fn rouge_oracle() -> Outcome {
    let sheet: Value = serde_json::from_str(&std::fs::read_to_string(fixture("rouge_sheet.json")).unwrap()).unwrap();
    let pairs = sheet["pairs"].as_array().unwrap();
    ensure(pairs.len() == 20, "sheet must hold 20 pairs")?;
    for (i, pair) in pairs.iter().enumerate() {
        let h = score_tokens(pair["hyp"].as_str().unwrap());
        let r = score_tokens(pair["ref"].as_str().unwrap());
        ensure(matches(rouge_n(&h, &r, 1), &pair["rouge1"]), format!("pair {i} ROUGE-1"))?;
        ensure(matches(rouge_n(&h, &r, 2), &pair["rouge2"]), format!("pair {i} ROUGE-2"))?;
        ensure(matches(rouge_l(&h, &r), &pair["rougeL"]), format!("pair {i} ROUGE-L"))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let (hyps, refs) = (dir.path().join("hyps.txt"), dir.path().join("refs.txt"));
    let mut text = String::new();
    for pair in pairs {
        text.push_str(pair["ref"].as_str().unwrap());
        text.push('\n');
    }
    std::fs::write(&hyps, &text).unwrap();
    std::fs::write(&refs, &text).unwrap();
    let report = evaluate_files(&hyps, &refs).map_err(|e| e.to_string())?.percent();
    ensure(
        [report.rouge1.f1, report.rouge2.f1, report.rouge_l.f1] == [100.0; 3],
        format!("identity scored {:?}", [report.rouge1.f1, report.rouge2.f1, report.rouge_l.f1]),
    )?;
    Ok("20 sheet pairs exact; identity 100.0".into())
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_punchline")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let common = [
        "--seed", "5", "--workers", "2",
        "--set", "pretrain.max_steps=40", "--set", "finetune.max_steps=20",
        "--set", "pretrain.eval_every=10", "--set", "finetune.eval_every=10",
    ];
    let cli = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(common);
        run_cli(&all)
    };
    let jokes = fixture("jokes.csv").to_string_lossy().into_owned();
    let knowledge = fixture("knowledge.json").to_string_lossy().into_owned();
    cli(&["corpus", "build", "--input", &jokes, "--output-dir", &p("data")])?;
    for split in ["train", "valid", "test"] {
        let (input, output) = (p(&format!("data/{split}.jsonl")), p(&format!("kdata/{split}.jsonl")));
        cli(&["knowledge", "annotate", "--input", &input, "--output", &output, "--fixtures", &knowledge])?;
    }
    cli(&["train", "pretrain", "--data", &p("kdata"), "--out", &p("ckpt")])?;
    cli(&["train", "finetune", "--init", &p("ckpt/pretrain.best"), "--data", &p("kdata"), "--out", &p("ckpt")])?;
    cli(&["generate", "--ckpt", &p("ckpt/finetune.best"), "--input", &p("kdata/test.jsonl"), "--output", &p("hyps.txt")])?;
    cli(&["evaluate", "--hyps", &p("hyps.txt"), "--refs", &p("kdata/test.jsonl"), "--json", "--output", &p("report.json")])?;
    let hyps = std::fs::read(dir.join("hyps.txt")).map_err(|e| e.to_string())?;
    let report = std::fs::read(dir.join("report.json")).map_err(|e| e.to_string())?;
    Ok((hyps, report))
}

fn pipeline_determinism() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = end_to_end(a.path())?;
    let second = end_to_end(b.path())?;
    let report: Value = serde_json::from_slice(&first.1).map_err(|e| e.to_string())?;
    ensure(report["rouge1"]["f1"].is_number(), "report lacks ROUGE-1")?;
    ensure(first.0 == second.0, "hypothesis files differ")?;
    ensure(first.1 == second.1, "report files differ")?;
    let lines = first.0.iter().filter(|&&c| c == b'\n').count();
    Ok(format!("{lines} hypotheses and report identical across runs; {:.0}s", start.elapsed().as_secs_f64()))
}

/// Keep-first removal with the cosine test done in exact integer arithmetic:
/// `dot / sqrt(|a|^2 |b|^2) > 0.93` iff `dot^2 * 10^4 > 93^2 * |a|^2 |b|^2`.
fn dedup_oracle(jokes: &[JokeRecord]) -> Vec<JokeRecord> {
    let bag = |r: &JokeRecord| {
        let mut m: HashMap<String, u128> = HashMap::new();
        let text = format!("{} {}", r.setup, r.punchline).to_lowercase();
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            *m.entry(w.to_string()).or_insert(0) += 1;
        }
        m
    };
    let mut kept: Vec<(JokeRecord, HashMap<String, u128>)> = Vec::new();
    for j in jokes {
        let b = bag(j);
        let nb: u128 = b.values().map(|c| c * c).sum();
        let duplicate = kept.iter().any(|(_, k)| {
            let dot: u128 = b.iter().map(|(w, c)| c * k.get(w).copied().unwrap_or(0)).sum();
            let nk: u128 = k.values().map(|c| c * c).sum();
            dot > 0 && dot * dot * 10_000 > 93 * 93 * nb * nk
        });
        if !duplicate {
            kept.push((j.clone(), b));
        }
    }
    kept.into_iter().map(|(j, _)| j).collect()
}

fn synthetic_jokes(rng: &mut ChaCha8Rng, n: usize) -> Vec<JokeRecord> {
    let words = [
        "the", "a", "doctor", "lawyer", "cat", "dog", "said", "asked", "why", "coffee", "bar", "walks", "into", "my", "wife",
        "never", "again", "money", "time", "because", "penguin", "monday", "told", "me", "you",
    ];
    let mut bases: Vec<Vec<&str>> = Vec::new();
    let mut out = Vec::new();
    while out.len() < n {
        let words_for = |rng: &mut ChaCha8Rng, len: usize| (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>();
        let tokens = if bases.is_empty() || rng.gen_bool(0.3) {
            let len = rng.gen_range(12..30);
            let t = words_for(rng, len);
            bases.push(t.clone());
            t
        } else {
            // Variant of an earlier joke: a few substitutions, maybe recased.
            let mut t = bases[rng.gen_range(0..bases.len())].clone();
            for _ in 0..rng.gen_range(0..4) {
                let i = rng.gen_range(0..t.len());
                t[i] = words[rng.gen_range(0..words.len())];
            }
            t
        };
        let cut = tokens.len() * 2 / 3;
        let mut setup = tokens[..cut].join(" ");
        if rng.gen_bool(0.3) {
            setup = setup.to_uppercase();
        }
        out.push(JokeRecord::new(setup + ",", tokens[cut..].join(" ") + "!"));
    }
    out
}

fn dedup_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let jokes = synthetic_jokes(&mut rng, 100);
    let want = dedup_oracle(&jokes);
    let got = deduplicate(jokes.clone(), 0.93);
    ensure(got == want, format!("kept {} vs oracle {}", got.len(), want.len()))?;
    ensure(want.len() < 100 && want.len() > 10, format!("synthetic set is degenerate: {} kept", want.len()))?;

    // 100 distinct unit-count words each, 93 shared: cosine exactly 0.93.
    let left: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
    let right: Vec<String> = (0..93).map(|i| format!("w{i}")).chain((0..7).map(|i| format!("v{i}"))).collect();
    let a = JokeRecord::new(left[..99].join(" "), left[99].clone());
    let b = JokeRecord::new(right[..99].join(" "), right[99].clone());
    let cos = bow_cosine(&BowVector::from_text(&a.full_text()), &BowVector::from_text(&b.full_text()));
    ensure(cos == 0.93, format!("boundary pair has cosine {cos}"))?;
    ensure(deduplicate(vec![a.clone(), b.clone()], 0.93).len() == 2, "boundary pair was merged")?;
    ensure(dedup_oracle(&[a, b]).len() == 2, "oracle merged the boundary pair")?;
    Ok(format!("{} of 100 kept, matches oracle; 0.93 boundary kept", got.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("collapse equivalence", collapse),
        ("graph-builder oracle", graph_oracle),
        ("attention normalization", attention_rows),
        ("overfit smoke", overfit),
        ("beam correctness", beam_correctness),
        ("ROUGE oracle", rouge_oracle),
        ("pipeline determinism", pipeline_determinism),
        ("dedup conformance", dedup_conformance),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
