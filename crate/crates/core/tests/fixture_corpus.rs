use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use punchline::config::RunConfig;
use punchline::corpus::{build_dataset, read_jsonl, read_raw_jokes, CharsetPolicy, JokeRecord};
use punchline::kgraph::KnowledgeGraph;
use punchline::knowledge::{annotate_dataset, FixtureProvider, Triple};
use punchline::pipeline;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn all_records() -> Vec<JokeRecord> {
    let raw = read_raw_jokes(&fixture("jokes.csv")).unwrap();
    let (split, stats) = build_dataset(raw, &CharsetPolicy::default(), 0.93, 0);
    assert_eq!((stats.raw, stats.filtered, stats.segmented, stats.deduplicated), (32, 32, 32, 32));
    split.train.into_iter().chain(split.valid).chain(split.test).collect()
}

#[test]
fn every_fixture_joke_survives_and_every_mention_key_is_a_setup() {
    let records = all_records();
    let setups: BTreeSet<&str> = records.iter().map(|r| r.setup.as_str()).collect();
    let fx = FixtureProvider::load(&fixture("knowledge.json")).unwrap();
    for key in fx.mentions.keys() {
        assert!(setups.contains(key.as_str()), "no set-up {key:?}");
    }
    for mentions in fx.mentions.values() {
        for m in mentions {
            if m.rho > 0.1 {
                assert!(fx.triples.contains_key(&m.title), "no triples for {}", m.title);
            }
        }
    }
}

#[test]
fn annotation_attaches_fixture_triples() {
    let records = all_records();
    let fx = FixtureProvider::load(&fixture("knowledge.json")).unwrap();
    let (annotated, issues) = annotate_dataset(records, &fx, &fx, 10, 2);
    assert!(issues.is_empty());
    assert_eq!(annotated.iter().filter(|r| !r.triples.is_empty()).count(), fx.mentions.len());
    let trump = annotated.iter().find(|r| r.setup.starts_with("Donald Trump once asked")).unwrap();
    assert!(trump.triples.contains(&Triple::new("Donald Trump", "position held", "President of the United States")));
    // "Advice" is linked at confidence 0.05 and has fixture triples, but is filtered.
    assert!(fx.triples.contains_key("Advice"));
    assert!(trump.triples.iter().all(|t| !t.subject.eq_ignore_ascii_case("advice")));
    for r in &annotated {
        let g = KnowledgeGraph::build(&r.triples);
        assert_eq!(g.edges.len(), 4 * r.triples.len());
    }
}

#[test]
fn annotate_leaves_its_input_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    pipeline::corpus_build(&fixture("jokes.csv"), dir.path(), &cfg).unwrap();
    let input = dir.path().join("train.jsonl");
    let before = std::fs::read(&input).unwrap();
    let fx = FixtureProvider::load(&fixture("knowledge.json")).unwrap();
    let out = dir.path().join("k/train.jsonl");
    pipeline::knowledge_annotate(&input, &out, &fx, &fx, &cfg).unwrap();
    assert_eq!(std::fs::read(&input).unwrap(), before);
    assert!(pipeline::knowledge_annotate(&input, &input, &fx, &fx, &cfg).is_err());
    assert_eq!(std::fs::read(&input).unwrap(), before);
    let annotated = read_jsonl(&out).unwrap();
    let plain = read_jsonl(&input).unwrap();
    assert_eq!(annotated.len(), plain.len());
    for (a, p) in annotated.iter().zip(&plain) {
        assert_eq!((&a.setup, &a.punchline), (&p.setup, &p.punchline));
    }
}

#[test]
fn corpus_build_is_reproducible() {
    let cfg = RunConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::corpus_build(&fixture("jokes.csv"), a.path(), &cfg).unwrap();
    pipeline::corpus_build(&fixture("jokes.csv"), b.path(), &cfg).unwrap();
    for split in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(a.path().join(split)).unwrap(), std::fs::read(b.path().join(split)).unwrap());
    }
}
