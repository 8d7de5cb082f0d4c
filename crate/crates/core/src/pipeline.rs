//! File-level stages behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{build_dataset, read_jsonl, read_raw_jokes, write_jsonl, write_split, BuildStats, CharsetPolicy, JokeRecord};
use crate::decoding::{generate, BeamConfig};
use crate::evaluation::{evaluate_files, RougeReport};
use crate::kgraph::KnowledgeGraph;
use crate::knowledge::{annotate_dataset, AnnotationIssue, LinkerProvider, TripleProvider};
use crate::model::{Example, ForwardOptions, ModelConfig, ModelKind, Seq2Seq};
use crate::nn::{matrix_rows, AttentionSite};
use crate::tokenizer::Tokenizer;
use crate::training::{finetune, pretrain, transplant, Metric, TrainOutcome, Trainer};
use crate::{Error, Result};

pub type Log<'a> = &'a mut dyn FnMut(Value);

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const PRETRAIN_BEST: &str = "pretrain.best";
pub const PRETRAIN_LAST: &str = "pretrain.last";
pub const FINETUNE_BEST: &str = "finetune.best";
pub const FINETUNE_LAST: &str = "finetune.last";

pub fn corpus_build(input: &Path, out_dir: &Path, config: &RunConfig) -> Result<BuildStats> {
    let raw = read_raw_jokes(input)?;
    let (split, stats) = build_dataset(raw, &CharsetPolicy::default(), config.corpus.dedup_threshold, config.seed);
    write_split(out_dir, &split)?;
    Ok(stats)
}

pub fn knowledge_annotate(
    input: &Path,
    output: &Path,
    linker: &dyn LinkerProvider,
    triples: &dyn TripleProvider,
    config: &RunConfig,
) -> Result<Vec<AnnotationIssue>> {
    if same_file(input, output) {
        return Err(Error::Config("annotate output must differ from its input".into()));
    }
    let records = read_jsonl(input)?;
    let k = &config.knowledge;
    let (records, issues) = annotate_dataset(records, linker, triples, k.max_per_entity, k.in_flight);
    write_jsonl(output, &records)?;
    Ok(issues)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// DOT text for the graph of record `index` (zero-based).
pub fn kgraph_dump(input: &Path, index: usize) -> Result<String> {
    let records = read_jsonl(input)?;
    let record = records
        .get(index)
        .ok_or_else(|| Error::Config(format!("record {index} out of range ({} records)", records.len())))?;
    Ok(KnowledgeGraph::build(&record.triples).to_dot())
}

/// Graph attention weights and mean fusion gates of a checkpoint on record
/// `index`, teacher-forced on its punchline.
pub fn attention_dump(checkpoint: &Path, input: &Path, index: usize) -> Result<Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let records = read_jsonl(input)?;
    let record = records
        .get(index)
        .ok_or_else(|| Error::Config(format!("record {index} out of range ({} records)", records.len())))?;
    let example = Example::from_record(record, &ck.tokenizer, &ck.model.config)?;
    let trace = ck.model.trace(&example.source, example.graph.as_ref(), &example.decoder_input(), ForwardOptions::default())?;
    let graph = KnowledgeGraph::build(&record.triples);
    let attention: Vec<Value> = trace
        .attention
        .iter()
        .filter(|a| a.site == AttentionSite::Graph)
        .map(|a| json!({"layer": a.layer, "head": a.head, "weights": matrix_rows(&a.weights)}))
        .collect();
    let gates: Vec<Value> = trace
        .fusion
        .iter()
        .map(|f| json!({"block": f.block, "mean_lambda": f.gate.sum() / f.gate.len() as f64}))
        .collect();
    Ok(json!({
        "record": index,
        "nodes": graph.nodes.iter().map(|n| &n.label).collect::<Vec<_>>(),
        "graph_attention": attention,
        "fusion_gates": gates,
    }))
}

/// Every text the tokenizer should see: set-ups, punchlines, triple labels.
pub fn tokenizer_texts(records: &[JokeRecord]) -> Vec<String> {
    let mut texts = Vec::new();
    for r in records {
        texts.push(r.setup.clone());
        texts.push(r.punchline.clone());
        for t in &r.triples {
            texts.extend([t.subject.clone(), t.relation.clone(), t.object.clone()]);
        }
    }
    texts
}

pub fn train_tokenizer(records: &[JokeRecord], vocab_size: usize) -> Tokenizer {
    let texts = tokenizer_texts(records);
    Tokenizer::train(texts.iter().map(String::as_str), vocab_size)
}

pub fn examples(records: &[JokeRecord], tokenizer: &Tokenizer, config: &ModelConfig) -> Result<Vec<Example>> {
    records.iter().map(|r| Example::from_record(r, tokenizer, config)).collect()
}

fn read_split(data_dir: &Path, name: &str) -> Result<Vec<JokeRecord>> {
    let path = data_dir.join(name);
    if path.exists() {
        read_jsonl(&path)
    } else {
        Ok(Vec::new())
    }
}

fn metric_logger<'a>(stage: &'static str, log: Log<'a>) -> impl FnMut(&Metric) + 'a {
    move |m: &Metric| {
        let mut v = serde_json::to_value(m).expect("metric serializes");
        v["event"] = json!("metric");
        v["stage"] = json!(stage);
        log(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub stage: &'static str,
    pub steps: u64,
    pub best_step: u64,
    pub best_valid_loss: Option<f64>,
    pub vocab_size: usize,
    pub parameters: usize,
    pub best: PathBuf,
}

fn save_outcome(
    outcome: &TrainOutcome,
    tokenizer: &Tokenizer,
    out_dir: &Path,
    (best_name, last_name): (&str, &str),
    stage: &'static str,
    config: &RunConfig,
) -> Result<TrainSummary> {
    let last = Checkpoint { run_config: Some(config.to_toml()), ..Checkpoint::from_trainer(&outcome.last, tokenizer) };
    last.save(&out_dir.join(last_name))?;
    let best = Checkpoint { model: outcome.best.clone(), optimizer: None, ..last };
    let best_path = out_dir.join(best_name);
    best.save(&best_path)?;
    let state = &outcome.last.state;
    Ok(TrainSummary {
        stage,
        steps: state.step,
        best_step: state.best_step,
        best_valid_loss: state.best_valid_loss,
        vocab_size: tokenizer.vocab_size(),
        parameters: outcome.best.store.num_scalars(),
        best: best_path,
    })
}

fn write_config(out_dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("config.toml");
    fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))
}

/// Trains a tokenizer on the training split and pretrains the plain model.
/// A `resume` checkpoint continues its own run instead.
pub fn pretrain_run(data_dir: &Path, out_dir: &Path, config: &RunConfig, resume: Option<&Path>, log: Log) -> Result<TrainSummary> {
    let train_records = read_split(data_dir, TRAIN_FILE)?;
    if train_records.is_empty() {
        return Err(Error::Config(format!("no training records in {}", data_dir.display())));
    }
    let valid_records = read_split(data_dir, VALID_FILE)?;
    let (trainer, tokenizer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.kind != ModelKind::Plain {
                return Err(Error::ConfigMismatch("pretraining can only resume a plain checkpoint".into()));
            }
            let tokenizer = ck.tokenizer.clone();
            let mut trainer = ck.into_trainer()?;
            trainer.config = config.pretrain.clone();
            (trainer, tokenizer)
        }
        None => {
            let tokenizer = train_tokenizer(&train_records, config.tokenizer.vocab_size);
            let model_config = ModelConfig { vocab_size: tokenizer.vocab_size(), ..config.model.clone() };
            let model = Seq2Seq::new(model_config, ModelKind::Plain, config.seed)?;
            (Trainer::new(model, config.pretrain.clone())?, tokenizer)
        }
    };
    write_config(out_dir, config)?;
    tokenizer.save(out_dir)?;
    let train = examples(&train_records, &tokenizer, &trainer.model.config)?;
    let valid = examples(&valid_records, &tokenizer, &trainer.model.config)?;
    let mut sink = metric_logger("pretrain", log);
    let outcome = if resume.is_some() {
        let mut trainer = trainer;
        let best_store = trainer.fit(&train, &valid, &mut sink)?;
        let mut best = trainer.model.clone();
        best.store = best_store;
        TrainOutcome { last: trainer, best }
    } else {
        pretrain(trainer.model, &train, &valid, config.pretrain.clone(), &mut sink)?
    };
    save_outcome(&outcome, &tokenizer, out_dir, (PRETRAIN_BEST, PRETRAIN_LAST), "pretrain", config)
}

/// From a plain checkpoint: transplant and fine-tune. From a fused one
/// that carries optimizer state: continue that run.
pub fn finetune_run(init: &Path, data_dir: &Path, out_dir: &Path, config: &RunConfig, log: Log) -> Result<TrainSummary> {
    let ck = Checkpoint::load(init)?;
    let train_records = read_split(data_dir, TRAIN_FILE)?;
    if train_records.is_empty() {
        return Err(Error::Config(format!("no training records in {}", data_dir.display())));
    }
    let valid_records = read_split(data_dir, VALID_FILE)?;
    let tokenizer = ck.tokenizer.clone();
    let train = examples(&train_records, &tokenizer, &ck.model.config)?;
    let valid = examples(&valid_records, &tokenizer, &ck.model.config)?;
    write_config(out_dir, config)?;
    let mut sink = metric_logger("finetune", log);
    let outcome = match (ck.model.kind, ck.optimizer.is_some()) {
        (ModelKind::Plain, _) => {
            let fused = transplant(&ck.model, config.seed)?;
            finetune(fused, &train, &valid, config.finetune.clone(), &mut sink)?
        }
        (ModelKind::Fused, true) => {
            let mut trainer = ck.into_trainer()?;
            trainer.config = config.finetune.clone();
            let best_store = trainer.fit(&train, &valid, &mut sink)?;
            let mut best = trainer.model.clone();
            best.store = best_store;
            TrainOutcome { last: trainer, best }
        }
        (ModelKind::Fused, false) => finetune(ck.model, &train, &valid, config.finetune.clone(), &mut sink)?,
    };
    save_outcome(&outcome, &tokenizer, out_dir, (FINETUNE_BEST, FINETUNE_LAST), "finetune", config)
}

/// Provenance written next to a hypotheses file.
#[derive(Clone, Debug, Serialize)]
pub struct GenerationMeta {
    pub checkpoint: String,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub seed: u64,
    pub beam: usize,
    pub max_len: usize,
    pub length_normalize: bool,
    pub count: usize,
    /// Run configuration stored in the checkpoint.
    pub run_config: Option<String>,
}

pub fn meta_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    output.with_file_name(name)
}

/// Decodes every record of `input` and writes one line per record.
pub fn generate_run(checkpoint: &Path, input: &Path, output: &Path, beam: BeamConfig) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let records = read_jsonl(input)?;
    let lines = generate(&ck.model, &ck.tokenizer, &records, beam)?;
    let mut text = String::new();
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(output, text).map_err(|e| Error::io(output, e))?;
    let meta = GenerationMeta {
        checkpoint: checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        kind: ck.model.kind,
        model: ck.model.config.clone(),
        seed: ck.train.seed,
        beam: beam.beam,
        max_len: beam.max_len,
        length_normalize: beam.length_normalize,
        count: lines.len(),
        run_config: ck.run_config.clone(),
    };
    let path = meta_path(output);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(lines.len())
}

pub fn evaluate_run(hyps: &Path, refs: &Path) -> Result<RougeReport> {
    evaluate_files(hyps, refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_sits_beside_output() {
        assert_eq!(meta_path(Path::new("out/hyps.txt")), Path::new("out/hyps.txt.meta.json"));
    }

    #[test]
    fn tokenizer_sees_triple_labels() {
        let mut r = JokeRecord::new("a b", "c");
        r.triples.push(crate::knowledge::Triple::new("x", "y", "z"));
        assert_eq!(tokenizer_texts(&[r]), ["a b", "c", "x", "y", "z"]);
    }
}
