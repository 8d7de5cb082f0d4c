use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{ArgGroup, Parser, Subcommand};
use serde_json::{json, Value};

use punchline::config::{RunConfig, CONFIG_ENV};
use punchline::evaluation::RougeReport;
use punchline::knowledge::{FixtureProvider, HttpLinker, LinkerProvider, SparqlTriples, TripleProvider};
use punchline::{pipeline, selftest, training};

/// Knowledge-fused punchline generation.
///
/// Every stage reads and writes plain files. Structured logs go to stderr
/// as JSON lines; summaries go to stdout.
#[derive(Debug, Parser)]
#[command(name = "punchline", version)]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML run configuration.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Preset to start from: desk or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one config value, e.g. `--set pretrain.max_steps=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Raw jokes to train/valid/test splits.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Attach knowledge triples to a split.
    #[command(subcommand)]
    Knowledge(KnowledgeCommand),
    /// Inspect the knowledge graph of a record.
    #[command(subcommand)]
    Kgraph(KgraphCommand),
    /// Pretrain the plain model or fine-tune the fused one.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Beam-search punchlines for every record of a split.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Rank finished hypotheses by total log-probability.
        #[arg(long)]
        raw_score: bool,
    },
    /// ROUGE-1/2/L of hypotheses against references.
    #[command(group(ArgGroup::new("format").args(["json", "table"])))]
    Evaluate {
        #[arg(long)]
        hyps: PathBuf,
        /// Plain text, one reference per line, or a `.jsonl` split.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        table: bool,
        /// Row label in table output.
        #[arg(long, default_value = "model")]
        name: String,
        /// Also write the report to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Gradient, collapse and attention checks on fresh networks.
    Selftest,
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        dedup_threshold: Option<f64>,
    },
}

#[derive(Debug, Subcommand)]
enum KnowledgeCommand {
    #[command(group(ArgGroup::new("source").args(["fixtures", "live"]).required(true)))]
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Offline mentions and triples.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Query the configured linker and SPARQL endpoints.
        #[arg(long)]
        live: bool,
        #[arg(long)]
        max_per_entity: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum KgraphCommand {
    /// DOT text of a record's graph, or with `--ckpt` its attention as JSON.
    Dump {
        #[arg(long)]
        input: PathBuf,
        /// Zero-based record index.
        #[arg(long, default_value_t = 0)]
        record: usize,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    Pretrain {
        /// Directory holding train.jsonl and valid.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a plain checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    Finetune {
        /// Plain checkpoint to transplant, or fused checkpoint to continue.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log(json!({"event": "error", "message": format!("{e:#}")}));
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn log(v: Value) {
    eprintln!("{v}");
}

/// Command-specific flags, applied after `--set`.
fn flag_overrides(command: &Command) -> Vec<String> {
    let mut out = Vec::new();
    match command {
        Command::Corpus(CorpusCommand::Build { dedup_threshold: Some(t), .. }) => {
            out.push(format!("corpus.dedup_threshold={t:?}"))
        }
        Command::Knowledge(KnowledgeCommand::Annotate { max_per_entity: Some(k), .. }) => {
            out.push(format!("knowledge.max_per_entity={k}"))
        }
        Command::Generate { beam, max_len, raw_score, .. } => {
            if let Some(b) = beam {
                out.push(format!("decode.beam={b}"));
            }
            if let Some(m) = max_len {
                out.push(format!("decode.max_len={m}"));
            }
            if *raw_score {
                out.push("decode.length_normalize=false".into());
            }
        }
        _ => {}
    }
    out
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &cli.preset {
        overrides.push(format!("preset={p}"));
    }
    overrides.extend(cli.set.iter().cloned());
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    overrides.extend(flag_overrides(&cli.command));
    Ok(RunConfig::load(cli.config.as_deref(), &overrides, cli.seed)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    let workers = config.workers;
    training::with_workers(workers, move || dispatch(cli.command, &config))?
}

fn dispatch(command: Command, config: &RunConfig) -> anyhow::Result<()> {
    let mut sink = |v: Value| log(v);
    match command {
        Command::Corpus(CorpusCommand::Build { input, output_dir, .. }) => {
            let stats = pipeline::corpus_build(&input, &output_dir, config)?;
            log(json!({"event": "corpus", "stats": stats}));
            println!(
                "{} raw, {} kept after filtering, {} segmented, {} after dedup: {} train / {} valid / {} test",
                stats.raw, stats.filtered, stats.segmented, stats.deduplicated, stats.train, stats.valid, stats.test
            );
        }
        Command::Knowledge(KnowledgeCommand::Annotate { input, output, fixtures, live, .. }) => {
            let issues = if let Some(path) = fixtures {
                let fx = FixtureProvider::load(&path)?;
                annotate(&input, &output, &fx, &fx, config)?
            } else if live {
                let k = &config.knowledge;
                let linker = HttpLinker::new(&k.linker_url, k.http.clone());
                let triples = SparqlTriples::new(&k.sparql_url, k.http.clone());
                annotate(&input, &output, &linker, &triples, config)?
            } else {
                bail!("one of --fixtures or --live is required");
            };
            for issue in &issues {
                log(json!({"event": "annotation_issue", "record": issue.record, "message": issue.message}));
            }
            println!("annotated {} -> {} ({} provider issues)", input.display(), output.display(), issues.len());
        }
        Command::Kgraph(KgraphCommand::Dump { input, record, ckpt }) => match ckpt {
            Some(ckpt) => println!("{}", serde_json::to_string_pretty(&pipeline::attention_dump(&ckpt, &input, record)?)?),
            None => print!("{}", pipeline::kgraph_dump(&input, record)?),
        },
        Command::Train(TrainCommand::Pretrain { data, out, resume }) => {
            log(json!({"event": "config", "config": config}));
            let summary = pipeline::pretrain_run(&data, &out, config, resume.as_deref(), &mut sink)?;
            report_training(&summary);
        }
        Command::Train(TrainCommand::Finetune { init, data, out }) => {
            log(json!({"event": "config", "config": config}));
            let summary = pipeline::finetune_run(&init, &data, &out, config, &mut sink)?;
            report_training(&summary);
        }
        Command::Generate { ckpt, input, output, .. } => {
            let n = pipeline::generate_run(&ckpt, &input, &output, config.decode.beam_config())?;
            log(json!({"event": "generate", "records": n, "decode": config.decode}));
            println!("wrote {n} hypotheses to {}", output.display());
        }
        Command::Evaluate { hyps, refs, json, name, output, .. } => {
            let report = pipeline::evaluate_run(&hyps, &refs)?;
            let text = if json { report.to_json() } else { RougeReport::table(&[(name.as_str(), report)]) };
            if let Some(path) = output {
                write_file(&path, &text)?;
            }
            print!("{text}");
        }
        Command::Selftest => {
            let checks = selftest::run_all(config.seed)?;
            for c in &checks {
                log(json!({"event": "check", "check": c}));
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn annotate(
    input: &Path,
    output: &Path,
    linker: &dyn LinkerProvider,
    triples: &dyn TripleProvider,
    config: &RunConfig,
) -> anyhow::Result<Vec<punchline::knowledge::AnnotationIssue>> {
    Ok(pipeline::knowledge_annotate(input, output, linker, triples, config)?)
}

fn report_training(summary: &pipeline::TrainSummary) {
    log(json!({"event": "summary", "summary": summary}));
    let best = summary.best_valid_loss.map_or("n/a".to_string(), |l| format!("{l:.4} (ppl {:.3})", l.exp()));
    println!(
        "{}: {} steps, best valid loss {} at step {}, {} parameters, vocab {}; best checkpoint {}",
        summary.stage,
        summary.steps,
        best,
        summary.best_step,
        summary.parameters,
        summary.vocab_size,
        summary.best.display()
    );
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
