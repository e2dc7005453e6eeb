//! The `structsum` command line. [`run`] parses arguments, dispatches one
//! command and maps the outcome to an exit code: 0 on success, 1 on a
//! usage error, 2 on a data error or a failed check.

mod schema;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use structsum::corpus::{build_vocabulary, load_corpus};
use structsum::gradsuite::{run_suite, MODEL_EPS, OP_EPS};
use structsum::graph::{
    action_dump, build_action_graph, build_discourse_graph, corpus_stats, discourse_dump, naive_svo_extract,
    relation_distribution, transform_pov,
};
use structsum::rouge::{permutation_test, rouge_text, MEAN_RECORD_ID};
use structsum::tensor::Checkpoint;
use structsum::training::{
    ablation_table, greedy_decode, make_checkpoint, restore_checkpoint, run_ablation, train_with, Variant,
};
use structsum::{prepare_corpus, AnnotationBundle, Config, Conversation, Model, RougeTriple, TripleSourceMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Gradient check bounds for the op suite and the whole model.
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(
    name = "structsum",
    version,
    about = "Structure-aware abstractive conversation summarization"
)]
struct Cli {
    /// Seed for every random choice the command makes. `train` and
    /// `ablate` use it in place of the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build discourse and action graphs and write them as JSON lines.
    BuildGraphs(BuildGraphsArgs),
    /// Print corpus averages and the discourse relation distribution.
    Stats(CorpusArgs),
    /// Train a model and write its checkpoint and report.
    Train(TrainArgs),
    /// Greedy-decode a summary for every conversation.
    Summarize(SummarizeArgs),
    /// Score hypotheses with ROUGE-1/2/L, optionally against a second system.
    Evaluate(EvaluateArgs),
    /// Train and compare model variants on a held-out split.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of a micro model.
    Gradcheck,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Conversation file.
    #[arg(long)]
    corpus: PathBuf,
    /// Annotation file; conversations without a record get empty annotations.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildGraphsArgs {
    #[command(flatten)]
    input: CorpusArgs,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Extract action triples with the rule-based extractor instead of
    /// reading them from the annotations.
    #[arg(long)]
    use_naive_svo: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    input: CorpusArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    use_naive_svo: bool,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: CorpusArgs,
    /// Hypothesis file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's max_decode_len.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    use_naive_svo: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Hypothesis file.
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypotheses of a second system over the same ids.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    permutation_iters: usize,
    /// Evaluation output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, value_parser = parse_variants)]
    variants: VariantList,
    #[command(flatten)]
    input: CorpusArgs,
    /// Number of conversations, taken from the end of the corpus, held out
    /// for scoring. Defaults to a quarter (at least one).
    #[arg(long)]
    heldout: Option<usize>,
    /// Per-variant JSON lines with gate traces and edge counts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct VariantList(Vec<Variant>);

fn parse_variants(s: &str) -> Result<VariantList, String> {
    Variant::parse_list(s).map(VariantList).map_err(|e| e.to_string())
}

fn command() -> clap::Command {
    let join = |parts: &[&str]| parts.join("\n\n");
    Cli::command()
        .after_long_help(join(&[
            schema::CONVERSATIONS,
            schema::ANNOTATIONS,
            schema::GRAPHS,
            schema::CONFIG,
            schema::TRAIN_OUTPUT,
            schema::HYPOTHESES,
            schema::EVALUATION,
            "Set STRUCTSUM_LOG (error, warn, info, debug) for progress logs on stderr.\nExit codes: 0 success, 1 usage error, 2 data error or failed check.",
        ]))
        .mut_subcommand("build-graphs", |c| {
            c.after_long_help(join(&[schema::CONVERSATIONS, schema::ANNOTATIONS, schema::GRAPHS]))
        })
        .mut_subcommand("stats", |c| c.after_long_help(join(&[schema::CONVERSATIONS, schema::ANNOTATIONS])))
        .mut_subcommand("train", |c| {
            c.after_long_help(join(&[schema::CONFIG, schema::CONVERSATIONS, schema::ANNOTATIONS, schema::TRAIN_OUTPUT]))
        })
        .mut_subcommand("summarize", |c| {
            c.after_long_help(join(&[schema::CONVERSATIONS, schema::ANNOTATIONS, schema::HYPOTHESES]))
        })
        .mut_subcommand("evaluate", |c| c.after_long_help(join(&[schema::HYPOTHESES, schema::EVALUATION])))
        .mut_subcommand("ablate", |c| {
            c.after_long_help(join(&[schema::ABLATION, schema::CONFIG, schema::CONVERSATIONS, schema::ANNOTATIONS]))
        })
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match command()
        .try_get_matches_from(argv)
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            EXIT_DATA
        }
    }
}

/// The error chain joined by `: `, skipping causes the previous message
/// already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !last.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let seed = cli.seed;
    match cli.command {
        Command::BuildGraphs(a) => build_graphs(&a),
        Command::Stats(a) => stats(&a),
        Command::Train(a) => train(&a, seed),
        Command::Summarize(a) => summarize(&a),
        Command::Evaluate(a) => evaluate(&a, seed.unwrap_or(0)),
        Command::Ablate(a) => ablate(&a, seed),
        Command::Gradcheck => gradcheck(seed.unwrap_or(0)),
    }
}

// ----- helpers -----

fn mode(naive: bool) -> TripleSourceMode {
    if naive {
        TripleSourceMode::Naive
    } else {
        TripleSourceMode::Annotated
    }
}

fn load(input: &CorpusArgs) -> anyhow::Result<Vec<(Conversation, Option<AnnotationBundle>)>> {
    let corpus = load_corpus(&input.corpus, input.annotations.as_deref())?;
    ensure!(!corpus.is_empty(), "{}: no conversations", input.corpus.display());
    log::info!("loaded {} conversations from {}", corpus.len(), input.corpus.display());
    Ok(corpus)
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<Config> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut config = Config::parse(&text).with_context(|| path.display().to_string())?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    Ok(config)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| path.display().to_string())?,
    ))
}

fn sink(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_line(w: &mut dyn Write, value: &serde_json::Value) -> anyhow::Result<()> {
    writeln!(w, "{value}")?;
    Ok(())
}

/// Any record with an id and a summary.
#[derive(Deserialize)]
struct SummaryRecord {
    id: String,
    #[serde(default)]
    summary: Option<String>,
}

fn read_summaries(path: &Path) -> anyhow::Result<Vec<(String, Option<String>)>> {
    let file = File::open(path).with_context(|| path.display().to_string())?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| path.display().to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SummaryRecord =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push((rec.id, rec.summary));
    }
    Ok(out)
}

// ----- commands -----

fn build_graphs(a: &BuildGraphsArgs) -> anyhow::Result<i32> {
    let corpus = load(&a.input)?;
    let mut w = create(&a.out)?;
    let empty = AnnotationBundle::default();
    for (conv, bundle) in &corpus {
        let bundle = bundle.as_ref().unwrap_or(&empty);
        let discourse = build_discourse_graph(conv, &bundle.discourse_edges)
            .with_context(|| format!("conversation `{}`", conv.id))?;
        let triples = if a.use_naive_svo {
            naive_svo_extract(&transform_pov(conv, &bundle.coref_clusters))
        } else {
            bundle.action_triples.clone()
        };
        let action = build_action_graph(&triples).with_context(|| format!("conversation `{}`", conv.id))?;
        write_line(&mut w, &discourse_dump(&conv.id, &discourse))?;
        let mut dump = action_dump(&conv.id, &action);
        dump["approximate"] = json!(a.use_naive_svo);
        write_line(&mut w, &dump)?;
    }
    w.flush()?;
    log::info!("wrote {} graph pairs to {}", corpus.len(), a.out.display());
    Ok(EXIT_OK)
}

fn stats(a: &CorpusArgs) -> anyhow::Result<i32> {
    let corpus: Vec<(Conversation, AnnotationBundle)> =
        load(a)?.into_iter().map(|(c, b)| (c, b.unwrap_or_default())).collect();
    let s = corpus_stats(&corpus)?;
    let mut out = io::stdout().lock();
    writeln!(out, "conversations {}", s.conversation_count)?;
    writeln!(out, "participants {:.2}", s.mean_participants)?;
    writeln!(out, "turns {:.2}", s.mean_turns)?;
    writeln!(out, "discourse_edges {:.2}", s.mean_discourse_edges)?;
    writeln!(out, "action_triples {:.2}", s.mean_action_triples)?;
    writeln!(out)?;
    writeln!(out, "relation\tcount\tshare")?;
    for (rel, count, share) in relation_distribution(&corpus)? {
        writeln!(out, "{}\t{count}\t{:.4}", rel.name(), share)?;
    }
    Ok(EXIT_OK)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<i32> {
    let config = load_config(&a.config, seed)?;
    let corpus = load(&a.input)?;
    let convs: Vec<Conversation> = corpus.iter().map(|(c, _)| c.clone()).collect();
    let vocab = build_vocabulary(&convs, config.min_freq)?;
    let examples = prepare_corpus(&corpus, &vocab, mode(a.use_naive_svo))?;
    let missing: Vec<&str> = examples
        .iter()
        .filter(|e| e.target.is_empty())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(
            "conversations without a summary cannot be trained on: {}",
            missing.join(", ")
        );
    }
    std::fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;

    let mut model = Model::init(&config, vocab.len(), config.train.seed)?;
    log::info!(
        "training {} parameters on {} conversations, vocabulary {}",
        model.params.num_scalars(),
        examples.len(),
        vocab.len()
    );
    let mut report_file = create(&a.out.join("report.jsonl"))?;
    let mut write_err = None;
    let report = train_with(&mut model, &examples, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(report_file, "{line}").and_then(|_| report_file.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("report.jsonl");
    }

    let ck = make_checkpoint(&model, &vocab, config.train.max_steps as u64);
    let ck_path = a.out.join("model.ckpt");
    ck.save(&ck_path).with_context(|| ck_path.display().to_string())?;
    let summary = json!({
        "steps": config.train.max_steps,
        "final_loss": report.final_loss,
        "params_hash": report.params_hash,
        "checkpoint_hash": ck.hash(),
    });
    std::fs::write(a.out.join("summary.json"), format!("{summary}\n"))?;
    println!("{summary}");
    Ok(EXIT_OK)
}

fn summarize(a: &SummarizeArgs) -> anyhow::Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    let (model, vocab) = restore_checkpoint(&ck)?;
    let corpus = load(&a.input)?;
    let examples = prepare_corpus(&corpus, &vocab, mode(a.use_naive_svo))?;
    let max_len = a.max_len.unwrap_or(model.config.max_decode_len);
    let mut w = sink(a.out.as_deref())?;
    for ex in &examples {
        let hyp = greedy_decode(&model, ex, max_len)?;
        write_line(&mut w, &json!({"id": ex.id, "summary": vocab.decode(&hyp.tokens)}))?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

/// Per-hypothesis scores in hypothesis order.
fn score(hyps: &[(String, Option<String>)], refs: &HashMap<String, String>) -> anyhow::Result<Vec<RougeTriple>> {
    hyps.iter()
        .map(|(id, hyp)| {
            let reference = refs
                .get(id)
                .with_context(|| format!("no reference summary for `{id}`"))?;
            rouge_text(hyp.as_deref().unwrap_or(""), reference).with_context(|| format!("`{id}`"))
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs, seed: u64) -> anyhow::Result<i32> {
    let hyps = read_summaries(&a.hyp)?;
    ensure!(!hyps.is_empty(), "{}: no hypotheses", a.hyp.display());
    let refs: HashMap<String, String> = read_summaries(&a.reference)?
        .into_iter()
        .filter_map(|(id, s)| s.map(|s| (id, s)))
        .collect();
    let scores = score(&hyps, &refs)?;
    let mut w = sink(a.out.as_deref())?;
    for ((id, _), s) in hyps.iter().zip(&scores) {
        write_line(&mut w, &s.record(id))?;
    }
    write_line(&mut w, &RougeTriple::mean(&scores).record(MEAN_RECORD_ID))?;

    if let Some(other) = &a.compare {
        let by_id: HashMap<String, Option<String>> = read_summaries(other)?.into_iter().collect();
        let paired = hyps
            .iter()
            .map(|(id, _)| {
                let s = by_id
                    .get(id)
                    .with_context(|| format!("{}: no hypothesis for `{id}`", other.display()))?;
                Ok((id.clone(), s.clone()))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let theirs = score(&paired, &refs)?;
        write_line(&mut w, &RougeTriple::mean(&theirs).record("__compare_mean__"))?;
        let p = |pick: fn(&RougeTriple) -> f64| -> anyhow::Result<f64> {
            let x: Vec<f64> = scores.iter().map(pick).collect();
            let y: Vec<f64> = theirs.iter().map(pick).collect();
            Ok(permutation_test(&x, &y, a.permutation_iters, seed)?)
        };
        write_line(
            &mut w,
            &json!({
                "id": "__pvalue__",
                "r1": p(|s| s.r1.f)?,
                "r2": p(|s| s.r2.f)?,
                "rl": p(|s| s.rl.f)?,
                "iterations": a.permutation_iters,
                "seed": seed,
            }),
        )?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn ablate(a: &AblateArgs, seed: Option<u64>) -> anyhow::Result<i32> {
    let config = load_config(&a.config, seed)?;
    let variants = &a.variants.0;
    let corpus = load(&a.input)?;
    let convs: Vec<Conversation> = corpus.iter().map(|(c, _)| c.clone()).collect();
    let vocab = build_vocabulary(&convs, config.min_freq)?;
    let examples = prepare_corpus(&corpus, &vocab, TripleSourceMode::Annotated)?;
    let held = a.heldout.unwrap_or((examples.len() / 4).max(1));
    ensure!(
        held >= 1 && held < examples.len(),
        "held-out size {held} leaves no training data out of {} conversations",
        examples.len()
    );
    let (train_set, heldout) = examples.split_at(examples.len() - held);
    let rows = run_ablation(train_set, heldout, &config, variants, vocab.len())?;
    print!("{}", ablation_table(&rows));
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        for row in &rows {
            write_line(
                &mut w,
                &json!({
                    "variant": row.variant.name(),
                    "final_loss": row.final_loss,
                    "rouge": {
                        "r1": row.rouge.r1.as_array(),
                        "r2": row.rouge.r2.as_array(),
                        "rl": row.rouge.rl.as_array(),
                    },
                    "alpha_trace": row.alpha_trace.iter()
                        .map(|(step, alphas)| json!({"step": step, "alphas": alphas}))
                        .collect::<Vec<_>>(),
                    "edge_counts": row.edge_counts.iter()
                        .map(|(id, before, after)| json!({"id": id, "original": before, "used": after}))
                        .collect::<Vec<_>>(),
                }),
            )?;
        }
        w.flush()?;
    }
    Ok(EXIT_OK)
}

fn gradcheck(seed: u64) -> anyhow::Result<i32> {
    let report = run_suite(seed)?;
    let mut out = io::stdout().lock();
    for (name, r) in &report.ops {
        writeln!(
            out,
            "op {name:<18} {:.3e} over {} coordinates",
            r.max_rel_error, r.coordinates
        )?;
    }
    let op_max = report.op_max();
    writeln!(
        out,
        "ops max relative error {op_max:.3e} (eps {OP_EPS:e}, bound {OP_TOLERANCE:e})"
    )?;
    let worst = report
        .model
        .worst
        .as_ref()
        .map(|(n, i)| format!(", worst {n}[{i}]"))
        .unwrap_or_default();
    writeln!(
        out,
        "model max relative error {:.3e} over {} coordinates (eps {MODEL_EPS:e}, bound {MODEL_TOLERANCE:e}){worst}",
        report.model.max_rel_error, report.model.coordinates
    )?;
    let pass = op_max < OP_TOLERANCE && report.model.max_rel_error < MODEL_TOLERANCE;
    writeln!(out, "{}", if pass { "PASS" } else { "FAIL" })?;
    Ok(if pass { EXIT_OK } else { EXIT_DATA })
}
