use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use structsum::corpus::{build_vocabulary, load_corpus};
use structsum::rouge::rouge_text;
use structsum::training::{greedy_decode, make_checkpoint, train};
use structsum::{prepare_corpus, Config, Conversation, Model, RougeTriple, TripleSourceMode};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data(rel: &str) -> String {
    root().join("data").join(rel).to_string_lossy().into_owned()
}

fn structsum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structsum"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn record<'a>(records: &'a [Value], id: &str) -> &'a Value {
    records.iter().find(|r| r["id"] == id).unwrap()
}

#[test]
fn stats_match_the_hand_counted_fixture() {
    let o = structsum(&[
        "stats",
        "--corpus",
        &data("mini/conversations.jsonl"),
        "--annotations",
        &data("mini/annotations.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let printed: Vec<(String, f64)> = stdout(&o)
        .lines()
        .take_while(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once(' ').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    let fixture = std::fs::read_to_string(data("mini/expected_stats.txt")).unwrap();
    let expected: Vec<(String, f64)> = fixture
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once(' ').unwrap();
            let v = match v.split_once('/') {
                Some((a, b)) => a.parse::<f64>().unwrap() / b.parse::<f64>().unwrap(),
                None => v.parse().unwrap(),
            };
            (k.to_string(), v)
        })
        .collect();
    assert_eq!(printed.len(), expected.len());
    for ((k, v), (ek, ev)) in printed.iter().zip(&expected) {
        assert_eq!(k, ek);
        assert!((v - ev).abs() < 0.005, "{k}: {v} vs {ev}");
    }
    // relation table: 16 rows whose counts add up to the edge total
    let text = stdout(&o);
    let rows: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("relation"))
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 16);
    let total: usize = rows
        .iter()
        .map(|r| r.split('\t').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 37);
}

#[test]
fn usage_errors_exit_1() {
    let o = structsum(&["summon"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = structsum(&["stats"]);
    assert_eq!(o.status.code(), Some(1));
    let o = structsum(&["stats", "--corpus", "x", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = structsum(&["ablate", "--config", "x", "--corpus", "y", "--variants", "baseline,wat"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wat"));
    let o = structsum(&[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_files_exit_2_with_the_path() {
    let o = structsum(&["stats", "--corpus", "/no/such/conversations.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/conversations.jsonl"), "{}", stderr(&o));
    let o = structsum(&[
        "summarize",
        "--checkpoint",
        "/no/such/model.ckpt",
        "--corpus",
        &data("mini/conversations.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/model.ckpt"));
    let o = structsum(&[
        "evaluate",
        "--hyp",
        "/no/such/hyp.jsonl",
        "--ref",
        &data("mini/conversations.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/hyp.jsonl"));
}

#[test]
fn help_prints_the_schemas() {
    let o = structsum(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for needle in [
        r#"{"id": str, "turns": [{"speaker": str, "text": str}], "summary": str?}"#,
        r#""discourse_edges": [{"src": int, "dst": int, "rel": str}]"#,
        r#""kind": "discourse""#,
        r#"{"step": int, "loss": float, "alphas": [float]}"#,
        r#"{"id": str, "r1": [f,p,r], "r2": [f,p,r], "rl": [f,p,r]}"#,
        "STRUCTSUM_LOG",
    ] {
        assert!(text.contains(needle), "missing {needle}");
    }
    let o = structsum(&["train", "--help"]);
    assert!(stdout(&o).contains("fusion_strategy"));
}

#[test]
fn build_graphs_writes_two_records_per_conversation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("graphs.jsonl");
    let (corpus, ann) = (data("mini/conversations.jsonl"), data("mini/annotations.jsonl"));
    for naive in [false, true] {
        let mut args = vec![
            "build-graphs",
            "--corpus",
            &corpus,
            "--annotations",
            &ann,
            "--out",
            out.to_str().unwrap(),
        ];
        if naive {
            args.push("--use-naive-svo");
        }
        let o = structsum(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let recs = json_lines(&std::fs::read_to_string(&out).unwrap());
        assert_eq!(recs.len(), 20);
        let mut annotated = 0;
        for pair in recs.chunks(2) {
            assert_eq!(pair[0]["kind"], "discourse");
            assert_eq!(pair[1]["kind"], "action");
            assert_eq!(pair[0]["id"], pair[1]["id"]);
            assert_eq!(pair[1]["approximate"], naive);
            let nodes = pair[0]["nodes"].as_array().unwrap().len();
            let edges = pair[0]["edges"].as_array().unwrap();
            assert_eq!(edges.iter().filter(|e| e[2] == "SelfLoop").count(), nodes);
            annotated += edges.len() - nodes;
        }
        assert_eq!(annotated, 37);
    }
}

#[test]
fn evaluate_scores_references_and_compares_systems() {
    let dir = tempfile::tempdir().unwrap();
    let refs = data("mini/conversations.jsonl");
    let convs = load_corpus(Path::new(&refs), None).unwrap();
    let perfect = dir.path().join("perfect.jsonl");
    let half = dir.path().join("half.jsonl");
    let mut p = String::new();
    let mut h = String::new();
    for (c, _) in &convs {
        let s = c.reference_summary.clone().unwrap();
        let words: Vec<&str> = s.split_whitespace().collect();
        p += &format!("{}\n", serde_json::json!({"id": c.id, "summary": s}));
        h += &format!(
            "{}\n",
            serde_json::json!({"id": c.id, "summary": words[..words.len() / 2].join(" ")})
        );
    }
    std::fs::write(&perfect, p).unwrap();
    std::fs::write(&half, h).unwrap();

    let o = structsum(&["evaluate", "--hyp", perfect.to_str().unwrap(), "--ref", &refs]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = json_lines(&stdout(&o));
    assert_eq!(recs.len(), 11);
    assert_eq!(record(&recs, "__mean__")["rl"], serde_json::json!([1.0, 1.0, 1.0]));

    let out = dir.path().join("eval.jsonl");
    let args = [
        "--seed",
        "5",
        "evaluate",
        "--hyp",
        perfect.to_str().unwrap(),
        "--ref",
        &refs,
        "--compare",
        half.to_str().unwrap(),
        "--permutation-iters",
        "2000",
        "--out",
        out.to_str().unwrap(),
    ];
    let o = structsum(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let first = std::fs::read_to_string(&out).unwrap();
    let recs = json_lines(&first);
    let pv = record(&recs, "__pvalue__");
    assert_eq!(pv["iterations"], 2000);
    // every example favours the first system: only the all-same-sign flips tie
    for m in ["r1", "rl"] {
        let p = pv[m].as_f64().unwrap();
        assert!(p < 0.01, "{m} {p}");
    }
    assert!(record(&recs, "__compare_mean__")["r1"][0].as_f64().unwrap() < 1.0);
    structsum(&args);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);

    let partial = dir.path().join("partial.jsonl");
    std::fs::write(&partial, "{\"id\": \"m01\", \"summary\": \"x\"}\n").unwrap();
    let o = structsum(&[
        "evaluate",
        "--hyp",
        perfect.to_str().unwrap(),
        "--ref",
        &refs,
        "--compare",
        partial.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = structsum(&[
        "evaluate",
        "--hyp",
        perfect.to_str().unwrap(),
        "--ref",
        partial.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no reference"));
}

fn short_config(dir: &Path, steps: usize) -> PathBuf {
    let path = dir.join("short.cfg");
    std::fs::write(&path, format!("preset = micro\nmax_steps = {steps}\neval_every = 5\n")).unwrap();
    path
}

#[test]
fn train_summarize_evaluate_round_trip_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 12);
    let corpus = data("mini/conversations.jsonl");
    let ann = data("mini/annotations.jsonl");
    let run = |name: &str, seed: &str| -> Value {
        let out = dir.path().join(name);
        let o = structsum(&[
            "--seed",
            seed,
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--corpus",
            &corpus,
            "--annotations",
            &ann,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let report = json_lines(&std::fs::read_to_string(out.join("report.jsonl")).unwrap());
        let steps: Vec<u64> = report.iter().map(|r| r["step"].as_u64().unwrap()).collect();
        assert_eq!(steps, vec![0, 5, 10, 12]);
        assert!(report.iter().all(|r| r["alphas"].as_array().unwrap().len() == 2));
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
    };
    let a = run("a", "3");
    let b = run("b", "3");
    let c = run("c", "4");
    assert_eq!(a["checkpoint_hash"], b["checkpoint_hash"]);
    assert_ne!(a["checkpoint_hash"], c["checkpoint_hash"]);

    let ck = dir.path().join("a/model.ckpt");
    let hyp = dir.path().join("hyp.jsonl");
    let o = structsum(&[
        "summarize",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--corpus",
        &corpus,
        "--annotations",
        &ann,
        "--out",
        hyp.to_str().unwrap(),
        "--max-len",
        "6",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hyps = json_lines(&std::fs::read_to_string(&hyp).unwrap());
    assert_eq!(hyps.len(), 10);
    assert!(hyps
        .iter()
        .all(|h| h["summary"].as_str().unwrap().split(' ').count() <= 6));
    let o = structsum(&["evaluate", "--hyp", hyp.to_str().unwrap(), "--ref", &corpus]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json_lines(&stdout(&o)).len(), 11);
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 3);
    let out = dir.path().join("ablation.jsonl");
    let o = structsum(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--variants",
        "random-graph,rezero-0",
        "--corpus",
        &data("mini/conversations.jsonl"),
        "--annotations",
        &data("mini/annotations.jsonl"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("random-graph\t"));
    let rows = json_lines(&std::fs::read_to_string(&out).unwrap());
    for e in rows[0]["edge_counts"].as_array().unwrap() {
        assert_eq!(e["original"], e["used"]);
    }
    assert_eq!(rows[1]["alpha_trace"][0]["alphas"], serde_json::json!([0.0, 0.0]));
}

#[test]
fn gradcheck_passes_on_the_micro_model() {
    let o = structsum(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.trim_end().ends_with("PASS"));
    let model_line = text.lines().find(|l| l.starts_with("model ")).unwrap();
    let err: f64 = model_line.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(err < 1e-3);
}

/// Command-line training with the bundled micro config reproduces the
/// in-process overfit run, and summarize + evaluate reproduce its ROUGE.
#[test]
fn cli_pipeline_reproduces_the_overfit_run() {
    let cfg_path = root().join("configs/micro.cfg");
    let config = Config::parse(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    assert_eq!(config, Config::micro());
    let corpus = data("synthetic/conversations.jsonl");
    let ann = data("synthetic/annotations.jsonl");

    let loaded = load_corpus(Path::new(&corpus), Some(Path::new(&ann))).unwrap();
    let convs: Vec<Conversation> = loaded.iter().map(|(c, _)| c.clone()).collect();
    let vocab = build_vocabulary(&convs, config.min_freq).unwrap();
    let examples = prepare_corpus(&loaded, &vocab, TripleSourceMode::Annotated).unwrap();
    let mut model = Model::init(&config, vocab.len(), config.train.seed).unwrap();
    train(&mut model, &examples).unwrap();
    let hash = make_checkpoint(&model, &vocab, config.train.max_steps as u64).hash();
    let scores: Vec<RougeTriple> = examples
        .iter()
        .zip(&convs)
        .map(|(ex, c)| {
            let hyp = greedy_decode(&model, ex, config.max_decode_len).unwrap();
            rouge_text(&vocab.decode(&hyp.tokens), c.reference_summary.as_deref().unwrap()).unwrap()
        })
        .collect();
    let mean = RougeTriple::mean(&scores).record("__mean__");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = structsum(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--corpus",
        &corpus,
        "--annotations",
        &ann,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["checkpoint_hash"], hash.as_str());

    let hyp = dir.path().join("hyp.jsonl");
    let o = structsum(&[
        "summarize",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--corpus",
        &corpus,
        "--annotations",
        &ann,
        "--out",
        hyp.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = structsum(&["evaluate", "--hyp", hyp.to_str().unwrap(), "--ref", &corpus]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = json_lines(&stdout(&o));
    assert_eq!(record(&recs, "__mean__"), &mean);
    assert!(mean["r1"][0].as_f64().unwrap() >= 0.95);
}
