use std::path::Path;
use std::process::{Command, Output};

use elastic_nas::archspace::{enumerate_genomes, SearchSpaceSpec};
use elastic_nas::linas::{EvalRecord, SearchHistory};
use elastic_nas::store::{load_history, write_history};
use elastic_nas::tasks::{Evaluator, SurrogateEvaluator};
use elastic_nas_cli::{CliError, config::RunConfig};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastic-nas"))
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

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Short training run so the command tests stay fast.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        r#"{"train": {"steps": 12, "batch_size": 4, "seq_len": 32},
            "eval": {"corpus_tokens": 20000, "n_items": 60},
            "search": {"pop_size": 10, "budget": 20, "inner_generations": 5}}"#,
    )
    .unwrap();
    path
}

fn small_widths(layers: usize, small: &[usize]) -> String {
    let w: Vec<String> = (1..=32)
        .map(|i| if small.contains(&i) { "5504" } else { "11008" }.to_string())
        .collect();
    format!("{layers}:{}", w.join(","))
}

#[test]
fn size_prints_published_figures() {
    let o = bin(&["size", "--preset", "llama2-7b"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("12.6 GB"));
    let mmlu: Vec<usize> = (17..=24).collect();
    let o = bin(&["size", "--genome", &small_widths(24, &mmlu)]);
    assert!(stdout(&o).contains("8.5 GB"), "{}", stdout(&o));
    let o = bin(&["size", "--genome", &small_widths(32, &[3, 4, 18, 25, 26, 28, 29, 32])]);
    assert!(stdout(&o).contains("11.5 GB"));
}

#[test]
fn bad_genomes_exit_2_with_position() {
    let o = bin(&["size", "--genome", "24:11008,11x08"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte 9"), "{}", stderr(&o));
    let o = bin(&["size", "--genome", "20:11008"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["size", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bin(&["train", "--config", "/no/such/file.json", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stpes": 3}}"#).unwrap();
    let o = bin(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m.snfg"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stpes"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    use elastic_nas::NasError;
    let div = CliError::Nas(NasError::Divergence {
        step: 150,
        loss: 80.0,
        initial: 5.0,
    });
    assert_eq!(div.exit_code(), 3);
    assert_eq!(CliError::Nas(NasError::EmptySubset("x".into())).exit_code(), 4);
    assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    assert_eq!(CliError::Nas(NasError::InvalidInput("x".into())).exit_code(), 2);
}

#[test]
fn train_quantize_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a.snfg");
    let b = dir.path().join("b.snfg");
    for path in [&a, &b] {
        let o = bin(&["train", "--config", p(&cfg), "--out", p(path), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let trace = std::fs::read_to_string(dir.path().join("a.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 12);
    assert_eq!(
        trace,
        std::fs::read_to_string(dir.path().join("b.loss.csv")).unwrap()
    );

    let full = "8:128,128,128,128,128,128,128,128";
    let q = dir.path().join("q.snfg");
    let o = bin(&["quantize", "--ckpt", p(&a), "--genome", full, "--out", p(&q)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ratio: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("ratio: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.50..=0.56).contains(&ratio), "{ratio}");

    let accuracy = |args: &[&str]| -> f64 {
        let o = bin(args);
        assert!(o.status.success(), "{}", stderr(&o));
        let line = stdout(&o).lines().find(|l| l.starts_with("accuracy: ")).unwrap().to_string();
        line["accuracy: ".len()..].split(' ').next().unwrap().parse().unwrap()
    };
    let base = ["eval", "--ckpt", p(&a), "--genome", full, "--n-items", "200", "--suite-seed", "4"];
    let fp = accuracy(&base);
    let mut quant = base.to_vec();
    quant.push("--quantized");
    let qa = accuracy(&quant);
    assert!((fp - qa).abs() <= 0.02, "{fp} vs {qa}");
    let from_file = accuracy(&["eval", "--ckpt", p(&q), "--genome", full, "--n-items", "200", "--suite-seed", "4"]);
    assert_eq!(from_file, qa);

    let o = bin(&["eval", "--ckpt", p(&q), "--genome", "4:64,64,64,64,64,64,64,64"]);
    assert_eq!(o.status.code(), Some(2));

    let small = "4:64,128,64,64,128,128,64,64";
    let qs = dir.path().join("qs.snfg");
    let o = bin(&["quantize", "--ckpt", p(&a), "--genome", small, "--out", p(&qs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let on_the_fly = accuracy(&["eval", "--ckpt", p(&a), "--genome", small, "--quantized", "--n-items", "100"]);
    let stored = accuracy(&["eval", "--ckpt", p(&qs), "--genome", small, "--n-items", "100"]);
    assert_eq!(on_the_fly, stored);
    let o = bin(&["quantize", "--ckpt", p(&a), "--genome", "5:64,64,64,64,64,64,64,64", "--out", p(&q)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_methods_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let h = |name: &str| dir.path().join(name);
    let o = bin(&["search", "--method", "linas", "--budget", "150", "--seed", "1", "--history", p(&h("linas.jsonl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("size_gb"));
    assert!(stderr(&o).contains("round=0"));
    let linas = load_history(&h("linas.jsonl")).unwrap();
    assert_eq!(linas.measured().count(), 150);

    let o = bin(&["search", "--method", "random", "--budget", "150", "--seed", "1", "--history", p(&h("random.jsonl"))]);
    assert!(o.status.success());
    let random = load_history(&h("random.jsonl")).unwrap();
    assert_eq!(random.measured().count(), 150);
    let genomes = |s: &SearchHistory| s.records.iter().map(|r| r.genome.to_string()).collect::<Vec<_>>();
    assert_ne!(genomes(&linas), genomes(&random));

    let o = bin(&["search", "--method", "nsga2", "--budget", "80", "--history", p(&h("nsga2.jsonl"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(load_history(&h("nsga2.jsonl")).unwrap().measured().count() <= 80);

    let o = bin(&["search", "--evaluator", "toy", "--history", p(&h("toy.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--ckpt"));
    let o = bin(&["search", "--budget", "20", "--history", p(&h("small.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_search_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let ckpt = dir.path().join("m.snfg");
    assert!(bin(&["train", "--config", p(&cfg), "--out", p(&ckpt)]).status.success());
    let hist = dir.path().join("h.jsonl");
    let o = bin(&[
        "search", "--config", p(&cfg), "--evaluator", "toy", "--ckpt", p(&ckpt), "--history", p(&hist),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let h = load_history(&hist).unwrap();
    assert_eq!(h.measured().count(), 20);
    assert!(h.records.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

fn exhaustive_history() -> SearchHistory {
    let space = SearchSpaceSpec::toy();
    let ev = SurrogateEvaluator::new(space.clone(), 42).unwrap();
    let mut h = SearchHistory::new("exhaustive");
    for (i, g) in enumerate_genomes(&space).unwrap().into_iter().enumerate() {
        let r = ev.measure(&g).unwrap();
        h.records.push(EvalRecord {
            genome: g,
            size_bytes: r.size_bytes,
            accuracy: r.accuracy,
            measured: true,
            round: 0,
            index: i,
            seed: 42,
            throughput_tok_per_s: None,
            timestamp_ms: 0,
        });
    }
    h
}

#[test]
fn front_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("all.jsonl");
    let h = exhaustive_history();
    write_history(&h, &hist).unwrap();
    let o = bin(&["front", "--history", p(&hist), "--csv-dir", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("front.csv")).unwrap();

    let dominated = |a: &EvalRecord| {
        h.records.iter().any(|b| {
            b.size_bytes <= a.size_bytes
                && b.accuracy >= a.accuracy
                && (b.size_bytes < a.size_bytes || b.accuracy > a.accuracy)
        })
    };
    let mut expected: Vec<(u64, u64)> = h
        .records
        .iter()
        .filter(|r| !dominated(r))
        .map(|r| (r.size_bytes, r.accuracy.to_bits()))
        .collect();
    expected.sort_unstable();
    expected.dedup();
    let got: Vec<(u64, u64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse::<f64>().unwrap().to_bits())
        })
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn analyze_writes_tables_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let hist = dir.path().join("all.jsonl");
    let h = exhaustive_history();
    write_history(&h, &hist).unwrap();
    let out = dir.path().join("csv");
    let o = bin(&["analyze", "--history", p(&hist), "--percentile", "100", "--layer-count", "4", "--csv-dir", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let layers = std::fs::read_to_string(out.join("layer_probs.csv")).unwrap();
    // every depth owns 256 of the 768 genotypes
    let rows: Vec<f64> = layers.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rows, vec![256.0 / 768.0; 3]);
    let inter = std::fs::read_to_string(out.join("inter_probs.csv")).unwrap();
    assert_eq!(inter.lines().count(), 1 + 4 * 2);
    assert!(out.join("front.csv").exists());

    let only4 = SearchHistory {
        id: "four".into(),
        records: h.records.iter().filter(|r| r.genome.layer_count == 4).cloned().collect(),
    };
    let p4 = dir.path().join("four.jsonl");
    write_history(&only4, &p4).unwrap();
    let o = bin(&["analyze", "--history", p(&p4), "--percentile", "20", "--layer-count", "8", "--csv-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("8-layer"));

    let bad = dir.path().join("bad.jsonl");
    let text = std::fs::read_to_string(&hist).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{not json";
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = bin(&["analyze", "--history", p(&bad), "--percentile", "50", "--csv-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn config_file_defaults() {
    let c = RunConfig::load_or_default(None).unwrap();
    assert_eq!(c.search.budget, 250);
    assert_eq!(c.eval.surrogate_seed, 42);
}
