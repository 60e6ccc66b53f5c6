//! Command implementations behind the `elastic-nas` binary.

pub mod config;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use elastic_nas::analysis::{
    front_csv, inter_probs_csv, inter_size_probs, layer_count_probs, layer_probs_csv, pareto_front, ParetoFront,
};
use elastic_nas::archspace::{display_gb, model_bytes, ArchGenome, PrecisionPolicy, SearchSpaceSpec};
use elastic_nas::elastic_net::{init_supernet, subnet_extract, train_instatune, SupernetWeights};
use elastic_nas::linas::{linas_run, nsga2_search, random_search, SearchHistory};
use elastic_nas::quant::{quantize_subnet, QuantizedModel};
use elastic_nas::store::{
    dense_weights, load_checkpoint, load_history, quantized_subnet, read_checkpoint, save_checkpoint, save_quantized,
    write_history, CheckpointKind, Metadata,
};
use elastic_nas::tasks::{eval_accuracy, gen_corpus, gen_mc_suite, Evaluator, SlicedModel, SurrogateEvaluator, ToyEvaluator};
use elastic_nas::NasError;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Nas(#[from] NasError),
}

impl CliError {
    /// 0 ok, 2 usage or config, 3 training divergence, 4 empty analysis subset.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Nas(NasError::Divergence { .. }) => 3,
            CliError::Nas(NasError::EmptySubset(_)) => 4,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("output error: {e}"))
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "elastic-nas", version, about = "Sub-network search over elastic decoder-only transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy supernet with alternating full / random-subnet steps.
    Train(TrainArgs),
    /// Search the architecture space and write a history file.
    Search(SearchArgs),
    /// Write the Pareto front of a history as CSV.
    Front(FrontArgs),
    /// Write the front plus layer-count and width probability tables.
    Analyze(AnalyzeArgs),
    /// Quantize one sub-network of a checkpoint to INT8.
    Quantize(QuantizeArgs),
    /// Score one sub-network on the multiple-choice suite.
    Eval(EvalArgs),
    /// Print the analytic size of a genome.
    Size(SizeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Linas,
    Random,
    Nsga2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    Toy,
    Surrogate,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linas")]
    pub method: Method,
    #[arg(long, value_enum, default_value = "surrogate")]
    pub evaluator: EvaluatorKind,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FrontArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub percentile: f64,
    #[arg(long)]
    pub layer_count: Option<usize>,
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub genome: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub genome: String,
    #[arg(long)]
    pub quantized: bool,
    #[arg(long)]
    pub suite_seed: Option<u64>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SizeArgs {
    #[arg(long, default_value = "llama2-7b")]
    pub preset: String,
    /// Genome text; `full` or omitted means the largest architecture.
    #[arg(long)]
    pub genome: Option<String>,
    #[arg(long)]
    pub int8: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Front(a) => cmd_front(&a, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Size(a) => cmd_size(&a, out),
    }
}

fn parse_genome(text: &str, space: &SearchSpaceSpec) -> CliResult<ArchGenome> {
    let g: ArchGenome = text.parse()?;
    g.validate(space)?;
    Ok(g)
}

fn required(path: Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    path.ok_or_else(|| CliError::Usage(format!("missing {flag} (flag or config paths entry)")))
}

/// Checkpoint path next to which the loss trace is written.
pub fn loss_trace_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let path = required(a.out.clone().or(cfg.paths.checkpoint.clone()), "--out")?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let space = cfg.space.resolve()?;
    let corpus = gen_corpus(cfg.eval.corpus_seed, cfg.eval.corpus_tokens)?;
    let mut weights = init_supernet(&space.dims, space.max_inter(), cfg.train.seed)?;
    let outcome = train_instatune(&mut weights, &space, &corpus, &cfg.train)?;
    save_checkpoint(&weights, Some(&space), cfg.train.seed, &path)?;

    let mut csv = String::from("step,tag,loss,inter_sizes\n");
    for s in &outcome.trace {
        let widths: Vec<String> = s.phenotype.active_inter_sizes.iter().map(|w| w.to_string()).collect();
        let tag = serde_json::to_value(s.tag).expect("tag serializes");
        let _ = writeln!(csv, "{},{},{},{}", s.step, tag.as_str().unwrap_or(""), s.loss, widths.join(";"));
    }
    let trace_path = loss_trace_path(&path);
    std::fs::write(&trace_path, csv).map_err(|e| NasError::Io {
        path: trace_path.clone(),
        source: e,
    })?;

    let full = outcome.full_losses();
    let k = full.len().min(100);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    writeln!(
        out,
        "trained {} steps; full-network loss {:.4} (first {k}) -> {:.4} (last {k})",
        outcome.trace.len(),
        mean(&full[..k]),
        mean(&full[full.len() - k..])
    )?;
    writeln!(out, "checkpoint: {}", path.display())?;
    writeln!(out, "loss trace: {}", trace_path.display())?;
    Ok(())
}

fn checkpoint_space(meta: &Metadata, fallback: &SearchSpaceSpec) -> CliResult<SearchSpaceSpec> {
    let space = meta.space.clone().unwrap_or_else(|| fallback.clone());
    // A quantized checkpoint holds only the sub-network's layers.
    let mut expected = space.dims.clone();
    if meta.kind == CheckpointKind::Quantized {
        expected.max_layers = meta.inter_sizes.len();
    }
    if expected != meta.dims {
        return Err(CliError::Usage(
            "checkpoint dimensions do not match the configured space".into(),
        ));
    }
    Ok(space)
}

fn print_front(front: &ParetoFront, out: &mut dyn Write) -> CliResult {
    writeln!(out, "{:>8} {:>14} {:>9}  genome", "size_gb", "size_bytes", "accuracy")?;
    for p in &front.points {
        writeln!(
            out,
            "{:>8.1} {:>14} {:>9.4}  {}",
            display_gb(p.size_bytes),
            p.size_bytes,
            p.accuracy,
            p.genome
        )?;
    }
    Ok(())
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let path = required(a.history.clone().or(cfg.paths.history.clone()), "--history")?;
    if let Some(b) = a.budget {
        cfg.search.budget = b;
    }
    if let Some(s) = a.seed {
        cfg.search.seed = s;
    }
    if cfg.search.budget < cfg.search.pop_size {
        return Err(CliError::Usage(format!(
            "budget {} is smaller than the population size {}",
            cfg.search.budget, cfg.search.pop_size
        )));
    }
    let space = cfg.space.resolve()?;
    let evaluator: Box<dyn Evaluator> = match a.evaluator {
        EvaluatorKind::Surrogate => Box::new(SurrogateEvaluator::new(space, cfg.eval.surrogate_seed)?),
        EvaluatorKind::Toy => {
            let ckpt = a
                .ckpt
                .clone()
                .or(cfg.paths.checkpoint.clone())
                .ok_or_else(|| CliError::Usage("the toy evaluator needs --ckpt".into()))?;
            let (meta, weights) = load_checkpoint(&ckpt)?;
            let space = checkpoint_space(&meta, &space)?;
            Box::new(ToyEvaluator::new(space, weights, cfg.eval.suite_seed, cfg.eval.n_items)?)
        }
    };
    let space = evaluator.space().clone();
    let s = &cfg.search;
    let history: SearchHistory = match a.method {
        Method::Linas => linas_run(&space, evaluator.as_ref(), s)?,
        Method::Random => random_search(&space, evaluator.as_ref(), s.budget, s.seed)?,
        Method::Nsga2 => {
            let ga = elastic_nas::nsga2::GAConfig {
                pop_size: s.pop_size,
                seed: s.seed,
                ..s.ga.clone()
            };
            nsga2_search(&space, evaluator.as_ref(), &ga, s.budget)?
        }
    };
    write_history(&history, &path)?;
    writeln!(
        out,
        "{}: {} measured records -> {}",
        history.id,
        history.measured().count(),
        path.display()
    )?;
    print_front(&pareto_front(&history)?, out)
}

fn write_csv(dir: &Path, name: &str, body: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| NasError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| NasError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

pub fn cmd_front(a: &FrontArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let dir = required(a.csv_dir.clone().or(cfg.paths.csv_dir.clone()), "--csv-dir")?;
    let history = load_history(&a.history)?;
    let front = pareto_front(&history)?;
    let p = write_csv(&dir, "front.csv", &front_csv(&front))?;
    print_front(&front, out)?;
    writeln!(out, "wrote {}", p.display())?;
    Ok(())
}

pub fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let dir = required(a.csv_dir.clone().or(cfg.paths.csv_dir.clone()), "--csv-dir")?;
    let space = cfg.space.resolve()?;
    let history = load_history(&a.history)?;
    for r in history.measured() {
        r.genome.validate(&space)?;
    }
    let front = pareto_front(&history)?;
    let layers = layer_count_probs(&history, &space, a.percentile)?;
    let mut written = vec![
        write_csv(&dir, "front.csv", &front_csv(&front))?,
        write_csv(&dir, "layer_probs.csv", &layer_probs_csv(std::slice::from_ref(&layers)))?,
    ];
    writeln!(
        out,
        "top {}%: {} records at accuracy >= {}",
        a.percentile, layers.n_selected, layers.threshold
    )?;
    for (l, prob) in &layers.rows {
        writeln!(out, "  layers={l}: {prob:.4}")?;
    }
    if let Some(l) = a.layer_count {
        let tables = inter_size_probs(&history, &space, l, a.percentile)?;
        written.push(write_csv(&dir, "inter_probs.csv", &inter_probs_csv(&tables))?);
    }
    for p in written {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(())
}

pub fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> CliResult {
    let (meta, weights) = load_checkpoint(&a.ckpt)?;
    let space = checkpoint_space(&meta, &SearchSpaceSpec::toy())?;
    let genome = parse_genome(&a.genome, &space)?;
    let phenotype = genome.phenotype(&space)?;
    let q = quantize_subnet(&subnet_extract(&weights, &phenotype)?, &phenotype)?;
    save_quantized(&q, Some(&space), meta.seed, &a.out)?;
    let fp16 = model_bytes(&phenotype, &space.dims, PrecisionPolicy::Fp16All)?.bytes;
    let int8 = model_bytes(&phenotype, &space.dims, PrecisionPolicy::Int8Linear)?.bytes;
    writeln!(out, "genome: {genome}")?;
    writeln!(out, "fp16 bytes: {fp16}")?;
    writeln!(out, "int8 bytes: {int8}")?;
    writeln!(out, "ratio: {:.4}", int8 as f64 / fp16 as f64)?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let suite = gen_mc_suite(
        a.suite_seed.unwrap_or(cfg.eval.suite_seed),
        a.n_items.unwrap_or(cfg.eval.n_items),
    )?;
    let c = read_checkpoint(&a.ckpt)?;
    let space = checkpoint_space(&c.meta, &cfg.space.resolve()?)?;
    let genome = parse_genome(&a.genome, &space)?;
    let phenotype = genome.phenotype(&space)?;

    let (accuracy, policy) = match c.meta.kind {
        CheckpointKind::Quantized => {
            let q = quantized_subnet(&c)?;
            if q.phenotype != phenotype {
                return Err(CliError::Usage(format!(
                    "genome {genome} does not match the quantized checkpoint's architecture"
                )));
            }
            (eval_accuracy(&QuantizedModel::new(&q), &suite)?, PrecisionPolicy::Int8Linear)
        }
        CheckpointKind::Dense => {
            let weights: SupernetWeights<f32> = dense_weights(&c)?;
            if a.quantized {
                let q = quantize_subnet(&subnet_extract(&weights, &phenotype)?, &phenotype)?;
                (eval_accuracy(&QuantizedModel::new(&q), &suite)?, PrecisionPolicy::Int8Linear)
            } else {
                let m = SlicedModel {
                    weights: &weights,
                    phenotype: &phenotype,
                };
                (eval_accuracy(&m, &suite)?, PrecisionPolicy::Fp16All)
            }
        }
    };
    let size = model_bytes(&phenotype, &space.dims, policy)?;
    writeln!(out, "genome: {genome}")?;
    writeln!(out, "accuracy: {accuracy:.4} ({} items)", suite.len())?;
    writeln!(out, "size bytes: {} ({policy:?})", size.bytes)?;
    Ok(())
}

pub fn cmd_size(a: &SizeArgs, out: &mut dyn Write) -> CliResult {
    let space = SearchSpaceSpec::preset(&a.preset)?;
    let genome = match a.genome.as_deref() {
        None | Some("full") => space.max_genome(),
        Some(text) => parse_genome(text, &space)?,
    };
    let policy = if a.int8 {
        PrecisionPolicy::Int8Linear
    } else {
        PrecisionPolicy::Fp16All
    };
    let size = model_bytes(&genome.phenotype(&space)?, &space.dims, policy)?;
    writeln!(out, "params: {}", size.total_params)?;
    writeln!(out, "bytes: {}", size.bytes)?;
    writeln!(out, "{:.1} GB", size.display_gb)?;
    Ok(())
}
