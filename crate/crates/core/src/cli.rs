//! `nmn` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or integrity error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::datatools::{
    degree_diff_distribution, histogram_csv, kg_stats, load_graphs, make_synthetic_pair, sparsify, Dataset,
    DatasetPaths, EdgePerturbation, KgStats, NoiseHubs, SynthSpec,
};
use crate::error::NmnError;
use crate::kg::{write_kg, write_pairs};
use crate::pipeline;
use crate::training::{log_to_jsonl, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "nmn", about = "Entity alignment by neighborhood matching")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ranking (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use 64-bit floats (the only supported precision).
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    float64: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train and train a model, writing a checkpoint.
    Train(TrainArgs),
    /// Rank the test split and report Hits@k and degree-gap buckets.
    Evaluate(EvaluateArgs),
    /// Drop triples from one side of a dataset.
    Sparsify(SparsifyArgs),
    /// Entity, relation and triple counts as JSON.
    Stats(InArgs),
    /// Histogram of degree gaps over gold pairs as CSV.
    DegreeDiff(DegreeDiffArgs),
    /// Cross-graph attention for one entity pair as CSV.
    DumpAttention(DumpAttentionArgs),
    /// Learned versus random neighbor sampling as CSV.
    CompareSampling(CompareSamplingArgs),
    /// Write a synthetic dataset directory.
    MakeSynth(MakeSynthArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Word-vector file; defaults to vectors.txt in the data directory.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log; printed to stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30")]
    buckets: Vec<usize>,
    /// Per-pair rank CSV.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SparsifyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    keep: f64,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    side: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct DegreeDiffArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30")]
    buckets: Vec<usize>,
}

#[derive(Args, Debug)]
struct DumpAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, num_args = 2, value_names = ["ID1", "ID2"])]
    pair: Vec<u32>,
}

#[derive(Args, Debug)]
struct CompareSamplingArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "K", value_delimiter = ',', default_value = "3,5")]
    ks: Vec<usize>,
}

#[derive(Args, Debug)]
struct MakeSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 6.0)]
    avg_degree: f64,
    /// Fraction of G2 triples to remove.
    #[arg(long)]
    drop_edges: Option<f64>,
    /// Standard deviation of noise added to G2 features.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Number of shared noise hubs.
    #[arg(long, default_value_t = 0)]
    hubs: usize,
    /// Share of triples rewired to hubs on each side.
    #[arg(long, default_value_t = 0.3)]
    hub_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(NmnError),
}

impl From<NmnError> for Failure {
    fn from(e: NmnError) -> Self {
        match e {
            NmnError::Config(m) | NmnError::InvalidInput(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

fn write_file(path: &Path, text: &str) -> crate::Result<()> {
    fs::write(path, text).map_err(|e| NmnError::io(path, e))
}

fn read_config(path: &Path, seed: Option<u64>) -> crate::Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| NmnError::io(path, e))?;
    let mut cfg = TrainConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The directory that will receive `path` must already exist.
fn check_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Failure::Usage(format!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn load_dataset(d: &DataArgs) -> crate::Result<Dataset> {
    Dataset::load(&d.data, d.vectors.as_deref())
}

fn train(args: TrainArgs, seed: Option<u64>) -> Outcome {
    let cfg = read_config(&args.config, seed)?;
    check_parent(&args.out)?;
    if let Some(log) = &args.log {
        check_parent(log)?;
    }
    let dataset = load_dataset(&args.data)?;
    let prepared = pipeline::prepare(&dataset, &cfg)?;
    let outcome = pipeline::train(&prepared, &cfg)?;
    Checkpoint::from_model(&outcome.params, &cfg).save(&args.out)?;
    let log = log_to_jsonl(&outcome.log);
    match &args.log {
        Some(p) => write_file(p, &log)?,
        None => emit(&log),
    }
    Ok(())
}

fn load_model(path: &Path, seed: Option<u64>) -> crate::Result<(crate::model::ModelParams, TrainConfig)> {
    let (params, mut cfg) = Checkpoint::load(path)?.into_model()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((params, cfg))
}

fn evaluate(args: EvaluateArgs, seed: Option<u64>) -> Outcome {
    if args.k.iter().any(|&k| k == 0) {
        return Err(Failure::Usage("k values must be at least 1".into()));
    }
    crate::evaluation::validate_edges(&args.buckets)?;
    if let Some(r) = &args.ranks {
        check_parent(r)?;
    }
    let (params, cfg) = load_model(&args.checkpoint, seed)?;
    let dataset = load_dataset(&args.data)?;
    let prepared = pipeline::prepare(&dataset, &cfg)?;
    let (report, rows) = pipeline::evaluate(&dataset, &prepared, &params, &cfg, &args.k, &args.buckets)?;
    if let Some(r) = &args.ranks {
        write_file(r, &pipeline::ranks_csv(&rows))?;
    }
    emit(&to_json(&report));
    Ok(())
}

fn sparsify_cmd(args: SparsifyArgs, seed: u64) -> Outcome {
    if !(args.keep > 0.0 && args.keep <= 1.0) {
        return Err(Failure::Usage(format!("--keep must lie in (0, 1], got {}", args.keep)));
    }
    if args.out == args.input {
        return Err(Failure::Usage("--out must differ from --in".into()));
    }
    let (g1, g2, gold) = load_graphs(&args.input)?;
    let (g1, g2) = if args.side == 1 {
        (sparsify(&g1, args.keep, seed)?, g2)
    } else {
        (g1, sparsify(&g2, args.keep, seed)?)
    };
    fs::create_dir_all(&args.out).map_err(|e| NmnError::io(&args.out, e))?;
    let p = DatasetPaths::new(&args.out);
    write_kg(&g1, &p.ent_ids[0], &p.triples[0])?;
    write_kg(&g2, &p.ent_ids[1], &p.triples[1])?;
    write_pairs(&gold, &p.ref_ent_ids)?;
    let src_vectors = DatasetPaths::new(&args.input).vectors;
    if src_vectors.is_file() {
        fs::copy(&src_vectors, &p.vectors).map_err(|e| NmnError::io(&p.vectors, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsReport {
    g1: KgStats,
    g2: KgStats,
    gold_pairs: usize,
}

fn stats(args: InArgs) -> Outcome {
    let (g1, g2, gold) = load_graphs(&args.input)?;
    emit(&to_json(&StatsReport {
        g1: kg_stats(&g1),
        g2: kg_stats(&g2),
        gold_pairs: gold.len(),
    }));
    Ok(())
}

fn degree_diff(args: DegreeDiffArgs) -> Outcome {
    crate::evaluation::validate_edges(&args.buckets)?;
    let (g1, g2, gold) = load_graphs(&args.input)?;
    let bins = degree_diff_distribution(&g1, &g2, &gold, &args.buckets)?;
    emit(&histogram_csv(&bins));
    Ok(())
}

fn dump_attention(args: DumpAttentionArgs, seed: Option<u64>) -> Outcome {
    let (params, cfg) = load_model(&args.checkpoint, seed)?;
    let dataset = load_dataset(&args.data)?;
    let merged = dataset.merged()?;
    let rows = pipeline::attention_rows(&dataset, &merged, &params, &cfg, (args.pair[0], args.pair[1]))?;
    emit(&pipeline::attention_csv(&rows));
    Ok(())
}

fn compare_sampling(args: CompareSamplingArgs, seed: Option<u64>) -> Outcome {
    let cfg = read_config(&args.config, seed)?;
    if args.ks.iter().any(|&k| k == 0) {
        return Err(Failure::Usage("K values must be at least 1".into()));
    }
    let dataset = load_dataset(&args.data)?;
    let rows = pipeline::compare_sampling(&dataset, &cfg, &args.ks)?;
    emit(&pipeline::sampling_csv(&rows));
    Ok(())
}

fn make_synth(args: MakeSynthArgs, seed: u64) -> Outcome {
    let mut spec = SynthSpec::new(args.n, args.avg_degree, seed);
    spec.edges = args.drop_edges.map_or(EdgePerturbation::None, EdgePerturbation::DropEdges);
    spec.feature_noise = args.noise;
    spec.feature_dim = args.dim;
    if args.hubs > 0 {
        spec.hubs = Some(NoiseHubs {
            count: args.hubs,
            fraction: args.hub_fraction,
        });
    }
    let pair = make_synthetic_pair(&spec)?;
    pair.into_dataset().save(&args.out)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if !cli.float64 {
        return Err(Failure::Usage("only 64-bit floats are supported".into()));
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, in which case it is reused
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => train(a, seed),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Sparsify(a) => sparsify_cmd(a, seed.unwrap_or(0)),
        Command::Stats(a) => stats(a),
        Command::DegreeDiff(a) => degree_diff(a),
        Command::DumpAttention(a) => dump_attention(a, seed),
        Command::CompareSampling(a) => compare_sampling(a, seed),
        Command::MakeSynth(a) => make_synth(a, seed.unwrap_or(0)),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
