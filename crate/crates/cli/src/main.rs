//! `orthopq` command-line tool.

mod config;
mod output;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use orthopq::codebook::{
    angular_histogram, generate_orthonormal_codebooks, perturb_codebooks, validate_orthonormality,
};
use orthopq::data_io::{generate_synthetic, split_standard, split_unseen, SyntheticConfig};
use orthopq::eval::evaluate_rankings;
use orthopq::index::{encode_database, ScorerRegistry, Searcher};
use orthopq::trainer::{train, train_with_codebooks, LrSchedule};
use orthopq::{
    CodebookMode, CodebookSet, CodebookSpec, EmbeddingDataset, EncodedDatabase, Hyperparams,
    ModelParams, TrainConfig,
};

use crate::output::StagedOutputs;

/// Residual above which a codebook set is reported as not orthonormal.
const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "orthopq", version, about = "Product quantization with orthonormal codebooks")]
struct Cli {
    /// Read flags from a file of `key=value` lines; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate deterministic orthonormal codebooks (OPQC file).
    GenCodebook(GenCodebookArgs),
    /// Train a quantization head on an embedding file (OPQM checkpoint + CSV log).
    Train(TrainArgs),
    /// Hard-encode an embedding file with a trained model (OPQB file).
    Encode(EncodeArgs),
    /// Rank an encoded database for every query embedding (CSV).
    Query(QueryArgs),
    /// Compute MAP, P@T and PR curves from a ranking CSV.
    Eval(EvalArgs),
    /// Histogram of within-codebook codeword angles (CSV).
    Angles(AnglesArgs),
    /// Generate clustered synthetic embeddings (OPQE file).
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct GenCodebookArgs {
    /// Number of codebooks M.
    #[arg(long)]
    m: usize,
    /// Sub-vector dimension d.
    #[arg(long)]
    d: usize,
    /// Codewords per codebook K (power of two, at most d).
    #[arg(long)]
    k: usize,
    /// Add N(0, variance) noise to every entry (breaks orthonormality).
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    /// Seed for the perturbation noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training embeddings (OPQE).
    #[arg(long)]
    data: PathBuf,
    /// Number of subspaces M.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Codewords per subspace K.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Bottleneck dimension D (divisible by M).
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// `orthonormal` (fixed predefined codebooks) or `l2q` (learned codebooks).
    #[arg(long, default_value = "orthonormal")]
    mode: CodebookMode,
    /// Entropy regularizer weight; 0 disables it.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Cosine scale r.
    #[arg(long, default_value_t = 40.0)]
    r: f64,
    /// Cosine margin u.
    #[arg(long, default_value_t = 0.4)]
    u: f64,
    /// Drop the classification term on the original sub-vectors.
    #[arg(long)]
    no_lx: bool,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Initial learning rate.
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Learning-rate multiplier applied every `--lr-period` epochs.
    #[arg(long, default_value_t = 0.5)]
    lr_decay: f64,
    #[arg(long, default_value_t = 35)]
    lr_period: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Keep the encoder fixed at the identity (input dimension must equal --dim).
    #[arg(long)]
    identity_encoder: bool,
    /// Start from these codebooks (OPQC) instead of generating them.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path (OPQM).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Database embeddings (OPQE).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    /// Encoded database (OPQB) produced by `encode` with the same model.
    #[arg(long)]
    db: PathBuf,
    /// Query embeddings (OPQE).
    #[arg(long)]
    queries: PathBuf,
    /// Results per query; 0 ranks the whole database.
    #[arg(long, default_value_t = 0)]
    topk: usize,
    /// `auto`, `lut` or `aqd`.
    #[arg(long, default_value = "auto")]
    scorer: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ranking CSV written by `query`.
    #[arg(long)]
    ranking: PathBuf,
    /// Encoded database (OPQB) supplying database labels.
    #[arg(long)]
    db: PathBuf,
    /// Query embeddings (OPQE) supplying query labels.
    #[arg(long)]
    queries: PathBuf,
    /// `map` or `p@T`; repeat for several.
    #[arg(long = "metric", default_value = "map")]
    metrics: Vec<Metric>,
    /// Also write the mean PR curve as `recall,precision` CSV.
    #[arg(long)]
    pr_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pr_points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnglesArgs {
    /// Codebook file (OPQC).
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    codebook: Option<PathBuf>,
    /// Take the codebooks from a checkpoint (OPQM) instead.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Bin width in degrees.
    #[arg(long, default_value_t = 0.5)]
    bin: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Per-coordinate Gaussian noise around each class center.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output embeddings (OPQE). With `--queries-out` this holds the database part only.
    #[arg(long)]
    out: PathBuf,
    /// Write a query split here, taking `--queries-per-class` samples from every class.
    #[arg(long)]
    queries_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    queries_per_class: usize,
    /// Hold out classes for training: the first `--train-fraction` of classes go here and
    /// `--out`/`--queries-out` contain only the remaining, unseen classes.
    #[arg(long, requires = "queries_out")]
    train_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Map,
    PrecisionAt(usize),
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        if lower == "map" {
            return Ok(Metric::Map);
        }
        match lower.strip_prefix("p@").map(str::parse::<usize>) {
            Some(Ok(t)) if t > 0 => Ok(Metric::PrecisionAt(t)),
            _ => Err(format!("unknown metric `{s}` (expected map or p@T with T >= 1)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Map => f.write_str("map"),
            Metric::PrecisionAt(t) => write!(f, "p@{t}"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_embeddings(path: &Path) -> Result<EmbeddingDataset> {
    EmbeddingDataset::load(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_database(path: &Path) -> Result<EncodedDatabase> {
    EncodedDatabase::load(path).with_context(|| format!("loading encoded database {}", path.display()))
}

fn gen_codebook(args: &GenCodebookArgs) -> Result<()> {
    let spec = CodebookSpec::new(args.m, args.d, args.k)?;
    let mut set = generate_orthonormal_codebooks(&spec);
    if args.perturb != 0.0 {
        set = perturb_codebooks(&set, args.perturb, args.seed)?;
    }
    let report = validate_orthonormality(&set, ORTHONORMAL_TOL);
    let mut out = StagedOutputs::new();
    set.save(out.stage(&args.out)?)?;
    out.commit()?;
    println!(
        "wrote {} codebooks of {}x{} ({} bits per code) to {}",
        spec.m_books,
        spec.sub_dim,
        spec.k_words,
        spec.code_bits(),
        args.out.display()
    );
    println!("max Gram residual: {:e}", report.max_gram_residual);
    println!("orthonormal: {}", report.pass);
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = load_embeddings(&args.data)?;
    let config = TrainConfig {
        feature_dim: args.dim,
        m_books: args.m,
        k_words: args.k,
        epochs: args.epochs,
        batch_size: args.batch_size,
        schedule: LrSchedule {
            initial: args.lr,
            decay: args.lr_decay,
            period: args.lr_period,
        },
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        hp: Hyperparams::new(args.r, args.u, args.lambda)?,
        seed: args.seed,
        mode: args.mode,
        include_lx: !args.no_lx,
        identity_encoder: args.identity_encoder,
    };
    info!("training on {} samples, {} classes", data.len(), data.classes());
    let (model, log) = match &args.codebook {
        Some(path) => {
            let set = CodebookSet::load(path).with_context(|| format!("loading codebooks {}", path.display()))?;
            train_with_codebooks(&data, &config, set)?
        }
        None => train(&data, &config)?,
    };

    let mut out = StagedOutputs::new();
    model.save(out.stage(&args.out)?)?;
    if let Some(log_path) = &args.log {
        let mut w = create(&out.stage(log_path)?)?;
        log.write_csv(&mut w)?;
        w.flush()?;
    }
    out.commit()?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epoch {}: loss {:.6} (clf {:.6}, ent {:.6}), train accuracy {:.4}",
            last.epoch, last.loss_total, last.loss_clf, last.loss_ent, last.train_acc
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn encode_cmd(args: &EncodeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = load_embeddings(&args.data)?;
    let db = encode_database(&model, &data)?;
    let mut out = StagedOutputs::new();
    db.save(out.stage(&args.out)?)?;
    out.commit()?;
    println!("encoded {} items into {}", db.len(), args.out.display());
    Ok(())
}

fn query_cmd(args: &QueryArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let db = load_database(&args.db)?;
    let queries = load_embeddings(&args.queries)?;
    let registry = ScorerRegistry::with_builtins();
    let searcher = Searcher::new(&model, &db, &registry, &args.scorer)?;
    info!("scoring with `{}`", searcher.scorer_name());
    let k = if args.topk == 0 { db.len() } else { args.topk };
    let rows: Vec<&[f64]> = queries.rows().collect();
    let results = rows
        .par_iter()
        .map(|e| searcher.search(e, k))
        .collect::<orthopq::Result<Vec<_>>>()?;

    let mut out = StagedOutputs::new();
    {
        let mut w = csv::Writer::from_writer(create(&out.stage(&args.out)?)?);
        w.write_record(["query_id", "rank", "db_id", "score"])?;
        for (q, ranked) in results.iter().enumerate() {
            for (rank, &(id, score)) in ranked.hits.iter().enumerate() {
                w.write_record([
                    q.to_string(),
                    (rank + 1).to_string(),
                    id.to_string(),
                    format!("{score:?}"),
                ])?;
            }
        }
        w.flush()?;
    }
    out.commit()?;
    println!(
        "ranked {} queries against {} items with `{}` into {}",
        queries.len(),
        db.len(),
        searcher.scorer_name(),
        args.out.display()
    );
    Ok(())
}

/// Reads `query_id,rank,db_id,score` rows into one ranking per query.
fn read_rankings(path: &Path, queries: usize) -> Result<Vec<Vec<usize>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no `{name}` column", path.display()))
    };
    let (qc, rc, dc) = (column("query_id")?, column("rank")?, column("db_id")?);
    let mut ranked: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<usize> {
            record
                .get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("{} row {}: bad integer", path.display(), line + 2))
        };
        let q = field(qc)?;
        if q >= queries {
            bail!("{} row {}: query id {q} but only {queries} queries", path.display(), line + 2);
        }
        ranked.entry(q).or_default().push((field(rc)?, field(dc)?));
    }
    let mut rankings = vec![Vec::new(); queries];
    for (q, mut rows) in ranked {
        rows.sort_unstable();
        rankings[q] = rows.into_iter().map(|(_, id)| id).collect();
    }
    Ok(rankings)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let db = load_database(&args.db)?;
    let queries = load_embeddings(&args.queries)?;
    let rankings = read_rankings(&args.ranking, queries.len())?;
    let ts: Vec<usize> = args
        .metrics
        .iter()
        .filter_map(|m| match m {
            Metric::PrecisionAt(t) => Some(*t),
            Metric::Map => None,
        })
        .collect();
    let pr_points = if args.pr_out.is_some() { args.pr_points.max(1) } else { 0 };
    let report = evaluate_rankings(&rankings, queries.labels(), db.labels(), &ts, pr_points)?;

    let mut rows: Vec<(String, String)> = Vec::new();
    let mut p_iter = report.precision_at.iter();
    for m in &args.metrics {
        let value = match m {
            Metric::Map => report.map,
            Metric::PrecisionAt(_) => p_iter.next().map(|&(_, p)| p).unwrap_or(0.0),
        };
        rows.push((m.to_string(), format!("{value:?}")));
    }
    rows.push(("valid_queries".into(), report.valid_queries.to_string()));
    rows.push(("excluded_queries".into(), report.excluded_queries.to_string()));
    if report.excluded_queries > 0 {
        log::warn!(
            "{} queries have no relevant database items and were excluded",
            report.excluded_queries
        );
    }

    let mut out = StagedOutputs::new();
    {
        let mut w = csv::Writer::from_writer(create(&out.stage(&args.out)?)?);
        w.write_record(["metric", "value"])?;
        for (k, v) in &rows {
            w.write_record([k, v])?;
        }
        w.flush()?;
    }
    if let Some(pr_path) = &args.pr_out {
        let mut w = csv::Writer::from_writer(create(&out.stage(pr_path)?)?);
        w.write_record(["recall", "precision"])?;
        for (r, p) in &report.pr_curve {
            w.write_record([format!("{r:?}"), format!("{p:?}")])?;
        }
        w.flush()?;
    }
    out.commit()?;
    for (k, v) in &rows {
        println!("{k}: {v}");
    }
    Ok(())
}

fn angles_cmd(args: &AnglesArgs) -> Result<()> {
    let set = match (&args.codebook, &args.model) {
        (Some(path), _) => CodebookSet::load(path).with_context(|| format!("loading codebooks {}", path.display()))?,
        (None, Some(path)) => load_model(path)?.codebooks,
        (None, None) => bail!("pass --codebook or --model"),
    };
    let hist = angular_histogram(&set, args.bin)?;
    let mut out = StagedOutputs::new();
    {
        let mut w = csv::Writer::from_writer(create(&out.stage(&args.out)?)?);
        w.write_record(["center_deg", "frequency"])?;
        for (b, f) in hist.counts.iter().enumerate() {
            w.write_record([format!("{:?}", hist.bin_center(b)), format!("{f:?}")])?;
        }
        w.flush()?;
    }
    out.commit()?;
    let peaks: Vec<String> = hist
        .nonzero_bins()
        .iter()
        .map(|&b| format!("{}", hist.bin_center(b)))
        .collect();
    println!("nonzero bins ({}): {}", peaks.len(), peaks.join(" "));
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        classes: args.classes,
        per_class: args.per_class,
        dim: args.dim,
        noise_sigma: args.sigma,
        seed: args.seed,
    })?;
    let mut out = StagedOutputs::new();
    match (&args.queries_out, &args.train_out) {
        (None, _) => {
            ds.save(out.stage(&args.out)?)?;
            println!("wrote {} samples to {}", ds.len(), args.out.display());
        }
        (Some(q_path), None) => {
            let (db, queries) = split_standard(&ds, args.queries_per_class)?;
            db.save(out.stage(&args.out)?)?;
            queries.save(out.stage(q_path)?)?;
            println!("wrote {} database and {} query samples", db.len(), queries.len());
        }
        (Some(q_path), Some(t_path)) => {
            let (train_set, db, queries) = split_unseen(&ds, args.train_fraction, args.queries_per_class)?;
            train_set.save(out.stage(t_path)?)?;
            db.save(out.stage(&args.out)?)?;
            queries.save(out.stage(q_path)?)?;
            println!(
                "wrote {} training samples ({} classes), {} unseen database and {} unseen query samples",
                train_set.len(),
                train_set.classes(),
                db.len(),
                queries.len()
            );
        }
    }
    out.commit()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::GenCodebook(a) => gen_codebook(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Query(a) => query_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Angles(a) => angles_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = config::expand_args(std::env::args_os().collect()).and_then(|args| run(Cli::parse_from(args)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
