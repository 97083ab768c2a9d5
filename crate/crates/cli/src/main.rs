//! `tosg`: build, preprocess, retrieve, pretrain and interpret.
//!
//! Every subcommand accepts `--config <file.toml|file.json>`; explicit flags
//! override the file, which overrides built-in defaults. Exit codes: 0
//! success, 1 runtime failure, 2 input or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use commands::ExtractMode;
use config::{resolve, usage, Flags, UsageError};

#[derive(Parser)]
#[command(name = "tosg", version, about = "Signaling-graph toolkit for single-cell cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shard a count matrix and build the transcript/protein graph.
    Build(BuildArgs),
    /// Normalize, select variable features, run PCA and form meta-cells.
    Preprocess(PreprocessArgs),
    /// Conjunctive cohort retrieval (optionally balanced and split).
    Query(QueryArgs),
    /// Retrieval with stratified case/control balancing.
    Balance(QueryArgs),
    /// Donor-level train/test split of an existing cohort.
    Split(SplitArgs),
    /// Masked-edge pretraining of the graph encoder.
    Pretrain(PretrainArgs),
    /// Train a classification head and extract the core signaling subgraph.
    InferCore(InferArgs),
    /// Write a seeded toy input set.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file with settings for this command.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    /// Count matrix: .npy (columns in mapping order) or CSV with feature-id header.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    ppi: Option<PathBuf>,
    /// CSV with entity_id,name,description,sequence.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    target_sum: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    n_hvg: Option<usize>,
    #[arg(long)]
    n_pcs: Option<usize>,
    #[arg(long)]
    metacell_group_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON object of attribute constraints, e.g. '{"tissue_general": "lung"}'.
    #[arg(long)]
    conditions: Option<String>,
    /// disease, sex or cell_type.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long, conflicts_with = "sample_size")]
    sample_ratio: Option<f64>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    shuffle: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stratified_balancing: Option<bool>,
    /// Largest admitted age-stage offset.
    #[arg(long)]
    tolerance: Option<i64>,
    /// Fill short strata by sampling matches with replacement.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    upsample: Option<bool>,
    #[arg(long, value_enum)]
    extract_mode: Option<ExtractMode>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    cap: Option<f64>,
    /// Top rare training classes up to --min-count.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    upsample_rare: Option<bool>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TextArgs {
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    text_seed: Option<u64>,
    /// Directory with names.npy, descriptions.npy, sequences.npy.
    #[arg(long)]
    text_npy_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    text: TextArgs,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_prime: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    text: TextArgs,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Pretrained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    focus: Option<String>,
    #[arg(long)]
    xi: Option<usize>,
    #[arg(long)]
    epsilon: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    genes: Option<usize>,
    #[arg(long)]
    donors: Option<usize>,
    #[arg(long)]
    cells_per_donor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn text_flags(f: &mut Flags, t: TextArgs) {
    f.set("text.dim", t.text_dim)
        .set("text.seed", t.text_seed)
        .set("text.npy_dir", t.text_npy_dir);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut f = Flags::default();
    match cli.command {
        Command::Build(a) => {
            f.set("output_dir", a.common.output_dir)
                .set("matrix", a.matrix)
                .set("attributes", a.attributes)
                .set("mapping", a.mapping)
                .set("ppi", a.ppi)
                .set("text", a.text)
                .set("shard_size", a.shard_size)
                .set("target_sum", a.target_sum);
            let cfg = resolve(&commands::BuildConfig::default(), a.common.config.as_deref(), f.take())?;
            commands::cmd_build(&cfg)
        }
        Command::Preprocess(a) => {
            f.set("output_dir", a.common.output_dir)
                .set("data_dir", a.data_dir)
                .set("shard_size", a.shard_size)
                .set("preprocess.n_hvg", a.n_hvg)
                .set("preprocess.n_pcs", a.n_pcs)
                .set("preprocess.metacell_group_size", a.metacell_group_size)
                .set("preprocess.seed", a.seed);
            let cfg = resolve(
                &commands::PreprocessRun::default(),
                a.common.config.as_deref(),
                f.take(),
            )?;
            commands::cmd_preprocess(&cfg)
        }
        Command::Query(a) => query(a, false),
        Command::Balance(a) => query(a, true),
        Command::Split(a) => {
            f.set("output_dir", a.common.output_dir)
                .set("data_dir", a.data_dir)
                .set("cohort", a.cohort)
                .set("split.test_fraction", a.test_fraction)
                .set("split.cap", a.cap)
                .set("seed", a.seed);
            let cfg = resolve(&commands::SplitRun::default(), a.common.config.as_deref(), f.take())?;
            commands::cmd_split(&cfg)
        }
        Command::Pretrain(a) => {
            f.set("output_dir", a.common.output_dir)
                .set("data_dir", a.data_dir)
                .set("cohort", a.cohort)
                .set("max_samples", a.max_samples)
                .set("model.epochs", a.epochs)
                .set("model.learning_rate", a.learning_rate)
                .set("model.mask_ratio", a.mask_ratio)
                .set("model.d", a.d)
                .set("model.d_prime", a.d_prime)
                .set("model.seed", a.seed);
            text_flags(&mut f, a.text);
            let cfg = resolve(&commands::PretrainRun::default(), a.common.config.as_deref(), f.take())?;
            commands::cmd_pretrain(&cfg)
        }
        Command::InferCore(a) => {
            f.set("output_dir", a.common.output_dir)
                .set("data_dir", a.data_dir)
                .set("cohort", a.cohort)
                .set("model", a.model)
                .set("focus", a.focus)
                .set("core.xi", a.xi)
                .set("core.epsilon", a.epsilon)
                .set("core.head.epochs", a.epochs)
                .set("core.head.learning_rate", a.learning_rate)
                .set("core.head.seed", a.seed);
            text_flags(&mut f, a.text);
            let cfg = resolve(&commands::InferRun::default(), a.common.config.as_deref(), f.take())?;
            commands::cmd_infer_core(&cfg)
        }
        Command::Synth(a) => {
            f.set("output_dir", a.output_dir)
                .set("genes", a.genes)
                .set("donors", a.donors)
                .set("cells_per_donor", a.cells_per_donor)
                .set("seed", a.seed);
            let cfg = resolve(&commands::SynthRun::default(), None, f.take())?;
            commands::cmd_synth(&cfg)
        }
    }
}

fn query(a: QueryArgs, balance: bool) -> anyhow::Result<()> {
    let conditions: Option<Value> = match a.conditions {
        Some(s) => Some(serde_json::from_str(&s).map_err(|e| usage(format!("--conditions is not valid JSON: {e}")))?),
        None => None,
    };
    let mut f = Flags::default();
    f.set("output_dir", a.common.output_dir)
        .set("data_dir", a.data_dir)
        .set("conditions", conditions)
        .set("task", a.task)
        .set("label_column", a.label_column)
        .set("sample_ratio", a.sample_ratio)
        .set("sample_size", a.sample_size)
        .set("shuffle", a.shuffle)
        .set(
            "stratified_balancing",
            a.stratified_balancing.or(balance.then_some(true)),
        )
        .set("tolerance", a.tolerance)
        .set("upsample", a.upsample)
        .set("extract_mode", a.extract_mode)
        .set("split.test_fraction", a.test_fraction)
        .set("split.cap", a.cap)
        .set("upsample_rare", a.upsample_rare)
        .set("min_count", a.min_count)
        .set("seed", a.seed);
    let mut cfg: commands::QueryRun = resolve(&commands::QueryRun::default(), a.common.config.as_deref(), f.take())?;
    if balance {
        cfg.stratified_balancing = true;
    }
    commands::cmd_query(&cfg, if balance { "balance" } else { "query" })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(c) = cause.downcast_ref::<tosg_core::Error>() {
            return if c.is_input_error() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
