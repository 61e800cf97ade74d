use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
mod commands;
mod config;
mod report;

use config::{DataOpts, FileConfig, ModelOpts, NullOpts, SelectOpts, SynthOpts, TrainOpts};

/// Neural feature selection for learning-to-rank datasets.
#[derive(Parser, Debug)]
#[command(name = "nfs-rank", version)]
struct Cli {
    /// TOML file with `seed`, `threads` and [data] [model] [train] [null]
    /// [select] [synth] tables; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress at info level (RUST_LOG overrides)
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reranker and write a checkpoint plus an epoch log
    Train(TrainCmd),
    /// Dump per-document saliency maps of a trained model
    Saliency(SaliencyCmd),
    /// Mine salient feature groups and prune them against the null model
    Mine(MineCmd),
    /// Select features by clustering significant saliency groups
    SelectNfs(NfsCmd),
    /// Greedy selection with single-feature nDCG and Kendall redundancy
    SelectGas(GasCmd),
    /// Spearman single-linkage clustering selection
    SelectHcas(HcasCmd),
    /// Greedy selection with importances read from a file
    SelectXgas(XgasCmd),
    /// Retrain on feature subsets and report test nDCG@k
    Eval(EvalCmd),
    /// Write a synthetic dataset with known feature roles
    Synth(SynthCmd),
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Epoch log (JSONL); defaults to `<out>.log.jsonl`
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save the checkpoint every N epochs
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Report records (JSONL)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SaliencyCmd {
    /// Trained checkpoint
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    null: NullOpts,
    /// Dump file: `qid<TAB>doc<TAB>v1,...,vd`
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MineCmd {
    #[arg(long)]
    seed: Option<u64>,
    /// Trained checkpoint
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    null: NullOpts,
    /// Surviving groups: `members<TAB>count<TAB>exceedances`
    #[arg(long)]
    out: PathBuf,
    /// All mined groups before pruning: `members<TAB>count`
    #[arg(long)]
    all_groups: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NfsCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    null: NullOpts,
    #[command(flatten)]
    select: SelectOpts,
    /// Use this trained checkpoint instead of training
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Selected features, one 1-based id per line
    #[arg(long)]
    out: PathBuf,
    /// Cluster report; defaults to `<out>.clusters.tsv`
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Surviving groups report
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GasCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    select: SelectOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HcasCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    select: SelectOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct XgasCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    select: SelectOpts,
    /// `fid<TAB>importance` lines, 1-based ids
    #[arg(long)]
    importances: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataOpts,
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    train: TrainOpts,
    /// nDCG cutoff
    #[arg(long = "cutoff", visible_alias = "k")]
    cutoff: Option<usize>,
    /// Feature subset as `[method=]path[@percent]`; repeatable
    #[arg(long)]
    features: Vec<String>,
    /// External ranker scores as `[method=]path`, one score per test
    /// document; repeatable
    #[arg(long)]
    scores: Vec<String>,
    /// Skip the all-features row
    #[arg(long)]
    no_full: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    synth: SynthOpts,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    test_out: Option<PathBuf>,
    /// Ground truth: `fid<TAB>role[<TAB>parent]`
    #[arg(long)]
    roles: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl From<nfs_core::Error> for CliError {
    fn from(e: nfs_core::Error) -> Self {
        use nfs_core::Error as E;
        let code = match &e {
            E::InvalidArgument(_) => EXIT_USAGE,
            E::Numerical(_) | E::Divergence { .. } => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    let threads = cli.threads.or(file.threads);
    match cli.command {
        Command::Train(c) => commands::train(c, &file, threads),
        Command::Saliency(c) => commands::saliency(c, &file, threads),
        Command::Mine(c) => commands::mine(c, &file, threads),
        Command::SelectNfs(c) => commands::select_nfs(c, &file, threads),
        Command::SelectGas(c) => commands::select_gas(c, &file, threads),
        Command::SelectHcas(c) => commands::select_hcas(c, &file, threads),
        Command::SelectXgas(c) => commands::select_xgas(c, &file, threads),
        Command::Eval(c) => commands::eval(c, &file, threads),
        Command::Synth(c) => commands::synth(c, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
