mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "intembed", version, about = "Integer embedding experiments on OEIS sequences")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for corpus and results.
    #[arg(long, global = true, env = "INTEMBED_DATA")]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a stripped dump, split it and write the corpus directory.
    Ingest(IngestArgs),
    /// Train an embedding model on the train split.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Linear probes for arithmetic properties.
    Probe(ProbeArgs),
    /// Downstream tasks.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Render the records of a results directory as tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<u64>,
    /// JSONL file for the statistics record.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCommon {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output embedding table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// JSONL file for the training record.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    Lsa {
        #[command(flatten)]
        common: TrainCommon,
        /// Number of singular dimensions.
        #[arg(long)]
        k: Option<usize>,
    },
    Skipgram {
        #[command(flatten)]
        common: TrainCommon,
        /// Compose vectors from digit n-grams.
        #[arg(long, overrides_with = "no_subword")]
        subword: bool,
        #[arg(long)]
        no_subword: bool,
    },
    Lstm {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long)]
        hidden: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TableArgs {
    /// Table written by `train`.
    #[arg(long = "table")]
    tables: Vec<PathBuf>,
    /// Third-party text vectors; only integer rows are kept.
    #[arg(long = "pretrained")]
    pretrained: Vec<PathBuf>,
    /// Pretrained files have no `<count> <dim>` header.
    #[arg(long)]
    headerless: bool,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    tables: TableArgs,
    /// Also probe the concatenation of two tables.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    concat: Vec<PathBuf>,
    /// Comma-separated properties: even, div3, div4, prime, value, digits.
    #[arg(long, value_delimiter = ',', default_value = "even,div3,div4,prime")]
    properties: Vec<String>,
    /// Permute training labels with this seed (control run).
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Lstm,
    Search,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Full,
    Last5,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Next-term prediction, scored by precision at 1 and k.
    Complete {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Hold out the last term of every test-split sequence.
        #[arg(long, conflicts_with = "problems", required_unless_present = "problems")]
        test_split: bool,
        #[arg(long)]
        problems: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// LSTM checkpoint (for `--method lstm`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiple-choice analogies by vector offset.
    Analogy {
        #[command(flatten)]
        tables: TableArgs,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nearest neighbours of a seed-set centroid.
    Expand {
        #[command(flatten)]
        tables: TableArgs,
        /// Comma-separated seed integers.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Candidate integers `lo:hi`; defaults to the table vocabulary.
        #[arg(long)]
        range: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<intembed::Error>() {
            return match e {
                intembed::Error::Io(_) | intembed::Error::InvalidInput(_) => 2,
                intembed::Error::Parse { .. } | intembed::Error::Format(_) => 3,
                intembed::Error::Numerical(_) => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = cli.data_dir {
        config.paths.data_dir = Some(dir);
    }
    match cli.command {
        Command::Ingest(args) => commands::ingest(&mut config, args),
        Command::Train(cmd) => commands::train(&mut config, cmd),
        Command::Probe(args) => commands::probe(&mut config, args),
        Command::Eval(cmd) => commands::eval(&mut config, cmd),
        Command::Report(args) => commands::report(&config, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
