//! `grasame`: data preparation, graph inspection, training, generation,
//! evaluation and the λ sweep.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 runtime or numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grasame::gnn::GnnFamily;
use grasame::model::Variation;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<grasame::Error> for CliError {
    fn from(e: grasame::Error) -> Self {
        use grasame::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Usage(msg),
            E::Io { .. } | E::Data(_) | E::TooLong { .. } | E::Checkpoint(_) | E::UnknownParameter(_) => {
                CliError::Data(msg)
            }
            E::Shape { .. } | E::NonFinite(_) | E::NonScalarLoss(_) | E::OutOfRange { .. } | E::Diverged(_) => {
                CliError::Runtime(msg)
            }
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "grasame", version, about = "Graph-guided self-attention for graph-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus as JSON lines.
    Synth(SynthArgs),
    /// Dump the token-level hierarchical graph of every example.
    BuildGraph(BuildGraphArgs),
    /// Train a model and write checkpoint, vocabulary, metrics log and config.
    Train(TrainArgs),
    /// Decode every example of a dataset with a trained run.
    Generate(GenerateArgs),
    /// Corpus BLEU and chrF++ of a predictions file, printed as JSON.
    Eval(EvalArgs),
    /// Retrain from the same initialisation for each λ.
    SweepLambda(SweepArgs),
    /// Print the merged configuration without running anything.
    ShowConfig(ShowConfigArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    num_examples: usize,
    #[arg(long, default_value_t = 123)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    min_triples: usize,
    #[arg(long, default_value_t = 3)]
    max_triples: usize,
}

#[derive(Args, Debug)]
struct BuildGraphArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only reverse edges for message passing.
    #[arg(long)]
    unidirectional: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariationArg {
    Base,
    Grasame,
    Var1,
    Var2,
}

impl From<VariationArg> for Variation {
    fn from(v: VariationArg) -> Self {
        match v {
            VariationArg::Base => Variation::Base,
            VariationArg::Grasame => Variation::Grasame,
            VariationArg::Var1 => Variation::Var1,
            VariationArg::Var2 => Variation::Var2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GnnArg {
    Sage,
    Gat,
    Rgcn,
}

impl From<GnnArg> for GnnFamily {
    fn from(g: GnnArg) -> Self {
        match g {
            GnnArg::Sage => GnnFamily::Sage,
            GnnArg::Gat => GnnFamily::Gat,
            GnnArg::Rgcn => GnnFamily::Rgcn,
        }
    }
}

/// Flags shared by every command that trains.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    variation: Option<VariationArg>,
    #[arg(long, value_enum)]
    gnn: Option<GnnArg>,
    /// Train only the GNN layers and the reconstruction head.
    #[arg(long)]
    freeze_base: bool,
    /// Drop the graph reconstruction term from the loss.
    #[arg(long)]
    no_gr_loss: bool,
    #[arg(long)]
    unidirectional: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output directory of a `train` run.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to `<run>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "beam_size")]
    greedy: bool,
    #[arg(long)]
    beam_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON lines with `hypothesis` and `reference` fields, as written by
    /// `generate`.
    #[arg(long)]
    predictions: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    values: Vec<f64>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct ShowConfigArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a.out, a.num_examples, a.seed, a.min_triples, a.max_triples),
        Command::BuildGraph(a) => commands::build_graph(&a.data, &a.out, a.unidirectional, a.config.as_deref()),
        Command::Train(a) => commands::train(&commands::merge(&a.flags)?),
        Command::Generate(a) => commands::generate(&a.run, a.checkpoint.as_deref(), &a.data, &a.out, a.greedy, a.beam_size),
        Command::Eval(a) => commands::eval(&a.predictions),
        Command::SweepLambda(a) => commands::sweep(&commands::merge(&a.flags)?, &a.values),
        Command::ShowConfig(a) => {
            let cfg = commands::merge(&a.flags)?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
