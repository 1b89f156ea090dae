//! Command-line driver for the tooth reconstruction pipeline.
//!
//! Six commands cover the full loop: `synth` builds a labelled synthetic
//! dataset, `train` fits the conditioned occupancy model, `reconstruct`
//! extracts a mesh, `eval` scores a checkpoint, `ablate` compares the four
//! conditioning variants, and `assemble` arranges reconstructed teeth into
//! a jaw. Every command is configured through a flat key=value file plus
//! overrides, is deterministic given its configuration (timestamps appear
//! only in log lines), and reports failures through exit codes: 0 success,
//! 1 usage or configuration error, 2 I/O error, 3 numeric failure.

mod commands;
mod config;
mod error;

pub use error::CliError;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use config::Schema;

#[derive(Debug, Parser)]
#[command(
    name = "toothrec",
    version,
    about = "Synthetic tooth reconstruction with a conditioned occupancy model",
    propagate_version = true
)]
struct Cli {
    /// Raise log detail (-v debug, -vv trace). Logs go to stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic tooth dataset with patches and point labels.
    Synth(SynthArgs),
    /// Train the conditioned occupancy model.
    Train(TrainArgs),
    /// Extract an OBJ mesh from a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a dataset split into a JSON report.
    Eval(EvalArgs),
    /// Train and score the four conditioning variants under one budget.
    Ablate(AblateArgs),
    /// Reconstruct every requested tooth and arrange both jaws into one OBJ.
    Assemble(AssembleArgs),
    /// Print every configuration key with its default and meaning.
    Keys,
}

/// Configuration shared by all commands. Precedence, lowest to highest:
/// built-in defaults, the config file, `--set` pairs, named flags.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat key=value config file (later lines override earlier ones).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. See `toothrec keys`.
    #[arg(long = "set", value_name = "KEY=VALUE", action = ArgAction::Append)]
    set: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        self.set
            .iter()
            .map(|pair| {
                pair.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| {
                        CliError::usage(format!("--set expects key=value, got {pair:?}"))
                    })
            })
            .collect()
    }
}

fn push_override(list: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(value) = value {
        list.push((key.to_string(), value.to_string()));
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset output directory (key: out).
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Master generation seed (key: seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory (key: dataset).
    #[arg(long, value_name = "DIR")]
    dataset: Option<String>,
    /// Checkpoint output path (key: out).
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Seed for init, shuffling, and subsampling (key: seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Conditioning mode: cx, cbn, or none (key: conditioning).
    #[arg(long, value_name = "MODE")]
    conditioning: Option<String>,
    /// Feed the class embedding into the condition (key: use_class_embedding).
    #[arg(long, value_name = "BOOL")]
    use_class_embedding: Option<bool>,
    /// Train on one synthetic shape instead of a dataset (key: overfit_one).
    #[arg(long)]
    overfit_one: bool,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to load (key: checkpoint).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Universal tooth number (key: class).
    #[arg(long)]
    class: Option<u8>,
    /// Input patch PGM (key: patch).
    #[arg(long, value_name = "FILE")]
    patch: Option<String>,
    /// OBJ output path (key: out).
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Lattice cells per axis (key: resolution).
    #[arg(long)]
    resolution: Option<usize>,
    /// Extraction isolevel (key: iso).
    #[arg(long)]
    iso: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to score (key: checkpoint).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Dataset directory (key: dataset).
    #[arg(long, value_name = "DIR")]
    dataset: Option<String>,
    /// Split to score: train, val, or test (key: split).
    #[arg(long)]
    split: Option<String>,
    /// JSON report output path (key: out).
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Surface-sampling repetitions per shape (key: repetitions).
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory (key: dataset).
    #[arg(long, value_name = "DIR")]
    dataset: Option<String>,
    /// JSON report output path (key: out).
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Training seeds, comma-separated (key: seeds).
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
}

#[derive(Debug, Args)]
struct AssembleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint to load (key: checkpoint).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<String>,
    /// Combined OBJ output path (key: out).
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Per-tooth lattice cells per axis (key: resolution).
    #[arg(long)]
    resolution: Option<usize>,
}

/// Parse arguments, run the selected command, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version surface as clap "errors" that exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "seed", args.seed);
            let cfg = commands::synth::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::synth::run(&cfg)
        }
        Command::Train(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "dataset", args.dataset);
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "seed", args.seed);
            push_override(&mut overrides, "conditioning", args.conditioning);
            push_override(&mut overrides, "use_class_embedding", args.use_class_embedding);
            if args.overfit_one {
                overrides.push(("overfit_one".to_string(), "true".to_string()));
            }
            let cfg = commands::train::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::train::run(&cfg)
        }
        Command::Reconstruct(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "checkpoint", args.checkpoint);
            push_override(&mut overrides, "class", args.class);
            push_override(&mut overrides, "patch", args.patch);
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "resolution", args.resolution);
            push_override(&mut overrides, "iso", args.iso);
            let cfg =
                commands::reconstruct::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::reconstruct::run(&cfg)
        }
        Command::Eval(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "checkpoint", args.checkpoint);
            push_override(&mut overrides, "dataset", args.dataset);
            push_override(&mut overrides, "split", args.split);
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "repetitions", args.repetitions);
            let cfg = commands::eval::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::eval::run(&cfg)
        }
        Command::Ablate(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "dataset", args.dataset);
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "seeds", args.seeds);
            let cfg = commands::ablate::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::ablate::run(&cfg)
        }
        Command::Assemble(args) => {
            let mut overrides = args.common.overrides()?;
            push_override(&mut overrides, "checkpoint", args.checkpoint);
            push_override(&mut overrides, "out", args.out);
            push_override(&mut overrides, "resolution", args.resolution);
            let cfg =
                commands::assemble::SCHEMA.resolve(args.common.config.as_deref(), &overrides)?;
            commands::assemble::run(&cfg)
        }
        Command::Keys => {
            print_keys();
            Ok(())
        }
    }
}

fn print_keys() {
    let schemas: [&Schema; 6] = [
        &commands::synth::SCHEMA,
        &commands::train::SCHEMA,
        &commands::reconstruct::SCHEMA,
        &commands::eval::SCHEMA,
        &commands::assemble::SCHEMA,
        &commands::ablate::SCHEMA,
    ];
    let mut text = String::new();
    for schema in schemas {
        text.push_str(&format!("[{}]\n", schema.command));
        for field in schema.fields {
            let default = if field.default.is_empty() { "(empty)" } else { field.default };
            text.push_str(&format!(
                "  {:<22} default {:<12} {}\n",
                field.key, default, field.help
            ));
        }
        text.push('\n');
    }
    commands::print_stdout(&text);
}
