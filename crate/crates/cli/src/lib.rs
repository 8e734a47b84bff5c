// SPDX-License-Identifier: MIT OR Apache-2.0

//! `kneuron` command line: world generation, training, attribution and the
//! knowledge-neuron experiments, each writing TSV/JSONL reports and a
//! manifest into an output directory.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Knobs;

const AFTER_HELP: &str = "\
Settings resolve as: command-line flag, then the --config file (flat `key = value` lines, \
`#` comments, keys spelled like the flags with underscores), then built-in defaults. \
Every run writes manifest-<command>.json next to its outputs. File formats are described in FORMATS.md.";

#[derive(Parser, Debug)]
#[command(name = "kneuron", version, about = "Knowledge-neuron experiments on a toy masked LM", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: Knobs,
}

#[derive(Args, Clone, Debug)]
pub struct ModelInputs {
    /// World file written by gen-world.
    #[arg(long)]
    pub world: PathBuf,
    /// Model checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic world: world.jsonl and queries.tsv.
    GenWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy model on every query of a world: model.ckpt.
    Train {
        /// World file written by gen-world.
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attribute the queries of known facts and refine knowledge-neuron sets.
    Attribute {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Methods to run.
        #[arg(long, value_enum, default_value_t = commands::MethodChoice::Both)]
        method: commands::MethodChoice,
        #[command(flatten)]
        common: Common,
    },
    /// Set sizes and intra/inter-relation overlap of refined sets.
    Stats {
        /// Refined IG sets.
        #[arg(long)]
        ig: PathBuf,
        /// Refined activation-baseline sets.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Suppress and amplify knowledge neurons on known facts.
    Intervene {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        ig: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Knowledge-neuron activation on prompts with and without the fact.
    ActivationStudy {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        ig: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rewrite a fact's tail through its knowledge neurons' value slots.
    Update {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Refined IG sets.
        #[arg(long)]
        ig: PathBuf,
        /// Fact to update (with --target).
        #[arg(long, requires = "target", conflicts_with = "sample")]
        fact: Option<usize>,
        /// Entity id of the new tail.
        #[arg(long)]
        target: Option<usize>,
        /// Study mode: update this many sampled known facts one at a time,
        /// each measured against the original model, with random-neuron
        /// controls. No checkpoint is written.
        #[arg(long)]
        sample: Option<usize>,
        /// Overwrite --checkpoint instead of writing a new file.
        #[arg(long)]
        in_place: bool,
        /// Compute the report without writing a checkpoint or edit log.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Zero the value slots of a relation's most frequent knowledge neurons.
    Erase {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Refined IG sets.
        #[arg(long)]
        ig: PathBuf,
        /// Relation id; repeat to erase several.
        #[arg(long, required = true)]
        relation: Vec<usize>,
        /// Study mode: measure each relation against the original model and
        /// restore it afterwards. No checkpoint is written.
        #[arg(long)]
        study: bool,
        #[arg(long)]
        in_place: bool,
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        common: Common,
    },
    /// gen-world, train, attribute, stats, intervene and activation-study in
    /// one directory, plus summary.tsv.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 when a command fails. Failures print one
/// `error<TAB>kind<TAB>message` line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let echo: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::execute(cli.command, &echo) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{}", e.kind(), msg);
            1
        }
    }
}
