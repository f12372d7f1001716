//! Command-line front end: experiment configs, subcommands and report files.

pub mod commands;
pub mod config;
pub mod exit;
pub mod experiment;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use selfexplain::prompting::Condition;

pub use commands::Outcome;
use config::{ConfigArgs, ExperimentConfig};
use experiment::Experiment;

#[derive(Debug, Parser)]
#[command(
    name = "selfexplain",
    version,
    about = "Self-generated CoT exemplars for in-context learning, with evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample exemplars and generate explanation variants for them.
    Explain,
    /// Run in-context inference under one or more conditions.
    Run {
        /// Conditions to run (comma separated); defaults to the config's list.
        #[arg(long = "condition", value_delimiter = ',')]
        conditions: Vec<Condition>,
        /// Skip answer-likelihood scoring.
        #[arg(long)]
        no_score: bool,
    },
    /// Accuracy and calibration of run files.
    Eval {
        /// Run files; defaults to every run of the experiment.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Evaluate the experiment's runs for these conditions.
        #[arg(long = "condition", value_delimiter = ',')]
        conditions: Vec<Condition>,
    },
    /// Agreement categories between a self_exp run and a human_cot run.
    Compare {
        #[arg(long)]
        self_run: Option<PathBuf>,
        #[arg(long)]
        human_run: Option<PathBuf>,
    },
    /// Selection bias under fixed-correct-option exemplar settings.
    Bias {
        /// Test instances per gold label in the balanced subset.
        #[arg(long, default_value_t = 2)]
        per_label: usize,
        /// Exemplar format for the scored prompts.
        #[arg(long, default_value = "no_cot")]
        condition: Condition,
    },
    /// ROUGE-L, term F1 and length of self-explanations against human CoTs.
    Similarity,
    /// Mean probability of the gold answer given each exemplar's explanation.
    Likelihood {
        /// Which explanation variant of each exemplar to score.
        #[arg(long, default_value_t = 0)]
        variant: usize,
    },
    /// Merge run accuracies and reports into one bundle.
    Report,
}

pub fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let config = ExperimentConfig::resolve(&cli.config)?;
    let exp = Experiment::open(config)?;
    match &cli.command {
        Command::Explain => commands::explain(&exp),
        Command::Run {
            conditions,
            no_score,
        } => commands::run(&exp, conditions, exp.config.score && !no_score),
        Command::Eval { runs, conditions } => commands::eval(&exp, runs, conditions),
        Command::Compare {
            self_run,
            human_run,
        } => commands::compare(&exp, self_run.as_deref(), human_run.as_deref()),
        Command::Bias {
            per_label,
            condition,
        } => commands::bias(&exp, *per_label, *condition),
        Command::Similarity => commands::similarity(&exp),
        Command::Likelihood { variant } => commands::likelihood(&exp, *variant),
        Command::Report => commands::report(&exp),
    }
}
