//! The `causal-themes` command-line pipeline.
//!
//! A project is a directory (see [`project`]) that moves through the
//! firewall stages one command at a time:
//!
//! ```text
//! split → summarize → propose-themes → [edit-themes] → freeze-themes
//!       → release-holdout → classify, score-machine, serve
//!       → register → reveal → test, estimate, completeness, tradeoff, report
//! ```
//!
//! [`simulate`] and [`synthetic`] provide a scripted LLM and a corpus with
//! known ground truth, used for the shipped fixtures and for testing.

pub mod commands;
pub mod config;
pub mod project;
pub mod simulate;
pub mod synthetic;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Runtime;
use config::Config;
use project::Project;

#[derive(Debug, Parser)]
#[command(name = "causal-themes", version, about = "Discover and test differences between two groups of documents")]
pub struct Cli {
    /// Project directory.
    #[arg(long, short = 'C', default_value = ".", global = true)]
    pub project: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub permutations: Option<usize>,
    #[arg(long, global = true)]
    pub bootstrap_draws: Option<usize>,
    /// accuracy, f1, precision or recall.
    #[arg(long, global = true, value_parser = commands::metric_from_str)]
    pub metric: Option<causal_themes::Metric>,
    /// Answer LLM requests from a recorded transcript directory.
    #[arg(long, global = true, value_name = "TRANSCRIPT_DIR")]
    pub replay: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a default configuration file.
    Init,
    /// Draw the hold-out and seal its labels.
    Split,
    /// Ask the LLM how the training groups differ.
    Summarize,
    /// Ask the LLM for scored themes.
    ProposeThemes,
    /// Apply drop/modify/add edits from a JSON file.
    EditThemes { edits: PathBuf },
    /// Commit to the themes.
    FreezeThemes,
    /// Make hold-out texts available to the LLM.
    ReleaseHoldout,
    /// Reverse-classify the hold-out with the LLM.
    Classify,
    /// Machine-score the hold-out on the frozen themes.
    ScoreMachine,
    /// Run the blinded annotation service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Register digests of predictions and scores.
    Register,
    /// Reveal the hold-out labels.
    Reveal,
    /// Permutation test of the reverse classification.
    Test,
    /// Theme effect estimates and the Wald test.
    Estimate,
    /// Completeness of the themes.
    Completeness,
    /// Variance against number of human scores.
    Tradeoff,
    /// All reports.
    Report,
    /// Check the journal's hash chain.
    VerifyAudit,
}

impl Cli {
    /// Project configuration with command-line overrides applied.
    pub fn config(&self) -> anyhow::Result<Config> {
        let mut config = Config::load(&self.project)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(b) = self.permutations {
            config.test.permutations = b;
        }
        if let Some(d) = self.bootstrap_draws {
            config.estimate.bootstrap_draws = d;
        }
        if let Some(m) = self.metric {
            config.test.metric = m;
        }
        if self.replay.is_some() {
            config.llm.provider = causal_themes::llm::Provider::Replay;
        }
        config.validate()?;
        Ok(config)
    }
}

/// Runs one command and returns its summary text.
pub fn run(cli: Cli, mut runtime: Runtime) -> anyhow::Result<String> {
    let project = Project::open(&cli.project, cli.config()?);
    if runtime.replay.is_none() {
        runtime.replay = cli.replay.clone();
    }
    use commands as c;
    match &cli.command {
        Command::Init => c::init(&project),
        Command::Split => c::split(&project),
        Command::Summarize => c::summarize(&project, &mut runtime),
        Command::ProposeThemes => c::propose(&project, &mut runtime),
        Command::EditThemes { edits } => c::edit_themes(&project, edits),
        Command::FreezeThemes => c::freeze(&project),
        Command::ReleaseHoldout => c::release_holdout(&project),
        Command::Classify => c::classify(&project, &mut runtime),
        Command::ScoreMachine => c::score_machine(&project, &mut runtime),
        Command::Serve { bind } => c::serve(&project, bind.as_deref()),
        Command::Register => c::register(&project),
        Command::Reveal => c::reveal(&project),
        Command::Test => c::test(&project),
        Command::Estimate => c::estimate(&project),
        Command::Completeness => c::completeness(&project),
        Command::Tradeoff => c::tradeoff(&project),
        Command::Report => c::report(&project),
        Command::VerifyAudit => c::verify_audit(&project),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I, runtime: Runtime) -> anyhow::Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("causal-themes")).chain(args.into_iter().map(Into::into));
    run(Cli::try_parse_from(argv)?, runtime)
}
