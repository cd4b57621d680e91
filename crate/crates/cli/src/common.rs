use std::fmt;
use std::path::{Path, PathBuf};

use avem_core::annotator::{AnnotatorClient, AnnotatorError, FixtureReplay, Recorder, SyntheticAnnotator};
use avem_core::io::IoError;
use avem_core::scorer::{ScorerError, TokenStreams};
use avem_core::train::TrainError;
use clap::Args;
use serde::de::DeserializeOwned;

/// Failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing files or malformed inputs.
    Validation(String),
    /// Anything that goes wrong after inputs were accepted.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "failed: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Errors while reading inputs are validation errors; the message keeps path and line.
pub fn input_err(e: IoError) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn train_input_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Record { .. } | TrainError::EmptyDataset | TrainError::Io(_) => CliError::Validation(e.to_string()),
        TrainError::Checkpoint(_) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random choice; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with subcommand settings (flat keys; unknown keys are rejected).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Validate inputs and settings, then exit without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Replay annotator responses from DIR/fixtures.jsonl instead of calling the annotator.
    #[arg(long, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,
}

/// Parses the `--config` file, or the default settings when absent.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(1);
        CliError::invalid(format!("{}:{line}: {}", path.display(), e.message()))
    })
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::invalid(format!("{}: no such file", path.display())))
    }
}

/// Creates the output directory unless it already exists.
pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

/// The annotator for this run: a replay when `--fixtures` is given,
/// otherwise the synthetic annotator, optionally recording its exchanges.
pub enum Annotator {
    Replay(FixtureReplay),
    Live(Recorder<SyntheticAnnotator>),
}

impl Annotator {
    pub fn open(fixtures: Option<&Path>) -> CliResult<Self> {
        match fixtures {
            Some(dir) => {
                let replay = FixtureReplay::load_dir(dir).map_err(|e| match e {
                    AnnotatorError::Io(e) => input_err(e),
                    other => CliError::invalid(other.to_string()),
                })?;
                log::info!("replaying {} recorded annotator responses", replay.len());
                Ok(Annotator::Replay(replay))
            }
            None => Ok(Annotator::Live(Recorder::new(SyntheticAnnotator))),
        }
    }

    pub fn client(&self) -> &dyn AnnotatorClient {
        match self {
            Annotator::Replay(r) => r,
            Annotator::Live(r) => r,
        }
    }

    /// Saves recorded exchanges; a replay has nothing new to save.
    pub fn save_recording(&self, dir: &Path) -> CliResult<()> {
        match self {
            Annotator::Replay(_) => Err(CliError::invalid("--record-fixtures cannot be combined with --fixtures")),
            Annotator::Live(r) => {
                ensure_dir(dir)?;
                r.save_dir(dir).map_err(CliError::runtime)
            }
        }
    }
}

/// Drops prompt words from the front until the sequence fits `max_len`.
pub fn fit_to_length(mut ts: TokenStreams, max_len: usize) -> TokenStreams {
    let fixed = ts.audio_tokens.len() + ts.video_tokens.len() + 1 + ts.response_tokens.len();
    let room = max_len.saturating_sub(fixed);
    if ts.prompt_tokens.len() > room {
        let cut = ts.prompt_tokens.len() - room;
        ts.prompt_tokens.drain(..cut);
    }
    ts
}

pub fn scorer_err(e: ScorerError) -> CliError {
    CliError::runtime(e)
}
