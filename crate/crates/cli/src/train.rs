use std::path::PathBuf;

use avem_core::io;
use avem_core::prefdata::load_records;
use avem_core::scorer::Checkpoint;
use avem_core::text::Vocabulary;
use avem_core::train::{
    checkpoint_train_config, read_history, record_vocabulary, tokenize_records, train_loop, write_history, FlatTrainConfig, LoopOptions,
    PrefMetrics, StepLog, TrainConfig, TrainData, TrainState,
};
use avem_core::world::AvStore;
use clap::Args;

use crate::common::{ensure_dir, input_err, load_config, require_file, train_input_err, CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preference records written by `pref-build`.
    #[arg(long, value_name = "FILE")]
    pub records: PathBuf,
    /// Clip store holding chosen and rejected inputs.
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Output directory for history, checkpoints and the final model.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint; history.jsonl beside it is carried over.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Evaluate on the whole record set every N optimizer steps.
    #[arg(long, value_name = "N")]
    pub eval_every: Option<u64>,
}

struct Setup {
    cfg: TrainConfig,
    vocab: Vocabulary,
    state: Option<TrainState>,
    history: Vec<StepLog>,
    evals: Vec<PrefMetrics>,
}

fn fresh(a: &TrainArgs, flat: &FlatTrainConfig, records: &[avem_core::prefdata::PreferenceRecord]) -> CliResult<Setup> {
    let mut cfg = flat.resolve().map_err(train_input_err)?;
    let vocab = record_vocabulary(records);
    if vocab.len() > cfg.scorer.text_vocab {
        log::info!("text vocabulary raised from {} to {}", cfg.scorer.text_vocab, vocab.len());
        cfg.scorer.text_vocab = vocab.len();
    }
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    Ok(Setup { cfg, vocab, state: None, history: Vec::new(), evals: Vec::new() })
}

fn resumed(a: &TrainArgs, flat: &FlatTrainConfig, path: &std::path::Path) -> CliResult<Setup> {
    require_file(path)?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let mut cfg = match &a.common.config {
        Some(_) => flat.resolve().map_err(train_input_err)?,
        None => checkpoint_train_config(&ck).ok_or_else(|| CliError::invalid(format!("{}: no stored training configuration", path.display())))?,
    };
    cfg.scorer = ck.config.clone();
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    let state = TrainState::from_checkpoint(&ck).map_err(train_input_err)?;
    let dir = path.parent().unwrap_or(std::path::Path::new("."));
    let history_path = dir.join("history.jsonl");
    let history = if history_path.is_file() {
        read_history(&history_path).map_err(input_err)?.into_iter().filter(|l| l.micro <= state.micro).collect()
    } else {
        log::warn!("{}: not found, history starts at step {}", history_path.display(), state.step);
        Vec::new()
    };
    let evals_path = dir.join("evals.jsonl");
    let evals = if evals_path.is_file() {
        io::read_jsonl::<PrefMetrics>(&evals_path).map_err(input_err)?.into_iter().filter(|m| m.step < state.step).collect()
    } else {
        Vec::new()
    };
    Ok(Setup { cfg, vocab: Vocabulary::from(ck.vocabulary.clone()), state: Some(state), history, evals })
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let flat: FlatTrainConfig = load_config(a.common.config.as_deref())?;
    require_file(&a.records)?;
    require_file(&a.store)?;
    let records = load_records(&a.records).map_err(input_err)?;
    let store = AvStore::load(&a.store).map_err(input_err)?;
    let mut setup = match &a.resume {
        Some(p) => resumed(&a, &flat, p)?,
        None => fresh(&a, &flat, &records)?,
    };
    let toks = tokenize_records(&records, &store, &setup.vocab).map_err(train_input_err)?;
    let longest = toks
        .iter()
        .flat_map(|t| [&t.w, &t.vr, &t.er, &t.w_neg])
        .map(|ts| ts.audio_tokens.len() + ts.video_tokens.len() + 1 + ts.prompt_tokens.len() + ts.response_tokens.len())
        .max()
        .unwrap_or(0);
    if longest > setup.cfg.scorer.max_len {
        if setup.state.is_some() {
            return Err(CliError::invalid(format!("records need {longest} positions but the checkpoint allows {}", setup.cfg.scorer.max_len)));
        }
        log::info!("max_len raised from {} to {longest}", setup.cfg.scorer.max_len);
        setup.cfg.scorer.max_len = longest;
    }
    setup.cfg.validate().map_err(train_input_err)?;
    if a.common.dry_run {
        return Ok(());
    }
    let state = match setup.state.take() {
        Some(s) => s,
        None => TrainState::init(&setup.cfg).map_err(CliError::runtime)?,
    };
    let data = TrainData::prepare(&state.models, toks).map_err(CliError::runtime)?;
    ensure_dir(&a.out)?;
    let opts = LoopOptions { out_dir: Some(a.out.clone()), eval_every: a.eval_every, vocabulary: Some(setup.vocab.clone()) };
    let outcome = train_loop(&setup.cfg, &data, state, &opts).map_err(CliError::runtime)?;
    let mut history = setup.history;
    history.extend(outcome.history);
    let mut evals = setup.evals;
    evals.extend(outcome.evals);
    let w = |e| CliError::runtime(e);
    write_history(&a.out.join("history.jsonl"), &history).map_err(w)?;
    io::write_jsonl(&a.out.join("evals.jsonl"), &evals).map_err(w)?;
    io::write_json(&a.out.join("config.json"), &setup.cfg).map_err(w)?;
    outcome.state.checkpoint(&setup.cfg, Some(&setup.vocab)).save(&a.out.join("final.json")).map_err(CliError::runtime)?;
    if let Some(last) = history.last() {
        log::info!("step {} loss {:.6} preference accuracy {:.3}", last.step, last.loss, last.preference_accuracy);
    }
    Ok(())
}
