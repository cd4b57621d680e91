use std::path::{Path, PathBuf};

use avem_core::bench::BenchmarkItem;
use avem_core::eval::{choice_streams, contrastive_decode, evaluate_benchmark, predict_by_likelihood, Prediction};
use avem_core::io;
use avem_core::prefdata::{Codebooks, DiffusionSchedule};
use avem_core::scorer::{Checkpoint, Model, ModelSet, TokenStreams};
use avem_core::text::Vocabulary;
use avem_core::world::AvStore;
use clap::{Args, ValueEnum};
use serde::Deserialize;

use crate::common::{ensure_dir, fit_to_length, input_err, load_config, require_file, CliError, CliResult, Common};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Policy,
    Reference,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark items written by `bench-build`.
    #[arg(long, value_name = "FILE")]
    pub items: PathBuf,
    /// Model outputs to score (JSONL with item_id and raw_output); choices are re-extracted.
    #[arg(long, value_name = "FILE", conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Predict each item by choice likelihood under this checkpoint.
    #[arg(long, value_name = "FILE", requires = "store")]
    pub checkpoint: Option<PathBuf>,
    /// Clip store, needed with --checkpoint.
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Which model of the checkpoint predicts.
    #[arg(long, value_enum, default_value = "policy")]
    pub model: Which,
    /// Output directory for report.json (and predictions.jsonl when predicting).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub seed: u64,
    /// Contrastive decoding weight; plain likelihood when absent.
    pub contrastive_gamma: Option<f64>,
    /// Forward-diffusion step of the contrastive input.
    pub noise_step: usize,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self { seed: 0, contrastive_gamma: None, noise_step: DiffusionSchedule::DEFAULT_STEP }
    }
}

/// Loads a checkpoint's model set and vocabulary.
pub fn load_checkpoint(path: &Path) -> CliResult<(ModelSet, Vocabulary)> {
    require_file(path)?;
    let ck = Checkpoint::load(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let models = ck.to_models().map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok((models, Vocabulary::from(ck.vocabulary)))
}

/// Scoring inputs for every choice of `item`, shortened to the model's context.
pub fn item_streams(item: &BenchmarkItem, store: &AvStore, vocab: &Vocabulary, max_len: usize) -> CliResult<Vec<TokenStreams>> {
    let av = store.get(&item.video_ref).ok_or_else(|| CliError::invalid(format!("item {}: clip {} missing from store", item.id, item.video_ref)))?;
    Ok(choice_streams(item, av, vocab).into_iter().map(|ts| fit_to_length(ts, max_len)).collect())
}

fn predict(items: &[BenchmarkItem], store: &AvStore, models: &ModelSet, model: &Model, vocab: &Vocabulary, file: &EvalFile, seed: u64) -> CliResult<Vec<Prediction>> {
    let max_len = model.config().max_len;
    let codebooks = Codebooks::from_backbone(models.reference.backbone());
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let streams = item_streams(item, store, vocab, max_len)?;
        let idx = match file.contrastive_gamma {
            Some(g) => contrastive_decode(model, &streams, g, file.noise_step, &codebooks, avem_core::world::derive_seed(seed, &item.id))
                .map_err(CliError::runtime)?
                .index,
            None => predict_by_likelihood(model, &streams).map_err(CliError::runtime)?,
        };
        out.push(Prediction { item_id: item.id.clone(), raw_output: item.choices[idx].clone(), extracted_index: Some(idx) });
    }
    Ok(out)
}

pub fn run(a: EvalArgs) -> CliResult<()> {
    let file: EvalFile = load_config(a.common.config.as_deref())?;
    if let Some(g) = file.contrastive_gamma {
        if !g.is_finite() || g < 0.0 {
            return Err(CliError::invalid(format!("contrastive_gamma must be finite and non-negative, got {g}")));
        }
    }
    let seed = a.common.seed.unwrap_or(file.seed);
    require_file(&a.items)?;
    let items: Vec<BenchmarkItem> = io::read_jsonl(&a.items).map_err(input_err)?;
    if items.is_empty() {
        return Err(CliError::invalid(format!("{}: no items", a.items.display())));
    }
    let predictions = match (&a.predictions, &a.checkpoint) {
        (Some(p), None) => {
            require_file(p)?;
            let raw: Vec<Prediction> = io::read_jsonl(p).map_err(input_err)?;
            let by_id: std::collections::BTreeMap<&str, &BenchmarkItem> = items.iter().map(|it| (it.id.as_str(), it)).collect();
            let mut preds = Vec::with_capacity(raw.len());
            for r in raw {
                let item = by_id.get(r.item_id.as_str()).ok_or_else(|| CliError::invalid(format!("{}: unknown item {}", p.display(), r.item_id)))?;
                preds.push(Prediction::from_output(item, r.raw_output));
            }
            if a.common.dry_run {
                return Ok(());
            }
            preds
        }
        (None, Some(ck)) => {
            let store_path = a.store.as_ref().ok_or_else(|| CliError::invalid("--checkpoint needs --store"))?;
            require_file(store_path)?;
            let store = AvStore::load(store_path).map_err(input_err)?;
            let (models, vocab) = load_checkpoint(ck)?;
            for item in &items {
                item_streams(item, &store, &vocab, usize::MAX)?;
            }
            if a.common.dry_run {
                return Ok(());
            }
            let model = match a.model {
                Which::Policy => &models.policy,
                Which::Reference => &models.reference,
            };
            predict(&items, &store, &models, model, &vocab, &file, seed)?
        }
        _ => return Err(CliError::invalid("give either --predictions or --checkpoint")),
    };
    let report = evaluate_benchmark(&items, &predictions).map_err(CliError::runtime)?;
    ensure_dir(&a.out)?;
    if a.checkpoint.is_some() {
        io::write_jsonl(&a.out.join("predictions.jsonl"), &predictions).map_err(CliError::runtime)?;
    }
    io::write_json(&a.out.join("report.json"), &report).map_err(CliError::runtime)?;
    log::info!("average accuracy {:.4}", report.average_accuracy);
    Ok(())
}
