use std::path::PathBuf;

use avem_core::bench::{preference_sources, CaptionedVideo};
use avem_core::io;
use avem_core::prefdata::{build_preference_set, save_records, BuildConfig, Codebooks, NegativeSamplingStrategy, PoolItem};
use avem_core::scorer::init_models;
use avem_core::train::TrainConfig;
use avem_core::world::AvStore;
use clap::Args;
use serde::Deserialize;

use crate::common::{ensure_dir, input_err, load_config, require_file, scorer_err, Annotator, CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct PrefArgs {
    #[command(flatten)]
    pub common: Common,
    /// Captioned clips written by `bench-build`.
    #[arg(long, value_name = "FILE")]
    pub captions: PathBuf,
    /// Clip store the captions refer to.
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Save every annotator exchange to DIR/fixtures.jsonl for later replay.
    #[arg(long, value_name = "DIR")]
    pub record_fixtures: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefFile {
    pub seed: u64,
    /// random_tensor, random_video, different_emotion, diffuse or diffuse:<step>.
    pub strategy: String,
    pub max_attempts: usize,
    /// Training profile whose scorer supplies the diffusion codebooks.
    pub profile: String,
}

impl Default for PrefFile {
    fn default() -> Self {
        let b = BuildConfig::default();
        Self { seed: b.seed, strategy: b.strategy.name().to_string(), max_attempts: b.max_attempts, profile: "toy".into() }
    }
}

pub fn run(a: PrefArgs) -> CliResult<()> {
    let file: PrefFile = load_config(a.common.config.as_deref())?;
    let strategy = NegativeSamplingStrategy::parse(&file.strategy)
        .ok_or_else(|| CliError::invalid(format!("unknown negative sampling strategy `{}`", file.strategy)))?;
    let profile = TrainConfig::profile(&file.profile).ok_or_else(|| CliError::invalid(format!("unknown profile `{}`", file.profile)))?;
    require_file(&a.captions)?;
    require_file(&a.store)?;
    let captions: Vec<CaptionedVideo> = io::read_jsonl(&a.captions).map_err(input_err)?;
    let store = AvStore::load(&a.store).map_err(input_err)?;
    let annotator = Annotator::open(a.common.fixtures.as_deref())?;
    if a.common.dry_run {
        return Ok(());
    }
    let models = init_models(&profile.scorer).map_err(scorer_err)?;
    let codebooks = Codebooks::from_backbone(models.reference.backbone());
    let pool: Vec<PoolItem> = captions
        .iter()
        .filter(|c| c.verification.keep && store.get(&c.video_ref).is_some())
        .map(|c| PoolItem { av_ref: c.video_ref.clone(), emotion: c.pair.gt_emotion })
        .collect();
    let sources = preference_sources(&captions);
    let cfg = BuildConfig { strategy, max_attempts: file.max_attempts, seed: a.common.seed.unwrap_or(file.seed) };
    let set = build_preference_set(&sources, &store, &pool, annotator.client(), &codebooks, &cfg);
    let mut merged = store;
    merged.extend(set.rejected);
    let dir = &a.out;
    ensure_dir(dir)?;
    save_records(&dir.join("records.jsonl"), &set.records).map_err(CliError::runtime)?;
    merged.save(&dir.join("store.jsonl")).map_err(CliError::runtime)?;
    io::write_jsonl(&dir.join("quarantine.jsonl"), &set.quarantine).map_err(CliError::runtime)?;
    if let Some(rec) = &a.record_fixtures {
        annotator.save_recording(rec)?;
    }
    log::info!("{} records, {} quarantined", set.records.len(), set.quarantine.len());
    Ok(())
}
