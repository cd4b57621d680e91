use std::path::PathBuf;

use avem_core::bench::{build_benchmark, compute_statistics, render_table, BenchConfig};
use avem_core::io;
use avem_core::world::{synthesize_corpus, AvStore, CorpusSpec, ManifestEntry};
use clap::Args;
use serde::Deserialize;

use crate::common::{ensure_dir, input_err, load_config, require_file, Annotator, CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Manifest of clips (JSONL with video_ref, gt_emotion, subtitle).
    #[arg(long, value_name = "FILE", requires = "store", conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Clip store (JSONL with av_ref, audio_tokens, video_tokens).
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Generate a synthetic corpus of this many clips instead of reading one.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Save every annotator exchange to DIR/fixtures.jsonl for later replay.
    #[arg(long, value_name = "DIR")]
    pub record_fixtures: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchFile {
    pub seed: u64,
    pub random_guessers: usize,
    pub annotator_guesser: bool,
    pub p_express: f64,
    pub p_silent: f64,
}

impl Default for BenchFile {
    fn default() -> Self {
        let b = BenchConfig::default();
        let c = CorpusSpec::default();
        Self { seed: b.seed, random_guessers: b.random_guessers, annotator_guesser: b.annotator_guesser, p_express: c.p_express, p_silent: c.p_silent }
    }
}

pub fn run(a: BenchArgs) -> CliResult<()> {
    let file: BenchFile = load_config(a.common.config.as_deref())?;
    let seed = a.common.seed.unwrap_or(file.seed);
    for (name, p) in [("p_express", file.p_express), ("p_silent", file.p_silent)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::invalid(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let (manifest, store, synthetic) = match (&a.manifest, &a.store, a.synthetic) {
        (Some(m), Some(s), None) => {
            require_file(m)?;
            require_file(s)?;
            let manifest: Vec<ManifestEntry> = io::read_jsonl(m).map_err(input_err)?;
            (manifest, AvStore::load(s).map_err(input_err)?, false)
        }
        (None, _, Some(n)) => {
            let spec = CorpusSpec { videos: n, p_express: file.p_express, p_silent: file.p_silent };
            let c = synthesize_corpus(&spec, seed);
            (c.manifest, c.store, true)
        }
        _ => return Err(CliError::invalid("give either --manifest with --store, or --synthetic N")),
    };
    if let Some(missing) = manifest.iter().find(|e| store.get(&e.video_ref).is_none()) {
        log::warn!("{}: clip missing from store", missing.video_ref);
    }
    let annotator = Annotator::open(a.common.fixtures.as_deref())?;
    if a.common.dry_run {
        return Ok(());
    }
    let cfg = BenchConfig { seed, random_guessers: file.random_guessers, annotator_guesser: file.annotator_guesser };
    let out = build_benchmark(&manifest, &store, annotator.client(), &cfg);
    let report = compute_statistics(&out.items, Some(&manifest));
    let dir = &a.out;
    ensure_dir(dir)?;
    let w = |e| CliError::runtime(e);
    if synthetic {
        io::write_jsonl(&dir.join("manifest.jsonl"), &manifest).map_err(w)?;
        store.save(&dir.join("store.jsonl")).map_err(w)?;
    }
    io::write_jsonl(&dir.join("items.jsonl"), &out.items).map_err(w)?;
    io::write_jsonl(&dir.join("removed.jsonl"), &out.removed_by_filter).map_err(w)?;
    io::write_jsonl(&dir.join("captions.jsonl"), &out.captioned).map_err(w)?;
    io::write_jsonl(&dir.join("rejects.jsonl"), &out.rejects).map_err(w)?;
    io::write_json(&dir.join("stats.json"), &report).map_err(w)?;
    io::write_atomic(&dir.join("table.txt"), render_table(&report).as_bytes()).map_err(w)?;
    if let Some(rec) = &a.record_fixtures {
        annotator.save_recording(rec)?;
    }
    log::info!("{} items, {} removed by the text-only filter", out.items.len(), out.removed_by_filter.len());
    Ok(())
}
