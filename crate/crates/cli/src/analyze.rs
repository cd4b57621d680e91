use std::path::PathBuf;

use avem_core::bench::BenchmarkItem;
use avem_core::eval::{adversarial_shift, attention_comparison, svg, ShiftReport, SwapTarget};
use avem_core::io;
use avem_core::world::{AvInput, AvStore};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::common::{ensure_dir, input_err, load_config, require_file, CliError, CliResult, Common};
use crate::eval::{item_streams, load_checkpoint};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained checkpoint; its reference model is the before-training baseline.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Benchmark items written by `bench-build`.
    #[arg(long, value_name = "FILE")]
    pub items: PathBuf,
    /// Clip store the items refer to; also the pool of swapped-in streams.
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Output directory for JSON reports and SVG plots.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeFile {
    pub seed: u64,
    /// Stream replaced in the shift analysis: irrelevant, audio or video.
    pub swap: SwapTarget,
    /// Analyze at most this many items, in file order.
    pub max_items: Option<usize>,
}

impl Default for AnalyzeFile {
    fn default() -> Self {
        Self { seed: 0, swap: SwapTarget::Irrelevant, max_items: None }
    }
}

#[derive(Debug, Serialize)]
struct ShiftPair {
    swap: SwapTarget,
    before: ShiftReport,
    after: ShiftReport,
}

pub fn run(a: AnalyzeArgs) -> CliResult<()> {
    let file: AnalyzeFile = load_config(a.common.config.as_deref())?;
    let seed = a.common.seed.unwrap_or(file.seed);
    require_file(&a.items)?;
    require_file(&a.store)?;
    let mut items: Vec<BenchmarkItem> = io::read_jsonl(&a.items).map_err(input_err)?;
    if let Some(n) = file.max_items {
        items.truncate(n);
    }
    let store = AvStore::load(&a.store).map_err(input_err)?;
    let (models, vocab) = load_checkpoint(&a.checkpoint)?;
    let max_len = models.policy.config().max_len;
    let mut attention = Vec::with_capacity(items.len());
    for item in &items {
        let streams = item_streams(item, &store, &vocab, max_len)?;
        let gold = streams[item.answer_index].clone();
        attention.push((item.id.clone(), item.task.as_str().to_string(), gold));
    }
    let shift_items: Vec<(String, avem_core::scorer::TokenStreams)> = attention
        .iter()
        .filter(|(_, _, ts)| file.swap != SwapTarget::Irrelevant || ts.modality_tag.irrelevant_modality().is_some())
        .map(|(id, _, ts)| (id.clone(), ts.clone()))
        .collect();
    if attention.is_empty() || shift_items.is_empty() {
        return Err(CliError::invalid(format!("{}: no items to analyze", a.items.display())));
    }
    if a.common.dry_run {
        return Ok(());
    }
    let pool: Vec<AvInput> = store.iter().map(|(_, av)| av.clone()).collect();
    let report = attention_comparison(&models.reference, &models.policy, &attention).map_err(CliError::runtime)?;
    let before = adversarial_shift(&models.reference, &shift_items, file.swap, &pool, seed).map_err(CliError::runtime)?;
    let after = adversarial_shift(&models.policy, &shift_items, file.swap, &pool, seed).map_err(CliError::runtime)?;

    let labels: Vec<String> = report.rows.iter().map(|r| r.task.clone()).collect();
    let pick = |f: &dyn Fn(&avem_core::eval::AttentionRow) -> f64| report.rows.iter().map(f).collect::<Vec<f64>>();
    let bars = svg::grouped_bars(
        "Median attention share (%)",
        &labels,
        &[
            ("audio before", pick(&|r| r.before_median.audio_pct)),
            ("audio after", pick(&|r| r.after_median.audio_pct)),
            ("video before", pick(&|r| r.before_median.video_pct)),
            ("video after", pick(&|r| r.after_median.video_pct)),
        ],
    );
    let curves = |title: &str, s: &ShiftReport| {
        svg::line_chart(title, &s.grid, &[("original", &s.original_density), ("swapped", &s.adversarial_density)])
    };
    let shift = ShiftPair { swap: file.swap, before, after };

    ensure_dir(&a.out)?;
    let w = |e| CliError::runtime(e);
    io::write_json(&a.out.join("attention.json"), &report).map_err(w)?;
    io::write_atomic(&a.out.join("attention.svg"), bars.as_bytes()).map_err(w)?;
    io::write_json(&a.out.join("shift.json"), &shift).map_err(w)?;
    io::write_atomic(&a.out.join("shift_before.svg"), curves("Log-likelihood before training", &shift.before).as_bytes()).map_err(w)?;
    io::write_atomic(&a.out.join("shift_after.svg"), curves("Log-likelihood after training", &shift.after).as_bytes()).map_err(w)?;
    log::info!("shift divergence {:.6} before, {:.6} after", shift.before.divergence, shift.after.divergence);
    Ok(())
}
