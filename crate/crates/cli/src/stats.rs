use std::path::PathBuf;

use avem_core::bench::{check_published_totals, compute_statistics, render_table, BenchmarkItem};
use avem_core::io;
use avem_core::world::ManifestEntry;
use clap::Args;
use serde::Deserialize;

use crate::common::{ensure_dir, input_err, load_config, require_file, CliError, CliResult, Common};

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Benchmark items written by `bench-build`.
    #[arg(long, value_name = "FILE")]
    pub items: PathBuf,
    /// Source manifest; adds the emotion distance to the table.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Also write the statistics as JSON to this file.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsFile {
    pub seed: u64,
    /// Fail unless the counts match the published full-size benchmark.
    pub check_published: bool,
}

pub fn run(a: StatsArgs) -> CliResult<()> {
    let file: StatsFile = load_config(a.common.config.as_deref())?;
    require_file(&a.items)?;
    let items: Vec<BenchmarkItem> = io::read_jsonl(&a.items).map_err(input_err)?;
    let manifest: Option<Vec<ManifestEntry>> = match &a.manifest {
        Some(p) => {
            require_file(p)?;
            Some(io::read_jsonl(p).map_err(input_err)?)
        }
        None => None,
    };
    if a.common.dry_run {
        return Ok(());
    }
    let report = compute_statistics(&items, manifest.as_deref());
    print!("{}", render_table(&report));
    if let Some(path) = &a.json {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        io::write_json(path, &report).map_err(CliError::runtime)?;
    }
    if file.check_published {
        check_published_totals(&report).map_err(CliError::runtime)?;
    }
    Ok(())
}
