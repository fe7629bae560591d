//! Command-line front end. Exit codes: 0 success (possibly with failed
//! items), 2 usage or configuration error, 3 provider retries exhausted.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::pipeline::{
    self, aggregate_manifests, read_manifest, stage_summary, PipelineError, RunConfig, RunOptions, StageSummary,
};
use crate::synthesis::{export_dataset, import_pairs, ExportFormat, PairRecord};

#[derive(Debug, Parser)]
#[command(
    name = "groundset",
    version,
    about = "Build retrieval-grounded instruction datasets and minimal-edit preference data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load seeds and expand them into an instruction pool
    Expand(ExpandArgs),
    /// Full run: expansion, retrieval, filtering and answer synthesis
    Generate(GenerateArgs),
    /// Build preference triples by minimally revising base-model answers
    Edit(EditArgs),
    /// Per-stage record counts for one or more output directories
    Stats(StatsArgs),
    /// Export the stage datasets of an output directory
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    /// Seed file (JSONL), overrides paths.seeds
    #[arg(long)]
    pub seeds: PathBuf,
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds sampled per iteration
    #[arg(long)]
    pub n: Option<usize>,
    /// Candidates requested per iteration
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of iterations
    #[arg(long)]
    pub m: Option<u32>,
    /// LCS-F1 similarity at or above which a candidate is a duplicate
    #[arg(long)]
    pub dedup_threshold: Option<f64>,
    /// Sampling seed
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Answer instructions even when no evidence survives filtering
    #[arg(long)]
    pub allow_ungrounded: bool,
    /// Worker threads for the per-instruction phase (1-64)
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Edit seed file (JSONL), overrides paths.edit_seeds
    #[arg(long)]
    pub edit_seeds: PathBuf,
    /// Run configuration file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Edits with a larger token edit ratio go to quarantine
    #[arg(long)]
    pub max_edit_ratio: Option<f64>,
    /// Worker threads (1-64)
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Output directory; repeat to aggregate several refinement rounds
    #[arg(long, required = true)]
    pub out: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Output directory holding dataset.stage<N>.jsonl files
    #[arg(long)]
    pub out: PathBuf,
    /// Record shape: pairs or chat
    #[arg(long)]
    pub format: ExportFormat,
    /// Destination file [default: <out>/export.<format>.jsonl]
    #[arg(long)]
    pub dest: Option<PathBuf>,
}

fn load_config(path: &Path, out: &Path) -> Result<RunConfig, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let mut config = RunConfig::load(path)?;
    config.paths.output_dir = out.to_path_buf();
    Ok(config)
}

/// Fixed timestamps for reproducible builds, from `SOURCE_DATE_EPOCH`.
fn options(resume: bool) -> RunOptions {
    let timestamp = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    RunOptions {
        resume,
        timestamp,
        ..RunOptions::default()
    }
}

fn summary_json(summary: &StageSummary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}

fn stats(args: &StatsArgs) -> Result<String, PipelineError> {
    let mut total = StageSummary::default();
    for dir in &args.out {
        let manifest_path = dir.join("manifest.json");
        let summary = if manifest_path.is_file() {
            aggregate_manifests([&read_manifest(&manifest_path)?])
        } else {
            stage_summary(dir).map_err(|e| PipelineError::Input(e.to_string()))?
        };
        total.merge(&summary);
    }
    Ok(summary_json(&total))
}

fn export(args: &ExportArgs) -> Result<String, PipelineError> {
    let summary = stage_summary(&args.out).map_err(|e| PipelineError::Input(e.to_string()))?;
    let mut records: Vec<PairRecord> = Vec::new();
    for stage in summary.stage_counts.keys() {
        let path = args.out.join(pipeline::dataset_file_name(*stage));
        records.extend(import_pairs(&path).map_err(|e| PipelineError::Input(e.to_string()))?);
    }
    let name = match args.format {
        ExportFormat::PairsJsonl => "export.pairs.jsonl",
        ExportFormat::ChatJsonl => "export.chat.jsonl",
    };
    let dest = args.dest.clone().unwrap_or_else(|| args.out.join(name));
    export_dataset(&records, args.format, &dest).map_err(|e| PipelineError::Io(e.to_string()))?;
    Ok(format!("exported {} records to {}", records.len(), dest.display()))
}

/// Executes a parsed command and returns the text for stdout.
pub fn execute(command: Command) -> Result<String, PipelineError> {
    match command {
        Command::Expand(a) => {
            let mut config = load_config(&a.config, &a.out)?;
            config.paths.seeds = Some(a.seeds);
            if let Some(m) = a.m {
                config
                    .expansion
                    .get_or_insert_with(|| crate::expansion::ExpansionConfig::with_iterations(m))
                    .m = m;
            }
            let e = config
                .expansion
                .as_mut()
                .ok_or_else(|| PipelineError::Config("expansion.m is required (set [expansion] or --m)".into()))?;
            if let Some(n) = a.n {
                e.n = n;
            }
            if let Some(k) = a.k {
                e.k = k;
            }
            if let Some(t) = a.dedup_threshold {
                e.dedup_threshold = t;
            }
            if let Some(s) = a.rng_seed {
                e.rng_seed = s;
            }
            Ok(pipeline::run_expand(&config, &options(false))?.summary())
        }
        Command::Generate(a) => {
            let mut config = load_config(&a.config, &a.out)?;
            config.allow_ungrounded |= a.allow_ungrounded;
            if let Some(p) = a.parallelism {
                config.parallelism = p;
            }
            Ok(pipeline::run(&config, &options(a.resume))?.summary())
        }
        Command::Edit(a) => {
            let mut config = load_config(&a.config, &a.out)?;
            config.paths.edit_seeds = Some(a.edit_seeds);
            if let Some(r) = a.max_edit_ratio {
                config.editing.max_edit_ratio = r;
            }
            if let Some(p) = a.parallelism {
                config.parallelism = p;
            }
            Ok(pipeline::run_edit(&config, &options(a.resume))?.summary())
        }
        Command::Stats(a) => stats(&a),
        Command::Export(a) => export(&a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(text) => {
            println!("{}", text.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
