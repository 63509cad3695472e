//! Command-line driver: dataset generation, training, embedding
//! extraction, and the two retrieval benchmarks.
//!
//! Configuration is a flat `key=value` file ('#' starts a comment) with
//! CLI-flag overrides. Every command echoes its fully resolved
//! configuration before doing work; that echo is itself a valid config
//! file, so a run is reproducible from the echo alone.
//!
//! Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.

mod runconfig;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crosswell_core::hcsdata::{self, DataError};
use crosswell_core::ndtensor::TensorError;
use crosswell_core::retrieval::{
    self, EmbeddingTable, RelationshipSet, RetrievalError, TargetMap, compound_gene_report_csv, gene_gene_report_csv,
};
use crosswell_core::trainloop::{self, TrainError};
use crosswell_core::wellsampler::SampleError;

use runconfig::RunConfig;

#[derive(Parser)]
#[command(name = "crosswell", version, about = "Cross-well aligned masked siamese training on screening wells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset directory; writes checkpoint and metrics.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory containing manifest.csv.
        #[arg(long)]
        dataset: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// cross-well or single-well.
        #[arg(long)]
        mode: Option<String>,
        /// Prototype count T.
        #[arg(long)]
        prototypes: Option<usize>,
    },
    /// Extract per-well evaluation embeddings from a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output embeddings CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gene-gene relationship recall over extreme-similarity pairs.
    EvalGg {
        #[arg(long)]
        embeddings: PathBuf,
        /// One or more relationship CSVs (each is a recall source).
        #[arg(long, required = true, num_args = 1..)]
        relationships: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Selection fraction (top and bottom each).
        #[arg(long)]
        fraction: Option<f64>,
        /// Restrict the pair universe to ids with this prefix; an empty
        /// string disables the filter.
        #[arg(long, default_value = "gene_")]
        genes_prefix: String,
        /// Report output path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compound-gene AUC/AP with permutation z-scores.
    EvalCg {
        #[arg(long)]
        embeddings: PathBuf,
        /// compound_id,gene_id target file.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "gene_")]
        genes_prefix: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum RunError {
    Config(String),
    Io(String),
    Numeric(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(m) => write!(f, "config error: {m}"),
            RunError::Io(m) => write!(f, "i/o error: {m}"),
            RunError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl RunError {
    fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Io(_) => 3,
            RunError::Numeric(_) => 4,
        }
    }
}

impl From<DataError> for RunError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => RunError::Config(e.to_string()),
            DataError::Tensor(t) => t.into(),
            other => RunError::Io(other.to_string()),
        }
    }
}

impl From<TensorError> for RunError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NonScalarLoss { .. } => RunError::Numeric(e.to_string()),
            TensorError::Io(_) | TensorError::Format(_) => RunError::Io(e.to_string()),
            other => RunError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => RunError::Config(e.to_string()),
            TrainError::NonFinite { .. } => RunError::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Sample(s) => s.into(),
            TrainError::Retrieval(r) => r.into(),
            TrainError::Io { .. } => RunError::Io(e.to_string()),
        }
    }
}

impl From<SampleError> for RunError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Config(_) | SampleError::EmptyBatch | SampleError::NotEnoughWells { .. } => {
                RunError::Config(e.to_string())
            }
            SampleError::Data(d) => d.into(),
        }
    }
}

impl From<RetrievalError> for RunError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Invalid(_) | RetrievalError::EmptyKnownSet(_) => RunError::Config(e.to_string()),
            other => RunError::Io(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crosswell: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, RunError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RunError::Io(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(RunError::Config)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn prefix_universe(ids: &[String], prefix: &str) -> Option<BTreeSet<String>> {
    if prefix.is_empty() {
        return None;
    }
    Some(ids.iter().filter(|id| id.starts_with(prefix)).cloned().collect())
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::Generate { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            println!("# resolved configuration");
            print!("{}", cfg.echo());
            let (manifest, truth) = hcsdata::generate_synthetic(&cfg.synthetic, &out)?;
            println!(
                "# generated {} wells for {} perturbations under {}",
                manifest.records.len(),
                manifest.n_perturbations(),
                out.display()
            );
            println!(
                "# relationship pairs: {}; compounds with targets: {}",
                truth.pairs.len(),
                truth.compound_targets.len()
            );
            if cfg.synthetic.wells_per_perturbation < 2 {
                let ineligible: Vec<String> = manifest.perturbation_ids().cloned().collect();
                println!(
                    "# warning: wells_per_perturbation < 2; cross-well sampling will skip: {}",
                    ineligible.join(",")
                );
            }
            Ok(())
        }
        Command::Train { config, dataset, out, seed, mode, prototypes } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if let Some(m) = mode {
                cfg.train.mode = m.parse().map_err(RunError::Config)?;
            }
            if let Some(t) = prototypes {
                cfg.train.prototypes = t;
            }
            println!("# resolved configuration");
            print!("{}", cfg.echo());
            let manifest = hcsdata::load_manifest(&dataset.join("manifest.csv"))?;
            let outcome = trainloop::train(&manifest, &cfg.train, &out)?;
            if !outcome.skipped.is_empty() {
                println!("# skipped ineligible perturbations: {}", outcome.skipped.join(","));
            }
            let last = outcome.metrics.last().expect("at least one step");
            println!(
                "# trained {} steps ({} per epoch); final loss {:.6}; checkpoint {}",
                outcome.total_steps,
                outcome.steps_per_epoch,
                last.loss,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Embed { checkpoint, dataset, out } => {
            println!("# resolved configuration");
            println!("checkpoint={}", checkpoint.display());
            println!("dataset={}", dataset.display());
            let manifest = hcsdata::load_manifest(&dataset.join("manifest.csv"))?;
            let table = trainloop::extract_embeddings(&manifest, &checkpoint)?;
            table.write_csv(&out)?;
            println!("# wrote {} embedding rows of width {} to {}", table.rows.len(), table.width(), out.display());
            Ok(())
        }
        Command::EvalGg { embeddings, relationships, config, fraction, genes_prefix, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(f) = fraction {
                cfg.fraction = f;
            }
            println!("# resolved configuration");
            println!("fraction={}", cfg.fraction);
            println!("genes_prefix={genes_prefix}");
            let table = EmbeddingTable::read_csv(&embeddings)?;
            let aggregates = retrieval::aggregate(&table)?;
            let known: Vec<RelationshipSet> =
                relationships.iter().map(|p| RelationshipSet::load(p)).collect::<Result<_, _>>()?;
            let universe = prefix_universe(&aggregates.ids, &genes_prefix);
            let report = retrieval::gene_gene_recall(&aggregates, &known, cfg.fraction, universe.as_ref())?;
            let csv = gene_gene_report_csv(&report);
            print!("{csv}");
            if report.dropped_pairs > 0 {
                println!("# dropped {} known pairs outside the evaluated universe", report.dropped_pairs);
            }
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
            Ok(())
        }
        Command::EvalCg { embeddings, targets, config, permutations, seed, genes_prefix, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = permutations {
                cfg.permutations = p;
            }
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            println!("# resolved configuration");
            println!("permutations={}", cfg.permutations);
            println!("seed={}", cfg.train.seed);
            println!("genes_prefix={genes_prefix}");
            let table = EmbeddingTable::read_csv(&embeddings)?;
            let aggregates = retrieval::aggregate(&table)?;
            let target_map = TargetMap::load(&targets)?;
            let genes = prefix_universe(&aggregates.ids, &genes_prefix)
                .unwrap_or_else(|| aggregates.ids.iter().cloned().collect());
            let report = retrieval::compound_gene_metrics(&aggregates, &target_map, &genes)?;
            let z =
                retrieval::zscore_vs_random(&report, &aggregates, &target_map, &genes, cfg.permutations, cfg.train.seed)?;
            let csv = compound_gene_report_csv(&report, Some(&z));
            print!("{csv}");
            if !report.excluded.is_empty() {
                println!("# excluded compounds without resolvable targets: {}", report.excluded.join(","));
            }
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
            Ok(())
        }
    }
}
