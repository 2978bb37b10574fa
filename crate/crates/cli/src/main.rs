//! `treebeam`: the retrieval pipeline from behavior log to metrics.

mod commands;
mod config;
mod failure;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use treebeam::tree::TreeKind;

use crate::commands::Method;
use crate::config::RunConfig;
use crate::failure::Failure;
use crate::store::Store;

#[derive(Parser)]
#[command(name = "treebeam", version, about = "Tree-index retrieval with a context-aware node scorer")]
struct Cli {
    /// JSON run configuration. Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that relative artifact paths resolve against.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Global seed every random stream derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. One worker gives bit-identical results run to run;
    /// retrieval output does not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Use artifacts even when they were built under another configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clustered synthetic behavior log.
    Synth,
    /// Preprocess a behavior log and split off test users.
    Ingest,
    /// Build the binary tree index.
    BuildTree {
        #[arg(long)]
        kind: Option<TreeKind>,
    },
    /// Build the per-level co-occurrence graph.
    BuildGraph,
    /// Add graph-derived extra parents to the tree.
    BuildMultipath,
    /// Train the scorer on the binary tree.
    Train {
        /// Continue from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Choose multipath training paths and finetune on them.
    Finetune,
    /// Beam-search candidates for every test user.
    Retrieve {
        /// Use the finetuned model on the multipath index.
        #[arg(long)]
        multipath: bool,
    },
    /// Precision, recall and F-measure of a method on the test users.
    Eval {
        #[arg(long, value_enum, default_value = "tree")]
        method: Method,
    },
    /// Train and evaluate every ablation row and column.
    Ablate {
        #[arg(long)]
        kind: Option<TreeKind>,
    },
    /// Print the per-sample multiply count table.
    Flops {
        /// Average graph-children count.
        #[arg(long, conflicts_with = "measure")]
        avg_k: Option<f64>,
        /// Measure the average from the built multipath index.
        #[arg(long)]
        measure: bool,
        /// Compare instrumented counts with the table for every flag setting.
        #[arg(long)]
        verify: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Check a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Check all eight flag combinations.
        #[arg(long)]
        all_flags: bool,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::BuildTree { .. } => "build-tree",
            Command::BuildGraph => "build-graph",
            Command::BuildMultipath => "build-multipath",
            Command::Train { .. } => "train",
            Command::Finetune => "finetune",
            Command::Retrieve { .. } => "retrieve",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Flops { .. } => "flops",
            Command::Gradcheck { .. } => "gradcheck",
            Command::ShowConfig => "show-config",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let doc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => Value::Object(Default::default()),
    };
    let mut overrides = Vec::new();
    if let Some(d) = &cli.work_dir {
        overrides.push(format!("paths.work_dir={}", Value::String(d.display().to_string())));
    }
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Failure::Config("--workers must be at least 1".into()));
        }
        overrides.push(format!("workers={w}"));
    }
    if let Command::BuildTree { kind } | Command::Ablate { kind } = &cli.command {
        overrides.extend(commands::kind_override(*kind));
    }
    overrides.extend(cli.overrides.iter().cloned());
    RunConfig::from_value(doc, &overrides)
}

fn dispatch(cli: &Cli) -> Result<Option<PathBuf>, Failure> {
    let cfg = resolve_config(cli)?;
    if let Command::ShowConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(None);
    }
    let mut s = Store::new(&cfg, cli.command.name(), cli.force);
    match &cli.command {
        Command::Synth => commands::synth(&mut s)?,
        Command::Ingest => commands::ingest(&mut s)?,
        Command::BuildTree { .. } => commands::build_tree_cmd(&mut s)?,
        Command::BuildGraph => commands::build_graph_cmd(&mut s)?,
        Command::BuildMultipath => commands::build_multipath_cmd(&mut s)?,
        Command::Train { resume } => commands::train(&mut s, *resume)?,
        Command::Finetune => commands::finetune(&mut s)?,
        Command::Retrieve { multipath } => commands::retrieve(&mut s, *multipath)?,
        Command::Eval { method } => commands::eval(&mut s, *method)?,
        Command::Ablate { .. } => commands::ablate(&mut s)?,
        Command::Flops { avg_k, measure, verify } => commands::flops_cmd(&mut s, *avg_k, *measure, *verify)?,
        Command::Gradcheck { checkpoint, all_flags } => commands::gradcheck(&mut s, checkpoint.clone(), *all_flags)?,
        Command::ShowConfig => unreachable!("handled above"),
    }
    s.finish().map(Some)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TREEBEAM_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(manifest) => {
            if let Some(m) = manifest {
                log::debug!("manifest {}", m.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error ({}): {f}", f.category());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
