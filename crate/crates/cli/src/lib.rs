//! Command-line pipeline over the `lpbert-core` library.
//!
//! Every command reads and writes artifacts under one output directory:
//!
//! ```text
//! <out>/graph.json, vocab.txt, entities.tsv, relations.tsv, filter.tsv, stats.json   ingest
//! <out>/pretrain/{model.ckpt, log.jsonl, history.json}                              pretrain
//! <out>/finetune/{model.ckpt, log.jsonl, history.json}                              finetune
//! <out>/reports/<split>.json                                                        evaluate
//! <out>/manifests/<command>.json                                                    every command
//! ```

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use lpbert_core::kg::Split;

pub use commands::*;
pub use config::{load_config, Overrides, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lpbert", version, about = "Text-encoder link prediction over knowledge graphs")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory holding train.tsv, valid.tsv and test.tsv.
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Configuration override, e.g. `--set finetune.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset, add inverse relations, build the vocabulary and filter index.
    Ingest {
        /// Dataset directory (same as --dataset).
        dataset_dir: Option<PathBuf>,
    },
    /// Multi-task masked pre-training on the training triples.
    Pretrain,
    /// Siamese fine-tuning with in-batch negatives.
    Finetune {
        /// Start from this checkpoint instead of the pre-trained one.
        #[arg(long, conflicts_with = "from_scratch")]
        checkpoint: Option<PathBuf>,
        /// Start from random initialization.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Filtered ranking metrics on a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a copy of the dataset whose validation and test entities never occur in training.
    ResplitUnseen {
        /// Fraction of entities held out for test, and again for validation.
        #[arg(long, default_value_t = 0.1)]
        ratio: f64,
        /// Target dataset directory (default: <out>/unseen-dataset).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Top-k tail entities for a head entity and relation.
    Predict {
        /// Catalog identifier of the head, or free text for a new entity.
        #[arg(long)]
        head: String,
        /// Description of a free-text head.
        #[arg(long)]
        description: Option<String>,
        /// Relation identifier or text.
        #[arg(long)]
        relation: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Drop known-true tails other than the query's own.
        #[arg(long)]
        filtered: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        let dataset = match &self.command {
            Command::Ingest { dataset_dir: Some(d) } => Some(d.clone()),
            _ => self.dataset.clone(),
        };
        Overrides {
            dataset,
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
            set: self.set.clone(),
        }
    }
}

fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Runs one parsed command, printing its summary to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides())?;
    init_threads(cfg.threads);
    let out = |s: String, w: &mut dyn Write| {
        writeln!(w, "{s}").map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))
    };
    match &cli.command {
        Command::Ingest { .. } => {
            let s = cmd_ingest(&cfg, cli.force)?;
            out(format!("{}", s.stats), stdout)?;
            out(format!("{:<14}{:>10}", "Vocabulary", s.vocab_size), stdout)?;
            out(format!("artifacts written to {}", cfg.out.display()), stdout)?;
        }
        Command::Pretrain => {
            let s = cmd_pretrain(&cfg, cli.force)?;
            let best = &s.history[s.best_epoch];
            out(
                format!(
                    "best epoch {} (validation loss {:.4}); checkpoint {}",
                    s.best_epoch,
                    best.valid.total,
                    s.checkpoint.display()
                ),
                stdout,
            )?;
        }
        Command::Finetune { checkpoint, from_scratch } => {
            let init = match (checkpoint, from_scratch) {
                (Some(p), _) => FinetuneInit::Checkpoint(p.clone()),
                (None, true) => FinetuneInit::Scratch,
                (None, false) => FinetuneInit::Pretrained,
            };
            let s = cmd_finetune(&cfg, &init, cli.force)?;
            out(
                format!(
                    "best epoch {} (validation Hits@10 {:.4}); checkpoint {}",
                    s.best_epoch,
                    s.best_valid_hits10,
                    s.checkpoint.display()
                ),
                stdout,
            )?;
        }
        Command::Evaluate { split, checkpoint } => {
            let (path, r) = cmd_evaluate(&cfg, *split, checkpoint.as_deref())?;
            out(
                format!(
                    "{} queries={} hits@1={:.4} hits@3={:.4} hits@10={:.4} MR={:.2} MRR={:.4}\nreport {}",
                    r.split,
                    r.n_queries,
                    r.hits1,
                    r.hits3,
                    r.hits10,
                    r.mr,
                    r.mrr,
                    path.display()
                ),
                stdout,
            )?;
        }
        Command::ResplitUnseen { ratio, target } => {
            let target = target.clone().unwrap_or_else(|| cfg.out.join("unseen-dataset"));
            let s = cmd_resplit_unseen(&cfg, *ratio, &target, cli.force)?;
            out(format!("{}", s.stats), stdout)?;
            out(
                format!(
                    "{} validation and {} test entities held out; dataset written to {}",
                    s.valid_entities.len(),
                    s.test_entities.len(),
                    s.target.display()
                ),
                stdout,
            )?;
        }
        Command::Predict { head, description, relation, k, filtered, checkpoint } => {
            let req = PredictRequest {
                head: head.clone(),
                description: description.clone(),
                relation: relation.clone(),
                k: *k,
                filtered: *filtered,
                checkpoint: checkpoint.clone(),
            };
            for p in cmd_predict(&cfg, &req)? {
                out(format!("{}\t{:.4}\t{}\t{}", p.rank, p.score, p.entity, p.name), stdout)?;
            }
        }
    }
    Ok(())
}
