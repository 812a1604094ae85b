//! Command implementations over an output directory of artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use lpbert_core::eval::{cosine_matrix, encode_layouts, entity_table, evaluate, RankingReport};
use lpbert_core::finetune::{run_finetune, FinetuneEpoch};
use lpbert_core::kg::{
    augment_inverse, build_filter_index, load_dataset, resplit_unseen, FilterIndex, FilterScope,
    GraphStats, KnowledgeGraph, Split,
};
use lpbert_core::log::JsonlLog;
use lpbert_core::model::{load_checkpoint, save_checkpoint, Model};
use lpbert_core::pretrain::{run_pretraining, PretrainEpoch};
use lpbert_core::text::{build_vocab, pair_from_tokens, TokenizedKg, Vocabulary};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{hash_dir, hash_file, Manifest};

pub const GRAPH: &str = "graph.json";
pub const VOCAB: &str = "vocab.txt";
pub const ENTITIES: &str = "entities.tsv";
pub const RELATIONS: &str = "relations.tsv";
pub const FILTER: &str = "filter.tsv";
pub const STATS: &str = "stats.json";
pub const PRETRAINED: &str = "pretrain/model.ckpt";
pub const FINETUNED: &str = "finetune/model.ckpt";

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    pub fn report(&self, split: Split) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", split.name()))
    }

    fn require(&self, rel: &str, what: &'static str, producer: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                what,
                path: p.display().to_string(),
                producer,
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(lpbert_core::Error::from)?)
}

/// Refuses to overwrite `path` unless `force` is set.
fn guard(path: &Path, force: bool, command: &str) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; rerun `{command}` with --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Ingested graph, vocabulary and tokenized texts.
pub struct Ingested {
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub texts: TokenizedKg,
}

pub fn load_ingested(layout: &Layout) -> Result<Ingested, CliError> {
    let gp = layout.require(GRAPH, "ingested graph", "lpbert ingest")?;
    let vp = layout.require(VOCAB, "vocabulary", "lpbert ingest")?;
    let text = fs::read_to_string(&gp).map_err(|e| CliError::io(&gp, e))?;
    let kg: KnowledgeGraph = serde_json::from_str(&text).map_err(lpbert_core::Error::from)?;
    let vocab = Vocabulary::load(&vp)?;
    let texts = TokenizedKg::new(&kg, &vocab);
    Ok(Ingested { kg, vocab, texts })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub stats: GraphStats,
    pub vocab_size: usize,
    pub filter_keys: usize,
}

fn filter_lines(kg: &KnowledgeGraph, filter: &FilterIndex) -> String {
    let mut out = String::new();
    for (ei, e) in kg.entities.iter().enumerate() {
        for (ri, r) in kg.relations.iter().enumerate() {
            let known = filter.get(
                lpbert_core::kg::EntityId(ei as u32),
                lpbert_core::kg::RelationId(ri as u32),
            );
            if known.is_empty() {
                continue;
            }
            let tails: Vec<&str> = known.iter().map(|t| kg.entity(*t).raw.as_str()).collect();
            out.push_str(&format!("{}\t{}\t{}\n", e.raw, r.raw, tails.join(" ")));
        }
    }
    out
}

/// Loads and augments the dataset, builds the vocabulary and filter index and writes
/// them under the output directory.
pub fn cmd_ingest(cfg: &RunConfig, force: bool) -> Result<IngestSummary, CliError> {
    let layout = Layout::new(&cfg.out);
    guard(&layout.path(GRAPH), force, "lpbert ingest")?;
    if !cfg.dataset.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            cfg.dataset.display()
        )));
    }
    let raw = load_dataset(&cfg.dataset)?;
    let stats = raw.stats();
    let kg = augment_inverse(raw)?;
    let vocab = build_vocab(&kg, cfg.vocab.min_freq)?;
    let filter = build_filter_index(&kg, FilterScope::All);
    create_dir(&cfg.out)?;
    write(&layout.path(GRAPH), to_json(&kg)?)?;
    vocab.save(&layout.path(VOCAB))?;
    write(&layout.path(ENTITIES), kg.entity_catalog())?;
    write(&layout.path(RELATIONS), kg.relation_catalog())?;
    write(&layout.path(FILTER), filter_lines(&kg, &filter))?;
    let summary = IngestSummary {
        stats,
        vocab_size: vocab.len(),
        filter_keys: filter.len(),
    };
    write(&layout.path(STATS), to_json(&summary)?)?;
    let mut m = Manifest::new("ingest", cfg);
    m.inputs = hash_dir(&cfg.dataset)?;
    m.outputs = [GRAPH, VOCAB, ENTITIES, RELATIONS, FILTER, STATS]
        .iter()
        .map(|p| layout.path(p))
        .collect();
    m.metrics = serde_json::to_value(&summary).map_err(lpbert_core::Error::from)?;
    m.write(&layout.manifest("ingest"))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn cmd_pretrain(cfg: &RunConfig, force: bool) -> Result<PretrainSummary, CliError> {
    let layout = Layout::new(&cfg.out);
    let ckpt = layout.path(PRETRAINED);
    guard(&ckpt, force, "lpbert pretrain")?;
    let data = load_ingested(&layout)?;
    let model = Model::<f32>::init(cfg.encoder.with_vocab(data.vocab.len()), cfg.seed)?;
    info!(params = model.num_params(), "pre-training");
    let mut log = JsonlLog::create(&layout.path("pretrain/log.jsonl"))?;
    let out = run_pretraining(&data.kg, &data.texts, model, &cfg.pretrain, &mut log)?;
    save_checkpoint(&out.model, &ckpt)?;
    let summary = PretrainSummary {
        checkpoint: ckpt.clone(),
        history: out.history,
        best_epoch: out.best_epoch,
        stopped_early: out.stopped_early,
    };
    write(&layout.path("pretrain/history.json"), to_json(&summary)?)?;
    let mut m = Manifest::new("pretrain", cfg);
    m.inputs = vec![hash_file(&layout.path(GRAPH))?, hash_file(&layout.path(VOCAB))?];
    m.outputs = vec![ckpt, layout.path("pretrain/log.jsonl")];
    m.metrics = serde_json::json!({
        "best_epoch": summary.best_epoch,
        "stopped_early": summary.stopped_early,
        "best_valid": summary.history.get(summary.best_epoch).map(|h| h.valid),
    });
    m.write(&layout.manifest("pretrain"))?;
    Ok(summary)
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinetuneInit {
    Pretrained,
    Checkpoint(PathBuf),
    Scratch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_valid_hits10: f64,
}

pub fn cmd_finetune(cfg: &RunConfig, init: &FinetuneInit, force: bool) -> Result<FinetuneSummary, CliError> {
    let layout = Layout::new(&cfg.out);
    let ckpt = layout.path(FINETUNED);
    guard(&ckpt, force, "lpbert finetune")?;
    let data = load_ingested(&layout)?;
    let mut inputs = vec![hash_file(&layout.path(GRAPH))?, hash_file(&layout.path(VOCAB))?];
    let model = match init {
        FinetuneInit::Scratch => Model::<f32>::init(cfg.encoder.with_vocab(data.vocab.len()), cfg.seed)?,
        FinetuneInit::Pretrained | FinetuneInit::Checkpoint(_) => {
            let path = match init {
                FinetuneInit::Checkpoint(p) => p.clone(),
                _ => layout.require(PRETRAINED, "pre-trained checkpoint", "lpbert pretrain")?,
            };
            if !path.exists() {
                return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
            }
            inputs.push(hash_file(&path)?);
            let m = load_checkpoint::<f32>(&path)?;
            if m.config.vocab_size != data.vocab.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint vocabulary ({}) does not match the ingested vocabulary ({})",
                    m.config.vocab_size,
                    data.vocab.len()
                )));
            }
            m
        }
    };
    let mut log = JsonlLog::create(&layout.path("finetune/log.jsonl"))?;
    let out = run_finetune(&data.kg, &data.texts, model, &cfg.finetune, &mut log)?;
    save_checkpoint(&out.model, &ckpt)?;
    let summary = FinetuneSummary {
        checkpoint: ckpt.clone(),
        history: out.history,
        best_epoch: out.best_epoch,
        best_valid_hits10: out.best_valid.hits10,
    };
    write(&layout.path("finetune/history.json"), to_json(&summary)?)?;
    let mut m = Manifest::new("finetune", cfg);
    m.inputs = inputs;
    m.outputs = vec![ckpt, layout.path("finetune/log.jsonl")];
    m.metrics = serde_json::json!({
        "best_epoch": summary.best_epoch,
        "valid_hits10": summary.best_valid_hits10,
    });
    m.write(&layout.manifest("finetune"))?;
    Ok(summary)
}

fn finetuned(layout: &Layout, checkpoint: Option<&Path>) -> Result<(PathBuf, Model<f32>), CliError> {
    let path = match checkpoint {
        Some(p) if p.exists() => p.to_path_buf(),
        Some(p) => {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", p.display())));
        }
        None => layout.require(FINETUNED, "fine-tuned checkpoint", "lpbert finetune")?,
    };
    let model = load_checkpoint::<f32>(&path)?;
    Ok((path, model))
}

/// Filtered ranking on `split`; writes `reports/<split>.json`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    split: Split,
    checkpoint: Option<&Path>,
) -> Result<(PathBuf, RankingReport), CliError> {
    let layout = Layout::new(&cfg.out);
    let data = load_ingested(&layout)?;
    let (ckpt, model) = finetuned(&layout, checkpoint)?;
    let filter = build_filter_index(&data.kg, FilterScope::All);
    let report = evaluate(&model, &data.kg, &data.texts, split, &filter, &cfg.encode())?;
    let path = layout.report(split);
    write(&path, to_json(&report)?)?;
    let mut m = Manifest::new("evaluate", cfg);
    m.inputs = vec![
        hash_file(&layout.path(GRAPH))?,
        hash_file(&layout.path(VOCAB))?,
        hash_file(&ckpt)?,
    ];
    m.outputs = vec![path.clone()];
    m.metrics = serde_json::json!({
        "split": report.split,
        "n_queries": report.n_queries,
        "hits1": report.hits1,
        "hits3": report.hits3,
        "hits10": report.hits10,
        "mr": report.mr,
        "mrr": report.mrr,
    });
    m.write(&layout.manifest(&format!("evaluate-{}", split.name())))?;
    Ok((path, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResplitSummary {
    pub target: PathBuf,
    pub stats: GraphStats,
    pub valid_entities: Vec<String>,
    pub test_entities: Vec<String>,
}

fn text_lines<'a>(rows: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    rows.map(|(k, v)| format!("{k}\t{v}\n")).collect()
}

/// Re-partitions the dataset so held-out entities never occur in training and writes
/// the result as a new dataset directory.
pub fn cmd_resplit_unseen(
    cfg: &RunConfig,
    ratio: f64,
    target: &Path,
    force: bool,
) -> Result<ResplitSummary, CliError> {
    guard(&target.join(Split::Train.file_name()), force, "lpbert resplit-unseen")?;
    if !cfg.dataset.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            cfg.dataset.display()
        )));
    }
    let kg = load_dataset(&cfg.dataset)?;
    let split = resplit_unseen(&kg, ratio, cfg.seed)?;
    create_dir(target)?;
    let g = &split.graph;
    for s in Split::ALL {
        lpbert_core::kg::write_split(g, s, target)?;
    }
    write(
        &target.join("entity2text.tsv"),
        text_lines(g.entities.iter().map(|e| (e.raw.as_str(), e.name.as_str()))),
    )?;
    write(
        &target.join("entity2textlong.tsv"),
        text_lines(
            g.entities
                .iter()
                .filter(|e| !e.description.is_empty())
                .map(|e| (e.raw.as_str(), e.description.as_str())),
        ),
    )?;
    write(
        &target.join("relation2text.tsv"),
        text_lines(g.relations.iter().map(|r| (r.raw.as_str(), r.text.as_str()))),
    )?;
    let raw = |ids: &[lpbert_core::kg::EntityId]| ids.iter().map(|e| g.entity(*e).raw.clone()).collect();
    let summary = ResplitSummary {
        target: target.to_path_buf(),
        stats: g.stats(),
        valid_entities: raw(&split.valid_entities),
        test_entities: raw(&split.test_entities),
    };
    write(&target.join("unseen.json"), to_json(&summary)?)?;
    let mut m = Manifest::new("resplit-unseen", cfg);
    m.inputs = hash_dir(&cfg.dataset)?;
    m.outputs = vec![target.to_path_buf()];
    m.metrics = serde_json::json!({ "ratio": ratio, "stats": summary.stats });
    m.write(&target.join("manifest.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub rank: usize,
    pub entity: String,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct PredictRequest {
    /// Catalog identifier, or free text for an entity outside the catalog.
    pub head: String,
    pub description: Option<String>,
    pub relation: String,
    pub k: usize,
    pub filtered: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Top-`k` tail entities for `(head, relation)` by cosine similarity.
pub fn cmd_predict(cfg: &RunConfig, req: &PredictRequest) -> Result<Vec<Prediction>, CliError> {
    let layout = Layout::new(&cfg.out);
    let data = load_ingested(&layout)?;
    let kg = &data.kg;
    let relation = kg
        .relation_by_name(&req.relation)
        .ok_or_else(|| lpbert_core::Error::UnknownRelation(req.relation.clone()))?;
    let (_, model) = finetuned(&layout, req.checkpoint.as_deref())?;
    let enc = cfg.encode();
    let known = kg.entity_by_raw(&req.head);
    let query = match known {
        Some(e) if req.description.is_none() => data.texts.pair_sequence(e, relation, enc.pair_max_len),
        _ => {
            info!(head = %req.head, "head is not a catalog identifier; encoding it as free text");
            pair_from_tokens(
                &data.vocab.tokenize(&req.head),
                &data.vocab.tokenize(req.description.as_deref().unwrap_or("")),
                &data.texts.relations[relation.index()],
                enc.pair_max_len,
            )
        }
    };
    let q = encode_layouts(&model, &[query], 1)?;
    let table = entity_table(&model, &data.texts, &enc)?;
    let scores = cosine_matrix(q.view(), table.view());
    let exclude: Vec<lpbert_core::kg::EntityId> = match (req.filtered, known) {
        (true, Some(e)) => build_filter_index(kg, FilterScope::All).get(e, relation).to_vec(),
        _ => Vec::new(),
    };
    let mut ranked: Vec<(usize, f64)> = scores
        .row(0)
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, _)| exclude.binary_search(&lpbert_core::kg::EntityId(*i as u32)).is_err())
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(req.k)
        .enumerate()
        .map(|(r, (i, score))| {
            let e = &kg.entities[i];
            Prediction {
                rank: r + 1,
                entity: e.raw.clone(),
                name: e.name.clone(),
                score,
            }
        })
        .collect())
}
