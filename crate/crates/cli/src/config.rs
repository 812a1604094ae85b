//! Run configuration: per-dataset defaults, overlaid by a TOML file, then by
//! `--set key=value` pairs, then by the global flags.

use std::path::{Path, PathBuf};

use lpbert_core::eval::EncodeConfig;
use lpbert_core::finetune::FinetuneConfig;
use lpbert_core::model::EncoderConfig;
use lpbert_core::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Encoder shape; the vocabulary size comes from the ingested vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let c = EncoderConfig::compact(0);
        EncoderSettings {
            hidden: c.hidden,
            layers: c.layers,
            heads: c.heads,
            ff: c.ff,
            max_len: c.max_len,
            dropout: c.dropout,
        }
    }
}

impl EncoderSettings {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSettings {
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub vocab: VocabSettings,
    pub encoder: EncoderSettings,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

/// Benchmark recognized from the dataset directory name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    Wn18rr,
    Fb15k237,
    Umls,
    Other,
}

impl Benchmark {
    pub fn detect(dataset: &Path) -> Benchmark {
        let name = dataset
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase().replace(['-', '_'], ""))
            .unwrap_or_default();
        match name.as_str() {
            "wn18rr" => Benchmark::Wn18rr,
            "fb15k237" => Benchmark::Fb15k237,
            "umls" => Benchmark::Umls,
            _ => Benchmark::Other,
        }
    }
}

impl RunConfig {
    /// Defaults for a dataset, with the fine-tuning batch size, epoch count and
    /// focal weight of the matching benchmark.
    pub fn for_dataset(dataset: &Path) -> RunConfig {
        let mut finetune = FinetuneConfig::default();
        let (batch, epochs, alpha) = match Benchmark::detect(dataset) {
            Benchmark::Wn18rr => (64, 7, 0.8),
            Benchmark::Fb15k237 => (120, 7, 0.5),
            Benchmark::Umls | Benchmark::Other => (128, 30, 0.8),
        };
        finetune.batch_size = batch;
        finetune.epochs = epochs;
        finetune.alpha = alpha;
        let stem = dataset
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        RunConfig {
            dataset: dataset.to_path_buf(),
            out: PathBuf::from("runs").join(stem),
            seed: 42,
            threads: 0,
            vocab: VocabSettings { min_freq: 1 },
            encoder: EncoderSettings::default(),
            pretrain: PretrainConfig::default(),
            finetune,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: lpbert_core::Error| CliError::Usage(e.to_string());
        self.encoder.with_vocab(8).validate().map_err(usage)?;
        self.pretrain.validate().map_err(usage)?;
        self.finetune.validate().map_err(usage)?;
        if self.vocab.min_freq == 0 {
            return Err(CliError::Usage("vocab.min_freq must be at least 1".into()));
        }
        let e = &self.finetune.encode;
        if e.pair_max_len > self.encoder.max_len || e.entity_max_len > self.encoder.max_len {
            return Err(CliError::Usage(format!(
                "finetune.encode lengths must not exceed encoder.max_len ({})",
                self.encoder.max_len
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> EncodeConfig {
        self.finetune.encode
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub set: Vec<String>,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
        CliError::Usage(format!("empty key in override {key:?}"))
    })?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("{p} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively writes `over` into `base`.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves the effective configuration.
pub fn load_config(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut user = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {kv:?} is not key=value")))?;
        set_dotted(&mut user, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(d) = &ov.dataset {
        user.insert("dataset".into(), Value::String(d.display().to_string()));
    }
    let dataset = match user.get("dataset") {
        Some(Value::String(s)) => PathBuf::from(s),
        Some(_) => return Err(CliError::Usage("dataset must be a path string".into())),
        None => {
            return Err(CliError::Usage(
                "no dataset given; pass --dataset or set `dataset` in the config file".into(),
            ))
        }
    };
    let mut table = Table::try_from(RunConfig::for_dataset(&dataset))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut table, user);
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(t) = ov.threads {
        cfg.threads = t;
    }
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(set: &[&str]) -> Overrides {
        Overrides {
            dataset: Some("data/umls".into()),
            set: set.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn benchmark_defaults() {
        let wn = RunConfig::for_dataset(Path::new("x/WN18RR"));
        assert_eq!((wn.finetune.batch_size, wn.finetune.epochs, wn.finetune.alpha), (64, 7, 0.8));
        let fb = RunConfig::for_dataset(Path::new("fb15k-237"));
        assert_eq!((fb.finetune.batch_size, fb.finetune.epochs, fb.finetune.alpha), (120, 7, 0.5));
        let umls = RunConfig::for_dataset(Path::new("data/umls"));
        assert_eq!((umls.finetune.batch_size, umls.finetune.epochs), (128, 30));
        assert_eq!(umls.finetune.gamma, 2.0);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = load_config(None, &ov(&["finetune.epochs=3", "pretrain.lr.encoder=3e-4", "seed=7"])).unwrap();
        assert_eq!(cfg.finetune.epochs, 3);
        assert_eq!(cfg.pretrain.lr.encoder, 3e-4);
        assert_eq!(cfg.finetune.seed, 7);
        let cfg = load_config(None, &Overrides { seed: Some(9), ..ov(&["seed=7"]) }).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load_config(None, &ov(&["finetune.epoch=3"])), Err(CliError::Usage(_))));
        assert!(matches!(load_config(None, &ov(&["bogus=1"])), Err(CliError::Usage(_))));
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(load_config(None, &ov(&["finetune.alpha=1.5"])).is_err());
        assert!(load_config(None, &ov(&["encoder.heads=3"])).is_err());
    }

    #[test]
    fn file_values_and_string_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset = \"data/wn18rr\"\n[finetune]\nepochs = 2\n").unwrap();
        let cfg = load_config(Some(&path), &Overrides { set: vec!["finetune.negatives=in_batch".into()], ..Default::default() })
            .unwrap();
        assert_eq!(cfg.finetune.epochs, 2);
        assert_eq!(cfg.finetune.batch_size, 64);
    }

    #[test]
    fn negative_sampling_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dataset = \"data/umls\"\nseed = 7\n[pretrain]\nepochs = 40\n[finetune]\nnegatives = { random = 5 }\n")
            .unwrap();
        let cfg = load_config(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(cfg.finetune.negatives, lpbert_core::finetune::Negatives::Random(5));
        assert_eq!((cfg.pretrain.epochs, cfg.pretrain.seed), (40, 7));
    }
}
