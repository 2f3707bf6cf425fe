//! Run configuration: one JSON document, dotted-path overrides, and the
//! data sources it points at.

use std::path::{Path, PathBuf};

use protonorm::corpus::{read_conll, Dataset, FrequencyTable, Split};
use protonorm::encoder::EmbeddingStore;
use protonorm::{load_embedding_dump, synth_generate, SyntheticConfig, SyntheticCorpus, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "PROTONORM_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides both `train.seed` and `synthetic.seed` when set.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub diagnostics: DiagnosticSettings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate the corpus in memory from `synthetic` instead of reading files.
    pub synthetic: bool,
    /// Directory holding `{split}.conll`, `{split}.pne1` and `frequencies.tsv`,
    /// as written by `synth`.
    pub dir: Option<PathBuf>,
    pub train: Option<SplitFiles>,
    pub dev: Option<SplitFiles>,
    pub test: Option<SplitFiles>,
    /// Support source for fixed-support evaluation.
    pub support: Option<SplitFiles>,
    pub frequencies: Option<PathBuf>,
    pub classifier_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub conll: PathBuf,
    pub dump: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    pub episodes: usize,
    /// Evaluate one fixed-support task with this many shots per class
    /// instead of sampled episodes.
    pub fixed_support_shots: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { split: Split::Test, episodes: 500, fixed_support_shots: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticSettings {
    pub split: Split,
    pub survey_episodes: usize,
    pub bias_scenarios: usize,
    pub bias_dim: usize,
    pub unit_prototypes: bool,
    /// Entities whose per-word frequencies are exported as a histogram.
    pub entities: Vec<String>,
    /// Scatter one point per token occurrence rather than per word.
    pub occurrences: bool,
}

impl Default for DiagnosticSettings {
    fn default() -> Self {
        DiagnosticSettings {
            split: Split::Train,
            survey_episodes: 100,
            bias_scenarios: 10_000,
            bias_dim: 16,
            unit_prototypes: false,
            entities: Vec::new(),
            occurrences: false,
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        // Tagged enums are replaced whole so stale variant fields do not linger.
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut over = value;
    for k in keys.iter().rev() {
        over = serde_json::json!({ *k: over });
    }
    merge(doc, over);
    Ok(())
}

/// Defaults, then `base` (a file or a previous run's config), then the
/// overrides in order, then `PROTONORM_SEED`.
pub fn resolve(base: Option<Value>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    if let Some(b) = base {
        if !b.is_object() {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        }
        merge(&mut doc, b);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed: u64 =
            raw.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        doc["seed"] = seed.into();
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = cfg.seed {
        cfg.train.seed = seed;
        cfg.synthetic.seed = seed;
    }
    cfg.train.validate()?;
    cfg.synthetic.validate()?;
    Ok(cfg)
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| protonorm::Error::Format(format!("{}: {e}", path.display())).into())
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

pub fn parse_split(s: &str) -> CliResult<Split> {
    serde_json::from_value(Value::String(s.to_ascii_lowercase()))
        .map_err(|_| CliError::Usage(format!("unknown split {s:?}; expected train, dev or test")))
}

/// A split's sentences and the store holding their embeddings.
pub struct SplitSet {
    pub dataset: Dataset,
    pub store: EmbeddingStore,
}

/// Corpus access for one command; the synthetic corpus is generated once.
pub struct DataSource<'a> {
    cfg: &'a RunConfig,
    synthetic: Option<SyntheticCorpus>,
}

impl<'a> DataSource<'a> {
    pub fn open(cfg: &'a RunConfig) -> CliResult<Self> {
        let synthetic = if cfg.data.synthetic { Some(synth_generate(&cfg.synthetic)?) } else { None };
        Ok(DataSource { cfg, synthetic })
    }

    fn files(&self, split: Split) -> Option<SplitFiles> {
        let d = &self.cfg.data;
        let explicit = match split {
            Split::Train => &d.train,
            Split::Dev => &d.dev,
            Split::Test => &d.test,
        };
        explicit.clone().or_else(|| {
            d.dir.as_ref().map(|dir| SplitFiles {
                conll: dir.join(format!("{}.conll", split_name(split))),
                dump: dir.join(format!("{}.pne1", split_name(split))),
            })
        })
    }

    /// Whether `split` is configured and, for directory layouts, present.
    pub fn has(&self, split: Split) -> bool {
        if self.synthetic.is_some() {
            return true;
        }
        let explicit = match split {
            Split::Train => self.cfg.data.train.is_some(),
            Split::Dev => self.cfg.data.dev.is_some(),
            Split::Test => self.cfg.data.test.is_some(),
        };
        explicit || self.files(split).is_some_and(|f| f.conll.exists())
    }

    pub fn split(&self, split: Split) -> CliResult<SplitSet> {
        if let Some(c) = &self.synthetic {
            let (dataset, store) = c.store.rebased(c.split(split))?;
            return Ok(SplitSet { dataset, store });
        }
        let files = self.files(split).ok_or_else(|| {
            CliError::Config(format!(
                "no {} data configured; pass --data DIR, --synthetic or set data.{}",
                split_name(split),
                split_name(split)
            ))
        })?;
        load_split(&files, split)
    }

    pub fn support(&self) -> CliResult<Option<SplitSet>> {
        self.cfg.data.support.as_ref().map(|f| load_split(f, Split::Train)).transpose()
    }

    pub fn frequencies(&self) -> CliResult<Option<FrequencyTable>> {
        if let Some(c) = &self.synthetic {
            return Ok(Some(c.frequencies.clone()));
        }
        let d = &self.cfg.data;
        let path = match (&d.frequencies, &d.dir) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) if dir.join("frequencies.tsv").exists() => dir.join("frequencies.tsv"),
            _ => return Ok(None),
        };
        Ok(Some(FrequencyTable::read(&path)?))
    }
}

/// Reads a CoNLL file and its dump, checking every token has a row.
pub fn load_split(files: &SplitFiles, split: Split) -> CliResult<SplitSet> {
    let dataset = read_conll(&files.conll, split)?;
    let store = load_embedding_dump(&files.dump)?;
    for s in &dataset.sentences {
        for (pos, tok) in s.tokens.iter().enumerate() {
            if store.row_id(s.id, pos as u32).is_none() {
                return Err(protonorm::Error::Consistency(format!(
                    "{} has no row for sentence {} position {pos} ({tok:?}) of {}",
                    files.dump.display(),
                    s.id,
                    files.conll.display()
                ))
                .into());
            }
        }
    }
    Ok(SplitSet { dataset, store })
}
