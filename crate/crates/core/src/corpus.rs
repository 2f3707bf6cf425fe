//! Token-labeled NER corpora, label schemas, and word-frequency statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingStore;
use crate::error::{Error, Result};
use crate::math::{l2_norm, spearman};

pub type LabelId = usize;

/// The no-entity label.
pub const OTHER: &str = "O";

/// Entity names and their integer ids. Id 0 is always [`OTHER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSchema {
    names: Vec<String>,
    ids: HashMap<String, LabelId>,
}

impl From<Vec<String>> for LabelSchema {
    fn from(names: Vec<String>) -> Self {
        let ids = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        LabelSchema { names, ids }
    }
}

impl From<LabelSchema> for Vec<String> {
    fn from(s: LabelSchema) -> Self {
        s.names
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        let mut s = LabelSchema { names: Vec::new(), ids: HashMap::new() };
        s.intern(OTHER);
        s
    }
}

impl LabelSchema {
    pub fn from_names<S: AsRef<str>>(entities: &[S]) -> Result<Self> {
        let mut s = Self::default();
        for e in entities {
            let e = e.as_ref();
            if e == OTHER || s.ids.contains_key(e) {
                return Err(Error::InvalidInput(format!("duplicate label {e:?}")));
            }
            s.intern(e);
        }
        Ok(s)
    }

    /// Returns the id of `name`, adding it if unseen.
    pub fn intern(&mut self, name: &str) -> LabelId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<LabelId> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: LabelId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Ids of every entity other than `O`.
    pub fn entity_ids(&self) -> impl Iterator<Item = LabelId> {
        1..self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Contiguous run of tokens carrying one entity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: LabelId,
}

/// Spans of non-zero labels. A span ends where the label changes; `begins`
/// marks positions that force a new span even under an unchanged label.
pub fn spans(labels: &[LabelId], begins: impl Fn(usize) -> bool) -> Vec<Span> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        let l = labels[i];
        if l == 0 {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < labels.len() && labels[i] == l && !begins(i) {
            i += 1;
        }
        out.push(Span { start, end: i, label: l });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    /// Identifier shared with the embedding store index.
    pub id: u64,
    pub tokens: Vec<String>,
    pub labels: Vec<LabelId>,
    /// Labels as they appeared in the source, BIO prefixes included.
    pub raw_labels: Vec<String>,
    pub source_doc: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entity mentions, honouring explicit `B-` boundaries.
    pub fn mentions(&self) -> Vec<Span> {
        spans(&self.labels, |i| self.raw_labels.get(i).is_some_and(|r| r.starts_with("B-")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub schema: LabelSchema,
    pub split: Split,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, schema: LabelSchema, split: Split) -> Result<Self> {
        for s in &sentences {
            if s.tokens.is_empty() || s.tokens.len() != s.labels.len() {
                return Err(Error::InvalidInput(format!(
                    "sentence {} has {} tokens and {} labels",
                    s.id,
                    s.tokens.len(),
                    s.labels.len()
                )));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= schema.len()) {
                return Err(Error::InvalidInput(format!(
                    "sentence {} uses label id {bad} outside the schema",
                    s.id
                )));
            }
        }
        Ok(Dataset { sentences, schema, split })
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Number of distinct sentences mentioning each label id.
    pub fn sentence_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.len()];
        for s in &self.sentences {
            let mut seen = vec![false; self.schema.len()];
            for sp in s.mentions() {
                seen[sp.label] = true;
            }
            for (c, hit) in counts.iter_mut().zip(seen) {
                *c += hit as usize;
            }
        }
        counts
    }

    /// Content fingerprint (FNV-1a over ids, tokens and raw labels).
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for s in &self.sentences {
            feed(&s.id.to_le_bytes());
            for (t, l) in s.tokens.iter().zip(&s.raw_labels) {
                feed(t.as_bytes());
                feed(&[0]);
                feed(l.as_bytes());
                feed(&[1]);
            }
        }
        h
    }
}

fn strip_bio(label: &str) -> &str {
    label.strip_prefix("B-").or_else(|| label.strip_prefix("I-")).unwrap_or(label)
}

const DOCSTART: &str = "-DOCSTART-";

/// Parses two-column `token<TAB>label` text. Blank lines separate sentences,
/// `-DOCSTART-` lines separate documents. BIO prefixes are stripped from the
/// label ids but kept in [`Sentence::raw_labels`].
pub fn parse_conll(text: &str, split: Split) -> Result<Dataset> {
    let mut schema = LabelSchema::default();
    let mut sentences = Vec::new();
    let mut doc = 0usize;
    let mut cur = Sentence {
        id: 0,
        tokens: Vec::new(),
        labels: Vec::new(),
        raw_labels: Vec::new(),
        source_doc: format!("doc{doc}"),
    };

    let flush = |cur: &mut Sentence, doc: usize, sentences: &mut Vec<Sentence>| {
        if !cur.tokens.is_empty() {
            let id = sentences.len() as u64;
            let mut done = std::mem::replace(
                cur,
                Sentence {
                    id: 0,
                    tokens: Vec::new(),
                    labels: Vec::new(),
                    raw_labels: Vec::new(),
                    source_doc: String::new(),
                },
            );
            done.id = id;
            sentences.push(done);
        }
        cur.source_doc = format!("doc{doc}");
    };

    for (lineno, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            flush(&mut cur, doc, &mut sentences);
            continue;
        }
        if line.starts_with(DOCSTART) {
            flush(&mut cur, doc, &mut sentences);
            doc += 1;
            cur.source_doc = format!("doc{doc}");
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        let (token, raw) = (cols[0], cols[1].trim());
        if token.is_empty() || raw.is_empty() {
            return Err(Error::Parse { line: lineno + 1, msg: "empty token or label".into() });
        }
        cur.labels.push(schema.intern(strip_bio(raw)));
        cur.tokens.push(token.to_string());
        cur.raw_labels.push(raw.to_string());
    }
    flush(&mut cur, doc, &mut sentences);

    if sentences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(sentences, schema, split)
}

/// Writes a dataset in the format read by [`parse_conll`].
pub fn serialize_conll(d: &Dataset) -> String {
    let mut out = String::new();
    let mut doc: Option<&str> = Some("doc0");
    for s in &d.sentences {
        if doc.is_some_and(|prev| prev != s.source_doc) {
            out.push_str(DOCSTART);
            out.push_str("\tO\n\n");
        }
        doc = Some(&s.source_doc);
        for (t, l) in s.tokens.iter().zip(&s.raw_labels) {
            let _ = writeln!(out, "{t}\t{l}");
        }
        out.push('\n');
    }
    out
}

pub fn read_conll(path: &Path, split: Split) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, split)
}

/// Case-folded word counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<String, u64>,
}

impl FrequencyTable {
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: AsRef<str>,
    {
        let mut t = FrequencyTable::default();
        for (w, c) in counts {
            *t.counts.entry(w.as_ref().to_lowercase()).or_insert(0) += c;
        }
        t
    }

    /// Count for `word` after case folding; absent words count 0.
    pub fn get(&self, word: &str) -> u64 {
        self.lookup(word).unwrap_or(0)
    }

    pub fn lookup(&self, word: &str) -> Option<u64> {
        self.counts.get(&word.to_lowercase()).copied()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(w, c)| (w.as_str(), *c))
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected word<TAB>count".into(),
            })?;
            let count: u64 = count.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad count {count:?}"),
            })?;
            *counts.entry(word.to_lowercase()).or_insert(0) += count;
        }
        Ok(FrequencyTable { counts })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, c) in &self.counts {
            let _ = writeln!(out, "{w}\t{c}");
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn build_frequency_table(sentences: &[Sentence]) -> FrequencyTable {
    FrequencyTable::from_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| (t, 1))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityFrequency {
    pub entity: String,
    pub occurrences: usize,
    pub mean_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityFrequencyReport {
    pub entries: Vec<EntityFrequency>,
    /// Entities of the schema with no labeled occurrence.
    pub excluded: Vec<String>,
}

/// Mean corpus frequency of the word occurrences labeled with each entity.
pub fn entity_frequency_stats(d: &Dataset, f: &FrequencyTable) -> EntityFrequencyReport {
    let n = d.schema.len();
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for s in &d.sentences {
        for (t, &l) in s.tokens.iter().zip(&s.labels) {
            sums[l] += f.get(t) as f64;
            counts[l] += 1;
        }
    }
    let mut entries = Vec::new();
    let mut excluded = Vec::new();
    for id in d.schema.entity_ids() {
        let name = d.schema.name(id).unwrap_or_default().to_string();
        if counts[id] == 0 {
            log::warn!("entity {name:?} has no occurrences; excluded from frequency stats");
            excluded.push(name);
            continue;
        }
        entries.push(EntityFrequency {
            entity: name,
            occurrences: counts[id],
            mean_frequency: sums[id] / counts[id] as f64,
        });
    }
    EntityFrequencyReport { entries, excluded }
}

/// Frequencies of every word occurrence labeled with `entity`.
pub fn entity_word_frequencies(d: &Dataset, f: &FrequencyTable, entity: &str) -> Result<Vec<(String, u64)>> {
    let id = d
        .schema
        .id(entity)
        .ok_or_else(|| Error::InvalidInput(format!("unknown entity {entity:?}")))?;
    Ok(d.sentences
        .iter()
        .flat_map(|s| s.tokens.iter().zip(&s.labels))
        .filter(|(_, &l)| l == id)
        .map(|(t, _)| (t.clone(), f.get(t)))
        .collect())
}

pub const MIN_CORRELATION_WORDS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub n: usize,
    /// Spearman correlation of mean-embedding norm against `ln(1 + freq)`.
    pub spearman: f64,
    pub negative: bool,
}

/// Rank correlation between each word's mean-embedding norm and its log
/// frequency, over words present both in the store and in `f`.
pub fn norm_frequency_correlation(store: &EmbeddingStore, f: &FrequencyTable) -> Result<CorrelationReport> {
    let (mut norms, mut logf) = (Vec::new(), Vec::new());
    for (word, mean) in store.word_means() {
        if let Some(c) = f.lookup(&word) {
            norms.push(l2_norm(&mean));
            logf.push((1.0 + c as f64).ln());
        }
    }
    if norms.len() < MIN_CORRELATION_WORDS {
        return Err(Error::InsufficientOverlap { found: norms.len(), required: MIN_CORRELATION_WORDS });
    }
    let rho = spearman(&norms, &logf);
    Ok(CorrelationReport { n: norms.len(), spearman: rho, negative: rho < 0.0 })
}
