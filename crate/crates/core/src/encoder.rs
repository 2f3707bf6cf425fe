//! Token embeddings: PNE1 dump I/O, the trainable linear tail, and a
//! synthetic generator whose embedding norms fall with word frequency.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, FrequencyTable, LabelSchema, Sentence, Split, OTHER};
use crate::error::{Error, Result};
use crate::math::{axpy, dot, l2_norm, Mat};
use crate::sampler::Episode;

pub const PNE1_MAGIC: &[u8; 4] = b"PNE1";
const PNE1_HEADER: usize = 4 + 4 + 8;

/// Index entry of one embedding row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub sent: u64,
    pub pos: u32,
    pub word: String,
    pub label: String,
}

/// Per-token-occurrence embeddings plus their `(sentence, position)` index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    rows: Mat,
    meta: Vec<RowMeta>,
    index: HashMap<(u64, u32), usize>,
    /// Free-form metadata carried on line 0 of the index file.
    pub metadata: Option<serde_json::Value>,
}

impl EmbeddingStore {
    /// Builds a store; rows must be finite and in `(sent, pos)` order.
    pub fn new(rows: Mat, meta: Vec<RowMeta>) -> Result<Self> {
        if rows.rows() != meta.len() {
            return Err(Error::Consistency(format!(
                "{} embedding rows but {} index entries",
                rows.rows(),
                meta.len()
            )));
        }
        let bad: Vec<usize> = rows
            .row_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFiniteRows { rows: bad });
        }
        let mut index = HashMap::with_capacity(meta.len());
        for (i, m) in meta.iter().enumerate() {
            if i > 0 {
                let prev = &meta[i - 1];
                if (prev.sent, prev.pos) >= (m.sent, m.pos) {
                    return Err(Error::Consistency(format!(
                        "index row {i} ({}, {}) is not after ({}, {})",
                        m.sent, m.pos, prev.sent, prev.pos
                    )));
                }
            }
            index.insert((m.sent, m.pos), i);
        }
        Ok(EmbeddingStore { rows, meta, index, metadata: None })
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn row_id(&self, sent: u64, pos: u32) -> Option<usize> {
        self.index.get(&(sent, pos)).copied()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.rows.row(id)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.meta[id].word
    }

    /// Mean embedding of every distinct word, sorted by word.
    pub fn word_means(&self) -> Vec<(String, Vec<f64>)> {
        let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for (m, row) in self.meta.iter().zip(self.rows.row_iter()) {
            let e = acc.entry(&m.word).or_insert_with(|| (vec![0.0; row.len()], 0));
            axpy(1.0, row, &mut e.0);
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(w, (mut sum, n))| {
                sum.iter_mut().for_each(|x| *x /= n as f64);
                (w.to_string(), sum)
            })
            .collect()
    }

    /// Writes the PNE1 payload to `path` and the index to
    /// [`index_path`]`(path)`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(PNE1_HEADER + self.rows.as_slice().len() * 4);
        buf.extend_from_slice(PNE1_MAGIC);
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in self.rows.as_slice() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;

        let idx = index_path(path);
        let mut out = Vec::new();
        if let Some(meta) = &self.metadata {
            serde_json::to_writer(&mut out, &serde_json::json!({ "meta": meta }))?;
            out.push(b'\n');
        }
        for m in &self.meta {
            serde_json::to_writer(&mut out, m)?;
            out.push(b'\n');
        }
        std::fs::File::create(&idx)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(&idx, e))
    }

    /// Rows of the sentences in `d`, with sentence ids renumbered `0..` in
    /// dataset order (the ids a CoNLL re-read of `d` assigns).
    pub fn rebased(&self, d: &Dataset) -> Result<(Dataset, EmbeddingStore)> {
        let mut rows = Vec::with_capacity(d.token_count());
        let mut meta = Vec::with_capacity(d.token_count());
        let mut sentences = d.sentences.clone();
        for (new_id, s) in sentences.iter_mut().enumerate() {
            for pos in 0..s.len() as u32 {
                let id = self.row_id(s.id, pos).ok_or_else(|| {
                    Error::Consistency(format!("no embedding row for sentence {} position {pos}", s.id))
                })?;
                rows.push(self.row(id).to_vec());
                meta.push(RowMeta { sent: new_id as u64, ..self.meta[id].clone() });
            }
            s.id = new_id as u64;
        }
        let mut store = EmbeddingStore::new(Mat::from_rows(&rows)?, meta)?;
        store.metadata = self.metadata.clone();
        Ok((Dataset::new(sentences, d.schema.clone(), d.split)?, store))
    }

    /// Rounds every value through `f32`, matching what a write/load cycle yields.
    pub fn quantized(&self) -> Self {
        let mut s = self.clone();
        s.rows.as_mut_slice().iter_mut().for_each(|v| *v = *v as f32 as f64);
        s
    }
}

/// Companion index path: `dir/name.ext` → `dir/name.index.jsonl`.
pub fn index_path(dump: &Path) -> PathBuf {
    dump.with_extension("index.jsonl")
}

/// The PNE1 payload alone, without the index. Used for classifier-row dumps.
pub fn read_pne1_rows(path: &Path) -> Result<Mat> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < PNE1_HEADER || &bytes[..4] != PNE1_MAGIC {
        return Err(Error::Format(format!("{} is not a PNE1 dump", path.display())));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("PNE1 dimension is 0".into()));
    }
    let payload = &bytes[PNE1_HEADER..];
    let expected = n.checked_mul(dim).and_then(|x| x.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Consistency(format!(
            "header declares {n} rows of dim {dim} but payload has {} bytes",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Mat::from_vec(n, dim, data)
}

pub fn load_embedding_dump(path: &Path) -> Result<EmbeddingStore> {
    let rows = read_pne1_rows(path)?;
    let idx = index_path(path);
    let file = std::fs::File::open(&idx).map_err(|e| Error::io(&idx, e))?;
    let mut meta = Vec::with_capacity(rows.rows());
    let mut metadata = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&idx, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("{}: {e}", idx.display()),
        })?;
        if lineno == 0 && value.get("meta").is_some() && value.get("sent").is_none() {
            metadata = value.get("meta").cloned();
            continue;
        }
        let m: RowMeta = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("{}: {e}", idx.display()),
        })?;
        meta.push(m);
    }
    let mut store = EmbeddingStore::new(rows, meta)?;
    store.metadata = metadata;
    Ok(store)
}

/// Trainable linear map `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// D_out × D_in.
    pub w: Mat,
    pub b: Vec<f64>,
    pub trainable: bool,
}

const PARAMS_MAGIC: &[u8; 4] = b"PNP1";

impl ProjectionParams {
    pub fn new(w: Mat, b: Vec<f64>, trainable: bool) -> Result<Self> {
        if w.rows() != b.len() {
            return Err(Error::DimensionMismatch { expected: w.rows(), actual: b.len() });
        }
        if w.rows() < 2 {
            return Err(Error::InvalidInput("projection output dimension must be at least 2".into()));
        }
        if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("projection parameters must be finite".into()));
        }
        Ok(ProjectionParams { w, b, trainable })
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionParams { w: Mat::identity(dim), b: vec![0.0; dim], trainable: false }
    }

    /// `W ~ U(-1/√D_in, 1/√D_in)`, `b = 0`.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let a = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| rng.random_range(-a..a)).collect();
        ProjectionParams {
            w: Mat::from_vec(d_out, d_in, data).expect("shape"),
            b: vec![0.0; d_out],
            trainable: true,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.mul_vec(x);
        axpy(1.0, &self.b, &mut y);
        y
    }

    pub fn apply_rows(&self, m: &Mat) -> Mat {
        let mut out = Mat::with_cols(self.d_out());
        for r in m.row_iter() {
            out.push_row(&self.apply(r)).expect("shape");
        }
        out
    }

    /// Flat parameter view: W row-major, then b.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.as_slice().to_vec();
        v.extend_from_slice(&self.b);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let nw = self.w.as_slice().len();
        self.w.as_mut_slice().copy_from_slice(&flat[..nw]);
        self.b.copy_from_slice(&flat[nw..]);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in() as u32).to_le_bytes());
        out.push(self.trainable as u8);
        for v in self.to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != PARAMS_MAGIC {
            return Err(Error::Format("not a PNP1 parameter file".into()));
        }
        let d_out = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d_in = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let trainable = bytes[12] != 0;
        let body = &bytes[13..];
        if body.len() != (d_out * d_in + d_out) * 8 {
            return Err(Error::Consistency("parameter payload size does not match header".into()));
        }
        let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let w = Mat::from_vec(d_out, d_in, flat[..d_out * d_in].to_vec())?;
        ProjectionParams::new(w, flat[d_out * d_in..].to_vec(), trainable)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Support and query rows of one episode, with episode-local labels
/// (`0` = O, `1..=K` = sampled classes).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    /// Number of episode classes including O.
    pub n_classes: usize,
    pub support: Mat,
    pub support_labels: Vec<usize>,
    pub query: Mat,
    pub query_labels: Vec<usize>,
}

/// Looks up the raw store rows of every support and query token.
pub fn gather(ep: &Episode, support_store: &EmbeddingStore, query_store: &EmbeddingStore) -> Result<EpisodeBatch> {
    fn collect(
        items: &[crate::sampler::EpisodeSentence],
        store: &EmbeddingStore,
    ) -> Result<(Mat, Vec<usize>)> {
        let mut m = Mat::with_cols(store.dim());
        let mut labels = Vec::new();
        for item in items {
            for (pos, &l) in item.labels.iter().enumerate() {
                let id = store.row_id(item.sent, pos as u32).ok_or_else(|| Error::Coverage {
                    sent: item.sent,
                    pos: pos as u32,
                    word: item.tokens.get(pos).cloned().unwrap_or_default(),
                })?;
                m.push_row(store.row(id))?;
                labels.push(l);
            }
        }
        Ok((m, labels))
    }
    if support_store.dim() != query_store.dim() {
        return Err(Error::DimensionMismatch { expected: support_store.dim(), actual: query_store.dim() });
    }
    let (support, support_labels) = collect(&ep.support, support_store)?;
    let (query, query_labels) = collect(&ep.query, query_store)?;
    Ok(EpisodeBatch { n_classes: ep.classes.len() + 1, support, support_labels, query, query_labels })
}

/// Gathers an episode from one store and applies the projection (identity
/// when `proj` is `None`).
pub fn embed(ep: &Episode, store: &EmbeddingStore, proj: Option<&ProjectionParams>) -> Result<EpisodeBatch> {
    embed_with(ep, store, store, proj)
}

pub fn embed_with(
    ep: &Episode,
    support_store: &EmbeddingStore,
    query_store: &EmbeddingStore,
    proj: Option<&ProjectionParams>,
) -> Result<EpisodeBatch> {
    let mut batch = gather(ep, support_store, query_store)?;
    if let Some(p) = proj {
        if p.d_in() != batch.support.cols() {
            return Err(Error::DimensionMismatch { expected: p.d_in(), actual: batch.support.cols() });
        }
        batch.support = p.apply_rows(&batch.support);
        batch.query = p.apply_rows(&batch.query);
    }
    Ok(batch)
}

/// Configuration of the synthetic frequency-biased corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Entity classes, split across train/dev/test.
    pub n_classes: usize,
    /// Total vocabulary, entity words and O words together.
    pub vocab_size: usize,
    /// Share of the vocabulary labeled O, spread evenly over frequency ranks.
    pub other_fraction: f64,
    pub dim: usize,
    /// Per-coordinate Gaussian noise std, identical for every class. `0`
    /// gives noise-free embeddings.
    pub cluster_std: f64,
    /// Frequency of the rank-r word is `max_frequency / r^zipf_exponent`.
    pub zipf_exponent: f64,
    pub max_frequency: f64,
    /// Word norm scale is `norm_base / (1 + ln(1 + freq))`.
    pub norm_base: f64,
    /// Weight of the direction shared by every class in each class
    /// direction; 0 gives independent directions.
    pub anisotropy: f64,
    /// Fractions of entity classes assigned to train, dev, test.
    pub split_fractions: [f64; 3],
    pub sentences: [usize; 3],
    pub sentence_len: usize,
    /// Randomly reassign frequencies within the test vocabulary, so test
    /// classes lose the frequency bands the training classes have.
    pub freq_shift: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 30,
            vocab_size: 3000,
            other_fraction: 0.2,
            dim: 32,
            cluster_std: 0.3,
            zipf_exponent: 2.0,
            max_frequency: 1e8,
            norm_base: 100.0,
            anisotropy: 0.8,
            split_fractions: [0.5, 0.2, 0.3],
            sentences: [2000, 600, 1000],
            sentence_len: 8,
            freq_shift: true,
            seed: 13,
        }
    }
}

impl SyntheticConfig {
    /// Equal frequencies, tiny norms and light noise: every class looks
    /// alike to an untrained model.
    pub fn symmetric() -> Self {
        SyntheticConfig { zipf_exponent: 0.0, norm_base: 1.0, cluster_std: 0.1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synthetic config: {m}")));
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return bad("cluster_std must be finite and non-negative");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return bad("anisotropy must lie in [0, 1)");
        }
        if !(self.other_fraction > 0.0 && self.other_fraction < 1.0) {
            return bad("other_fraction must lie in (0, 1)");
        }
        if self.split_fractions.iter().any(|f| !(*f > 0.0)) {
            return bad("split fractions must be positive");
        }
        let counts = self.class_counts();
        if counts.iter().any(|&c| c < 2) {
            return bad("every split needs at least 2 entity classes");
        }
        let entity_words = self.vocab_size - self.other_words();
        if entity_words < self.n_classes || self.other_words() == 0 {
            return bad("vocabulary too small for the class count");
        }
        if self.sentence_len < 3 {
            return bad("sentence_len must be at least 3");
        }
        if self.norm_base <= 0.0 || self.max_frequency < 1.0 || self.zipf_exponent < 0.0 {
            return bad("norm_base, max_frequency and zipf_exponent out of range");
        }
        Ok(())
    }

    /// Number of entity classes per split (train, dev, test), summing to
    /// `n_classes`.
    pub fn class_counts(&self) -> [usize; 3] {
        let total: f64 = self.split_fractions.iter().sum();
        let train = (self.n_classes as f64 * self.split_fractions[0] / total).round() as usize;
        let dev = (self.n_classes as f64 * self.split_fractions[1] / total).round() as usize;
        let train = train.min(self.n_classes);
        let dev = dev.min(self.n_classes - train);
        [train, dev, self.n_classes - train - dev]
    }

    fn other_words(&self) -> usize {
        ((self.vocab_size as f64) * self.other_fraction).round() as usize
    }

    pub fn norm_scale(&self, freq: f64) -> f64 {
        norm_scale(self.norm_base, freq)
    }
}

/// `norm_base / (1 + ln(1 + freq))`.
pub fn norm_scale(norm_base: f64, freq: f64) -> f64 {
    norm_base / (1.0 + (1.0 + freq).ln())
}

/// Output of [`synth_generate`]. All splits share one store; sentence ids are
/// unique across splits.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub store: EmbeddingStore,
    pub frequencies: FrequencyTable,
    /// Unit mean direction of each class; index 0 is O, then `ent00`, `ent01`, ...
    pub class_directions: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn class_name(k: usize) -> String {
    format!("ent{k:02}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = l2_norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates a labeled corpus with embeddings `s(w)·u_k + ε`.
///
/// Word frequencies follow a Zipf law over vocabulary ranks; O words take
/// every `1/other_fraction`-th rank, entity classes take contiguous rank
/// bands. Train, dev and test use disjoint entity classes, interleaved over
/// the bands.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;

    // Class directions around a shared axis.
    let shared = unit_vec(&mut rng, d);
    let n_dirs = cfg.n_classes + 1;
    let directions: Vec<Vec<f64>> = (0..n_dirs)
        .map(|_| {
            let mut g = gaussian_vec(&mut rng, d);
            let proj = dot(&g, &shared);
            axpy(-proj, &shared, &mut g);
            let gn = l2_norm(&g);
            g.iter_mut().for_each(|x| *x /= gn);
            let a = cfg.anisotropy;
            let b = (1.0 - a * a).sqrt();
            g.iter().zip(&shared).map(|(gi, si)| a * si + b * gi).collect()
        })
        .collect();

    // Entity classes per split.
    let mut class_perm: Vec<usize> = (1..=cfg.n_classes).collect();
    class_perm.shuffle(&mut rng);
    let [n_train, n_dev, _] = cfg.class_counts();
    let split_classes = [
        class_perm[..n_train].to_vec(),
        class_perm[n_train..n_train + n_dev].to_vec(),
        class_perm[n_train + n_dev..].to_vec(),
    ];
    // Frequency bands interleave the splits so every split spans the full
    // frequency range.
    let mut keyed: Vec<(f64, usize)> = split_classes
        .iter()
        .flat_map(|cs| cs.iter().enumerate().map(|(i, &k)| ((i as f64 + 0.5) / cs.len() as f64, k)))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let band_order: Vec<usize> = keyed.into_iter().map(|(_, k)| k).collect();

    // Vocabulary ranks → owning class (0 = O).
    let n_other = cfg.other_words();
    let n_entity_words = cfg.vocab_size - n_other;
    let stride = cfg.vocab_size as f64 / n_other as f64;
    let mut is_other = vec![false; cfg.vocab_size];
    for j in 0..n_other {
        is_other[((j as f64 * stride) as usize).min(cfg.vocab_size - 1)] = true;
    }
    let per_class = n_entity_words / cfg.n_classes;
    let mut owner = vec![0usize; cfg.vocab_size];
    let mut entity_slot = 0usize;
    for (rank, o) in owner.iter_mut().enumerate() {
        if is_other[rank] {
            continue;
        }
        let band = (entity_slot / per_class.max(1)).min(cfg.n_classes - 1);
        *o = band_order[band];
        entity_slot += 1;
    }
    let mut freq: Vec<f64> = (0..cfg.vocab_size)
        .map(|r| (cfg.max_frequency / ((r + 1) as f64).powf(cfg.zipf_exponent)).round().max(1.0))
        .collect();


    if cfg.freq_shift {
        let test_words: Vec<usize> =
            (0..cfg.vocab_size).filter(|&w| split_classes[2].contains(&owner[w])).collect();
        let mut shuffled: Vec<f64> = test_words.iter().map(|&w| freq[w]).collect();
        shuffled.shuffle(&mut rng);
        for (&w, f) in test_words.iter().zip(shuffled) {
            freq[w] = f;
        }
    }

    let words_of: Vec<Vec<usize>> =
        (0..n_dirs).map(|k| (0..cfg.vocab_size).filter(|&w| owner[w] == k).collect()).collect();
    let word_name = |w: usize| format!("w{w:05}");

    let mut meta = Vec::new();
    let mut data = Vec::new();
    let mut next_id = 0u64;
    let mut datasets = Vec::new();
    for (si, split) in [Split::Train, Split::Dev, Split::Test].into_iter().enumerate() {
        let classes = &split_classes[si];
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        let names: Vec<String> = sorted.iter().map(|&k| class_name(k - 1)).collect();
        let schema = LabelSchema::from_names(&names)?;
        let mut sentences = Vec::with_capacity(cfg.sentences[si]);
        for _ in 0..cfg.sentences[si] {
            let len = cfg.sentence_len;
            let mut owners = vec![0usize; len];
            let n_mentions = if rng.random_bool(0.5) { 1 } else { 2 };
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            for &p in positions.iter().take(n_mentions) {
                owners[p] = classes[rng.random_range(0..classes.len())];
            }
            let mut tokens = Vec::with_capacity(len);
            let mut labels = Vec::with_capacity(len);
            let mut raw = Vec::with_capacity(len);
            for (pos, &k) in owners.iter().enumerate() {
                let w = words_of[k][rng.random_range(0..words_of[k].len())];
                let label = if k == 0 { OTHER.to_string() } else { class_name(k - 1) };
                let scale = cfg.norm_scale(freq[w]);
                for (u, z) in directions[k].iter().zip(gaussian_vec(&mut rng, d)) {
                    data.push(scale * u + cfg.cluster_std * z);
                }
                meta.push(RowMeta { sent: next_id, pos: pos as u32, word: word_name(w), label: label.clone() });
                labels.push(schema.id(&label).expect("label in schema"));
                raw.push(label);
                tokens.push(word_name(w));
            }
            sentences.push(Sentence {
                id: next_id,
                tokens,
                labels,
                raw_labels: raw,
                source_doc: format!("synth-{split:?}").to_lowercase(),
            });
            next_id += 1;
        }
        datasets.push(Dataset::new(sentences, schema, split)?);
    }

    let rows = Mat::from_vec(meta.len(), d, data)?;
    let mut store = EmbeddingStore::new(rows, meta)?;
    store.metadata = Some(serde_json::json!({ "source": "synthetic", "seed": cfg.seed }));
    let frequencies =
        FrequencyTable::from_counts((0..cfg.vocab_size).map(|w| (word_name(w), freq[w] as u64)));
    let mut it = datasets.into_iter();
    Ok(SyntheticCorpus {
        train: it.next().unwrap(),
        dev: it.next().unwrap(),
        test: it.next().unwrap(),
        store,
        frequencies,
        class_directions: directions,
    })
}
