//! K-way N~2N-shot episode sampling and fixed-support task construction.
//!
//! Shot counts are entity mentions (contiguous same-label spans), the unit
//! the "N-shot" benchmarks count. Sentence identity is [`Sentence::id`].

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelId, Sentence};
use crate::error::{Error, Result};

pub const MAX_RETRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k: usize,
    pub n_lo: usize,
    pub n_hi: usize,
    pub q_lo: usize,
    pub q_hi: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(k: usize, n_lo: usize, n_hi: usize, q_lo: usize, q_hi: usize, seed: u64) -> Result<Self> {
        let s = EpisodeSpec { k, n_lo, n_hi, q_lo, q_hi, seed };
        s.validate()?;
        Ok(s)
    }

    /// `K`-way `n~2n`-shot, queries sized like the support.
    pub fn n_to_2n(k: usize, n: usize, seed: u64) -> Result<Self> {
        Self::new(k, n, 2 * n, n, 2 * n, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.n_lo < 1 || self.n_lo > self.n_hi || self.q_lo < 1 || self.q_lo > self.q_hi {
            return Err(Error::InvalidInput(format!(
                "episode spec needs K >= 2, 1 <= n_lo <= n_hi, 1 <= q_lo <= q_hi (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// One sentence of an episode with labels remapped to the episode: `0` is O
/// (including entities outside the episode), `i + 1` is `classes[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSentence {
    pub sent: u64,
    pub tokens: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub index: u64,
    /// Entity names of the K sampled classes.
    pub classes: Vec<String>,
    pub support: Vec<EpisodeSentence>,
    pub query: Vec<EpisodeSentence>,
    /// Support mentions beyond the requested count (fixed-support tasks only).
    pub surplus: usize,
}

/// Replayable form of an episode: one line of an episode JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: u64,
    pub classes: Vec<String>,
    pub support: Vec<u64>,
    pub query: Vec<u64>,
}

impl Episode {
    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            index: self.index,
            classes: self.classes.clone(),
            support: self.support.iter().map(|s| s.sent).collect(),
            query: self.query.iter().map(|s| s.sent).collect(),
        }
    }

    /// Rebuilds an episode from its record against the datasets it was drawn from.
    pub fn from_record(rec: &EpisodeRecord, support_ds: &Dataset, query_ds: &Dataset) -> Result<Self> {
        let resolve = |ds: &Dataset, ids: &[u64]| -> Result<Vec<EpisodeSentence>> {
            let by_id: HashMap<u64, &Sentence> = ds.sentences.iter().map(|s| (s.id, s)).collect();
            let remap = class_map(ds, &rec.classes);
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .map(|s| remap_sentence(s, &remap))
                        .ok_or_else(|| Error::InvalidInput(format!("episode references unknown sentence {id}")))
                })
                .collect()
        };
        Ok(Episode {
            index: rec.index,
            classes: rec.classes.clone(),
            support: resolve(support_ds, &rec.support)?,
            query: resolve(query_ds, &rec.query)?,
            surplus: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn query_tokens(&self) -> usize {
        self.query.iter().map(|s| s.labels.len()).sum()
    }
}

pub fn write_episode_file(episodes: &[Episode]) -> Result<String> {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&serde_json::to_string(&ep.record())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_episode_file(text: &str) -> Result<Vec<EpisodeRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
        })
        .collect()
}

/// Dataset label id → episode label for the given class names.
fn class_map(ds: &Dataset, classes: &[String]) -> Vec<usize> {
    let mut map = vec![0usize; ds.schema.len()];
    for (i, name) in classes.iter().enumerate() {
        if let Some(id) = ds.schema.id(name) {
            map[id] = i + 1;
        }
    }
    map
}

fn remap_sentence(s: &Sentence, map: &[usize]) -> EpisodeSentence {
    EpisodeSentence { sent: s.id, tokens: s.tokens.clone(), labels: s.labels.iter().map(|&l| map[l]).collect() }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-episode generator, a function of `(seed, index)` only.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851f42d4c957f2d))))
}

/// Mention counts per dataset label id for one sentence.
fn mention_counts(s: &Sentence, n_labels: usize) -> Vec<usize> {
    let mut c = vec![0; n_labels];
    for m in s.mentions() {
        c[m.label] += 1;
    }
    c
}

/// Greedy fill: accept a sentence iff it mentions a sampled class and every
/// class stays at or below `hi`; stop once every class reaches `lo`.
fn greedy_fill(
    order: &[usize],
    used: &mut [bool],
    counts: &[Vec<usize>],
    classes: &[LabelId],
    lo: usize,
    hi: usize,
) -> Option<Vec<usize>> {
    let mut have = vec![0usize; classes.len()];
    let mut picked = Vec::new();
    for &si in order {
        if have.iter().all(|&h| h >= lo) {
            break;
        }
        if used[si] {
            continue;
        }
        let c: Vec<usize> = classes.iter().map(|&k| counts[si][k]).collect();
        if c.iter().all(|&x| x == 0) {
            continue;
        }
        if have.iter().zip(&c).any(|(h, x)| h + x > hi) {
            continue;
        }
        for (h, x) in have.iter_mut().zip(&c) {
            *h += x;
        }
        used[si] = true;
        picked.push(si);
    }
    have.iter().all(|&h| h >= lo).then_some(picked)
}

/// Samples episode `episode_index` of the stream defined by `spec`.
pub fn sample_episode(d: &Dataset, spec: &EpisodeSpec, episode_index: u64) -> Result<Episode> {
    spec.validate()?;
    let n_labels = d.schema.len();
    let per_sentence = d.sentence_counts();
    let need = spec.n_lo + spec.q_lo;
    let eligible: Vec<LabelId> = d.schema.entity_ids().filter(|&k| per_sentence[k] >= need).collect();
    if eligible.len() < spec.k {
        let deficient = d.schema.entity_ids().find(|&k| per_sentence[k] < need);
        let (class, reason) = match deficient {
            Some(k) => (
                d.schema.name(k).unwrap_or_default().to_string(),
                format!(
                    "appears in {} sentences, needs {need} disjoint sentences; only {} of {} classes eligible",
                    per_sentence[k],
                    eligible.len(),
                    spec.k
                ),
            ),
            None => (String::new(), format!("dataset has {} entity classes, need {}", n_labels - 1, spec.k)),
        };
        return Err(Error::SamplingInfeasible { class, reason });
    }

    let counts: Vec<Vec<usize>> = d.sentences.iter().map(|s| mention_counts(s, n_labels)).collect();
    let mut rng = episode_rng(spec.seed, episode_index);
    for _ in 0..MAX_RETRIES {
        let mut pool = eligible.clone();
        pool.shuffle(&mut rng);
        let classes: Vec<LabelId> = pool[..spec.k].to_vec();
        let mut order: Vec<usize> = (0..d.sentences.len())
            .filter(|&i| classes.iter().any(|&k| counts[i][k] > 0))
            .collect();
        order.shuffle(&mut rng);
        let mut used = vec![false; d.sentences.len()];
        let Some(support) = greedy_fill(&order, &mut used, &counts, &classes, spec.n_lo, spec.n_hi) else {
            continue;
        };
        let Some(query) = greedy_fill(&order, &mut used, &counts, &classes, spec.q_lo, spec.q_hi) else {
            continue;
        };
        let names: Vec<String> =
            classes.iter().map(|&k| d.schema.name(k).unwrap_or_default().to_string()).collect();
        let map = class_map(d, &names);
        return Ok(Episode {
            index: episode_index,
            classes: names,
            support: support.iter().map(|&i| remap_sentence(&d.sentences[i], &map)).collect(),
            query: query.iter().map(|&i| remap_sentence(&d.sentences[i], &map)).collect(),
            surplus: 0,
        });
    }
    Err(Error::RetryExhausted { retries: MAX_RETRIES, episode_index })
}

/// Samples episodes `start..start + count`, optionally on `workers` threads.
/// The result does not depend on `workers`.
pub fn sample_episodes(d: &Dataset, spec: &EpisodeSpec, start: u64, count: usize, workers: usize) -> Result<Vec<Episode>> {
    let idx: Vec<u64> = (start..start + count as u64).collect();
    if workers <= 1 {
        return idx.iter().map(|&i| sample_episode(d, spec, i)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| idx.par_iter().map(|&i| sample_episode(d, spec, i)).collect())
}

/// Fixed-support task: `shots` mentions of every entity from `support_ds`
/// (greedy sentence cover), the whole of `test` as query.
pub fn make_fixed_support_task(support_ds: &Dataset, test: &Dataset, shots: usize, seed: u64) -> Result<Episode> {
    if shots == 0 {
        return Err(Error::InvalidInput("shots must be at least 1".into()));
    }
    let n_labels = support_ds.schema.len();
    let counts: Vec<Vec<usize>> = support_ds.sentences.iter().map(|s| mention_counts(s, n_labels)).collect();
    let classes: Vec<LabelId> = support_ds.schema.entity_ids().collect();
    for &k in &classes {
        let total: usize = counts.iter().map(|c| c[k]).sum();
        if total < shots {
            return Err(Error::SamplingInfeasible {
                class: support_ds.schema.name(k).unwrap_or_default().to_string(),
                reason: format!("has {total} mentions, needs {shots}"),
            });
        }
    }

    let mut order: Vec<usize> = (0..support_ds.sentences.len()).collect();
    order.shuffle(&mut episode_rng(seed, u64::MAX));
    let mut deficit = vec![shots; n_labels];
    let mut have = vec![0usize; n_labels];
    let mut used = vec![false; order.len()];
    let mut picked = Vec::new();
    while classes.iter().any(|&k| deficit[k] > 0) {
        let mut best: Option<(usize, usize)> = None;
        for &si in &order {
            if used[si] {
                continue;
            }
            let gain: usize = classes.iter().map(|&k| counts[si][k].min(deficit[k])).sum();
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((si, gain));
            }
        }
        let Some((si, _)) = best else { break };
        used[si] = true;
        picked.push(si);
        for &k in &classes {
            have[k] += counts[si][k];
            deficit[k] = deficit[k].saturating_sub(counts[si][k]);
        }
    }
    let surplus = classes.iter().map(|&k| have[k].saturating_sub(shots)).sum();

    let names: Vec<String> =
        classes.iter().map(|&k| support_ds.schema.name(k).unwrap_or_default().to_string()).collect();
    let smap = class_map(support_ds, &names);
    let qmap = class_map(test, &names);
    Ok(Episode {
        index: 0,
        classes: names,
        support: picked.iter().map(|&i| remap_sentence(&support_ds.sentences[i], &smap)).collect(),
        query: test.sentences.iter().map(|s| remap_sentence(s, &qmap)).collect(),
        surplus,
    })
}
