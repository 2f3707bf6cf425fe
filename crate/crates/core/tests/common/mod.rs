#![allow(dead_code)]

use protonorm::corpus::{Dataset, LabelSchema, Sentence, Split};
use protonorm::encoder::{EmbeddingStore, RowMeta};
use protonorm::math::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n_sent` sentences of `len` tokens, one single-token mention each, with
/// embeddings drawn by `embed(class, rng)` (class 0 is O).
pub fn planted_corpus(
    n_classes: usize,
    n_sent: usize,
    len: usize,
    seed: u64,
    mut embed: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> (Dataset, EmbeddingStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (1..=n_classes).map(|k| format!("C{k}")).collect();
    let schema = LabelSchema::from_names(&names).unwrap();
    let mut sentences = Vec::new();
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for id in 0..n_sent as u64 {
        let class = 1 + (id as usize) % n_classes;
        let at = rng.random_range(0..len);
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut raw = Vec::new();
        for pos in 0..len {
            let k = if pos == at { class } else { 0 };
            let word = if k == 0 { format!("o{}", rng.random_range(0..50)) } else { format!("c{k}w{}", rng.random_range(0..5)) };
            let label = if k == 0 { "O".to_string() } else { names[k - 1].clone() };
            rows.push(embed(k, &mut rng));
            meta.push(RowMeta { sent: id, pos: pos as u32, word: word.clone(), label: label.clone() });
            tokens.push(word);
            labels.push(k);
            raw.push(label);
        }
        sentences.push(Sentence { id, tokens, labels, raw_labels: raw, source_doc: "doc0".into() });
    }
    let store = EmbeddingStore::new(Mat::from_rows(&rows).unwrap(), meta).unwrap();
    (Dataset::new(sentences, schema, Split::Train).unwrap(), store)
}

pub fn unit(d: usize, axis: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[axis % d] = 1.0;
    v
}
