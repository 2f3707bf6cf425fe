//! Data artifacts for the frequency/norm analyses: prototype-norm surveys,
//! the PCA-frequency scatter, and the distance-bias probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{entity_word_frequencies, Dataset, FrequencyTable};
use crate::encoder::{embed, EmbeddingStore, ProjectionParams};
use crate::error::{Error, Result};
use crate::math::{argmin, coeff_variation, dot, l2_norm, normalize, pca_top2, pearson, Mat, NormStats};
use crate::protohead::{compute_prototypes, distances, NormalizationMode};
use crate::sampler::Episode;

pub const MIN_SURVEY_EPISODES: usize = 10;
pub const MIN_SCATTER_WORDS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNormRow {
    pub class: String,
    pub episodes: usize,
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub classes: Vec<ClassNormRow>,
    /// Over every entity prototype norm of every episode.
    pub global: NormStats,
}

impl NormReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,episodes,min,avg,max\n");
        for r in &self.classes {
            let _ = writeln!(out, "{},{},{},{},{}", r.class, r.episodes, r.min, r.avg, r.max);
        }
        out
    }
}

/// Pre-normalization entity prototype norms per class across episodes.
pub fn prototype_norm_survey(
    episodes: &[Episode],
    store: &EmbeddingStore,
    params: Option<&ProjectionParams>,
) -> Result<NormReport> {
    if episodes.len() < MIN_SURVEY_EPISODES {
        return Err(Error::InvalidInput(format!(
            "norm survey needs at least {MIN_SURVEY_EPISODES} episodes, got {}",
            episodes.len()
        )));
    }
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for ep in episodes {
        let batch = embed(ep, store, params)?;
        let p = compute_prototypes(&batch.support, &batch.support_labels, batch.n_classes)?;
        for (name, &n) in ep.classes.iter().zip(&p.raw_norms[1..]) {
            per_class.entry(name.clone()).or_default().push(n);
            all.push(n);
        }
    }
    let classes = per_class
        .into_iter()
        .map(|(class, v)| ClassNormRow {
            class,
            episodes: v.len(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            avg: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    Ok(NormReport { classes, global: coeff_variation(&all)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub word: String,
    pub pc1: f64,
    pub pc2: f64,
    pub log_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub rows: Vec<ScatterRow>,
    pub variances: [f64; 2],
    /// Pearson correlation of each component with `ln(1 + freq)`.
    pub corr_pc1: f64,
    pub corr_pc2: f64,
    pub rank_deficient: bool,
}

impl ScatterReport {
    pub fn max_abs_correlation(&self) -> f64 {
        self.corr_pc1.abs().max(self.corr_pc2.abs())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("word,pc1,pc2,log_freq\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.word, r.pc1, r.pc2, r.log_freq);
        }
        out
    }
}

fn scatter(words: Vec<String>, m: Mat, freq: &FrequencyTable) -> Result<ScatterReport> {
    let pca = pca_top2(&m)?;
    let log_freq: Vec<f64> = words.iter().map(|w| (1.0 + freq.get(w) as f64).ln()).collect();
    let pc1: Vec<f64> = pca.coords.row_iter().map(|c| c[0]).collect();
    let pc2: Vec<f64> = pca.coords.row_iter().map(|c| c[1]).collect();
    let (corr_pc1, corr_pc2) = (pearson(&pc1, &log_freq), pearson(&pc2, &log_freq));
    let rows = words
        .into_iter()
        .zip(pc1.iter().zip(&pc2))
        .zip(log_freq)
        .map(|((word, (&pc1, &pc2)), log_freq)| ScatterRow { word, pc1, pc2, log_freq })
        .collect();
    Ok(ScatterReport { rows, variances: pca.variances, corr_pc1, corr_pc2, rank_deficient: pca.rank_deficient })
}

/// Top-two PCA coordinates of each distinct word's mean embedding.
pub fn pca_frequency_scatter(store: &EmbeddingStore, freq: &FrequencyTable) -> Result<ScatterReport> {
    let means = store.word_means();
    if means.len() < MIN_SCATTER_WORDS {
        return Err(Error::InsufficientOverlap { found: means.len(), required: MIN_SCATTER_WORDS });
    }
    let mut m = Mat::with_cols(store.dim());
    let mut words = Vec::with_capacity(means.len());
    for (w, v) in means {
        m.push_row(&v)?;
        words.push(w);
    }
    scatter(words, m, freq)
}

/// Same as [`pca_frequency_scatter`] with one point per token occurrence.
pub fn pca_frequency_scatter_occurrences(store: &EmbeddingStore, freq: &FrequencyTable) -> Result<ScatterReport> {
    if store.len() < MIN_SCATTER_WORDS {
        return Err(Error::InsufficientOverlap { found: store.len(), required: MIN_SCATTER_WORDS });
    }
    let words = (0..store.len()).map(|i| store.word(i).to_string()).collect();
    scatter(words, store.rows().clone(), freq)
}

/// `entity,word,frequency` rows for the named entities.
pub fn entity_histogram_csv(d: &Dataset, f: &FrequencyTable, entities: &[String]) -> Result<String> {
    let mut out = String::from("entity,word,frequency\n");
    for e in entities {
        for (w, n) in entity_word_frequencies(d, f, e)? {
            let _ = writeln!(out, "{e},{w},{n}");
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasScenario {
    pub prototypes: Mat,
    pub query: Vec<f64>,
}

impl BiasScenario {
    /// The two-prototype example where the nearer-in-angle class loses on norm.
    pub fn hand() -> Self {
        BiasScenario { prototypes: Mat::from_rows(&[[0.5, 0.0], [0.0, 3.0]]).unwrap(), query: vec![0.4, 1.2] }
    }

    /// Whether the query makes the same angle with the first two prototypes.
    pub fn is_ambiguous(&self) -> bool {
        if self.prototypes.rows() != 2 {
            return false;
        }
        let cos = |c: &[f64]| dot(c, &self.query) / (l2_norm(c) * l2_norm(&self.query));
        (cos(self.prototypes.row(0)) - cos(self.prototypes.row(1))).abs() <= 1e-9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    /// Predicted class under each mode, in [`NormalizationMode::ALL`] order.
    pub predictions: [usize; 4],
    pub norms: Vec<f64>,
    pub ambiguous: bool,
}

impl ScenarioResult {
    pub fn prediction(&self, mode: NormalizationMode) -> usize {
        self.predictions[NormalizationMode::ALL.iter().position(|&m| m == mode).unwrap()]
    }

    pub fn flipped(&self) -> bool {
        self.prediction(NormalizationMode::None) != self.prediction(NormalizationMode::ProtoOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProbeReport {
    pub scenarios: Vec<ScenarioResult>,
    /// Scenarios where None and ProtoOnly disagree.
    pub flips: usize,
    pub ambiguous: usize,
    /// Fraction of ambiguous queries that None assigns to the smaller-norm prototype.
    pub attraction: Option<f64>,
}

impl BiasProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,ambiguous,norm_1,norm_2,none,proto_only,query_only,both\n");
        for (i, s) in self.scenarios.iter().enumerate() {
            let n = |k: usize| s.norms.get(k).copied().unwrap_or(f64::NAN);
            let p = s.predictions;
            let _ = writeln!(out, "{i},{},{},{},{},{},{},{}", s.ambiguous, n(0), n(1), p[0], p[1], p[2], p[3]);
        }
        out
    }
}

fn classify(s: &BiasScenario, mode: NormalizationMode) -> Result<usize> {
    let raw_norms = s.prototypes.row_norms();
    let protos = crate::protohead::Prototypes {
        c: s.prototypes.clone(),
        class_ids: (0..s.prototypes.rows()).collect(),
        mode: NormalizationMode::None,
        raw_norms,
    };
    let q = Mat::from_rows(&[s.query.as_slice()])?;
    let (p, q) = crate::protohead::apply_normalization(&protos, &q, mode)?;
    Ok(argmin(&distances(q.row(0), &p)?))
}

/// Predictions of every mode on each scenario.
pub fn bias_probe(scenarios: &[BiasScenario]) -> Result<BiasProbeReport> {
    let mut results = Vec::with_capacity(scenarios.len());
    let mut attracted = 0usize;
    let mut ambiguous = 0usize;
    for s in scenarios {
        if s.prototypes.rows() < 2 {
            return Err(Error::InvalidInput("bias scenario needs at least two prototypes".into()));
        }
        let mut predictions = [0; 4];
        for (slot, mode) in predictions.iter_mut().zip(NormalizationMode::ALL) {
            *slot = classify(s, mode)?;
        }
        let norms = s.prototypes.row_norms();
        let amb = s.is_ambiguous();
        if amb {
            ambiguous += 1;
            let smaller = if norms[0] <= norms[1] { 0 } else { 1 };
            attracted += (predictions[0] == smaller) as usize;
        }
        results.push(ScenarioResult { predictions, norms, ambiguous: amb });
    }
    let flips = results.iter().filter(|r| r.flipped()).count();
    Ok(BiasProbeReport {
        scenarios: results,
        flips,
        ambiguous,
        attraction: (ambiguous > 0).then(|| attracted as f64 / ambiguous as f64),
    })
}

/// Log-uniform draw in `[lo, hi]`.
fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// `n` two-class scenarios in `dim` dimensions: prototype directions
/// uniform on the sphere, prototype and query norms log-uniform in
/// `[1, 20]`, each query on the bisector of the two directions. With
/// `unit_prototypes` the prototypes are scaled to unit length.
pub fn auto_scenarios(n: usize, dim: usize, seed: u64, unit_prototypes: bool) -> Vec<BiasScenario> {
    assert!(dim >= 2, "bias scenarios need at least two dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut dir = || {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            normalize(&v)
        };
        let (Some(u1), Some(u2)) = (dir(), dir()) else { continue };
        let Some(bis) = normalize(&u1.iter().zip(&u2).map(|(a, b)| a + b).collect::<Vec<_>>()) else { continue };
        let (n1, n2, r) = if unit_prototypes {
            (1.0, 1.0, log_uniform(&mut rng, 1.0, 20.0))
        } else {
            (log_uniform(&mut rng, 1.0, 20.0), log_uniform(&mut rng, 1.0, 20.0), log_uniform(&mut rng, 1.0, 20.0))
        };
        let c1: Vec<f64> = u1.iter().map(|v| v * n1).collect();
        let c2: Vec<f64> = u2.iter().map(|v| v * n2).collect();
        out.push(BiasScenario {
            prototypes: Mat::from_rows(&[c1, c2]).expect("equal lengths"),
            query: bis.iter().map(|v| v * r).collect(),
        });
    }
    out
}

/// Norm statistics over the rows of a classifier matrix.
pub fn classifier_row_norm_survey(rows: &Mat) -> Result<NormStats> {
    if rows.rows() < 2 {
        return Err(Error::InvalidInput(format!("classifier survey needs at least 2 rows, got {}", rows.rows())));
    }
    coeff_variation(&rows.row_norms())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_scenario_flips() {
        let r = bias_probe(&[BiasScenario::hand()]).unwrap();
        assert_eq!(r.scenarios[0].prediction(NormalizationMode::None), 0);
        assert_eq!(r.scenarios[0].prediction(NormalizationMode::ProtoOnly), 1);
        assert_eq!(r.flips, 1);
    }

    #[test]
    fn unit_prototypes_never_flip() {
        let r = bias_probe(&auto_scenarios(2000, 8, 5, true)).unwrap();
        assert_eq!(r.flips, 0);
        assert!(r.flips <= r.scenarios.len());
    }

    #[test]
    fn auto_queries_are_ambiguous_and_attracted() {
        let r = bias_probe(&auto_scenarios(2000, 8, 5, false)).unwrap();
        assert_eq!(r.ambiguous, 2000);
        assert!(r.attraction.unwrap() > 0.5);
    }

    #[test]
    fn auto_scenarios_are_deterministic() {
        assert_eq!(auto_scenarios(20, 4, 9, false), auto_scenarios(20, 4, 9, false));
        assert_ne!(auto_scenarios(20, 4, 9, false), auto_scenarios(20, 4, 10, false));
    }

    #[test]
    fn single_prototype_scenario_rejected() {
        let s = BiasScenario { prototypes: Mat::from_rows(&[[1.0, 0.0]]).unwrap(), query: vec![1.0, 1.0] };
        assert!(bias_probe(&[s]).is_err());
    }

    #[test]
    fn classifier_rows() {
        let s = classifier_row_norm_survey(&Mat::identity(5)).unwrap();
        assert_eq!((s.min, s.max, s.cv), (1.0, 1.0, 0.0));
        let s = classifier_row_norm_survey(&Mat::from_rows(&[[3.0, 4.0], [6.0, 8.0]]).unwrap()).unwrap();
        assert_eq!((s.min, s.max), (5.0, 10.0));
        assert_abs_diff_eq!(s.cv, 1.0 / 3.0, epsilon = 1e-15);
        assert!(classifier_row_norm_survey(&Mat::from_rows(&[[1.0]]).unwrap()).is_err());
    }
}
