//! Prototypical classifier head: mean prototypes, the four normalization
//! modes, squared-Euclidean class probabilities and the episode loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmin, axpy, dot, l2_norm, normalize_rows, softmax_neg, squared_euclidean, Mat};

/// Which side of the distance is projected to unit length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    None,
    /// Unit prototypes, raw queries.
    ProtoOnly,
    QueryOnly,
    Both,
}

impl NormalizationMode {
    pub const ALL: [NormalizationMode; 4] =
        [NormalizationMode::None, NormalizationMode::ProtoOnly, NormalizationMode::QueryOnly, NormalizationMode::Both];

    pub fn normalizes_prototypes(self) -> bool {
        matches!(self, NormalizationMode::ProtoOnly | NormalizationMode::Both)
    }

    pub fn normalizes_queries(self) -> bool {
        matches!(self, NormalizationMode::QueryOnly | NormalizationMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::None => "none",
            NormalizationMode::ProtoOnly => "proto_only",
            NormalizationMode::QueryOnly => "query_only",
            NormalizationMode::Both => "both",
        }
    }
}

impl fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => NormalizationMode::None,
            "proto_only" | "proto" => NormalizationMode::ProtoOnly,
            "query_only" | "query" | "ab1" => NormalizationMode::QueryOnly,
            "both" | "ab2" => NormalizationMode::Both,
            other => return Err(Error::InvalidInput(format!("unknown normalization mode {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prototypes {
    /// One row per episode class, O first.
    pub c: Mat,
    pub class_ids: Vec<usize>,
    pub mode: NormalizationMode,
    /// Row norms before any normalization.
    pub raw_norms: Vec<f64>,
}

impl Prototypes {
    pub fn len(&self) -> usize {
        self.c.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.rows() == 0
    }
}

/// Per-class arithmetic mean of the support rows. `labels[i]` must be in
/// `0..n_classes`.
pub fn compute_prototypes(support: &Mat, labels: &[usize], n_classes: usize) -> Result<Prototypes> {
    if labels.len() != support.rows() {
        return Err(Error::DimensionMismatch { expected: support.rows(), actual: labels.len() });
    }
    let mut c = Mat::zeros(n_classes, support.cols());
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in support.row_iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::InvalidInput(format!("support label {l} outside 0..{n_classes}")));
        }
        axpy(1.0, row, c.row_mut(l));
        counts[l] += 1;
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::DegenerateClass { class: k });
        }
        c.row_mut(k).iter_mut().for_each(|x| *x /= n as f64);
    }
    let raw_norms = c.row_norms();
    Ok(Prototypes { c, class_ids: (0..n_classes).collect(), mode: NormalizationMode::None, raw_norms })
}

/// Applies `mode` to prototypes and queries. `None` returns both unchanged.
pub fn apply_normalization(p: &Prototypes, queries: &Mat, mode: NormalizationMode) -> Result<(Prototypes, Mat)> {
    let mut out = p.clone();
    out.mode = mode;
    if mode.normalizes_prototypes() {
        out.c = normalize_rows(&p.c)?;
    }
    let q = if mode.normalizes_queries() { normalize_rows(queries)? } else { queries.clone() };
    Ok((out, q))
}

/// Squared distances from `x` to every prototype row.
pub fn distances(x: &[f64], p: &Prototypes) -> Result<Vec<f64>> {
    p.c.row_iter().map(|c| squared_euclidean(x, c)).collect()
}

/// `p_k ∝ exp(-‖x − c_k‖²)`. The prototypes are used as given; normalize
/// them first with [`apply_normalization`].
pub fn class_probabilities(x: &[f64], p: &Prototypes) -> Result<Vec<f64>> {
    Ok(softmax_neg(&distances(x, p)?))
}

/// Class with the smallest distance, lowest index on ties.
pub fn predict(x: &[f64], p: &Prototypes) -> Result<usize> {
    Ok(argmin(&distances(x, p)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeOutput {
    pub probs: Mat,
    pub predictions: Vec<usize>,
    /// Mean cross-entropy over query tokens.
    pub loss: f64,
    pub distances: Mat,
    pub prototypes: Prototypes,
}

/// `-ln softmax(-d)[y]` computed through log-sum-exp.
pub(crate) fn neg_log_prob(d: &[f64], y: usize) -> f64 {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let lse: f64 = d.iter().map(|v| (min - v).exp()).sum::<f64>().ln();
    d[y] - min + lse
}

/// Full forward pass of one episode on already-embedded rows.
pub fn episode_forward(
    support: &Mat,
    support_labels: &[usize],
    query: &Mat,
    query_labels: &[usize],
    n_classes: usize,
    mode: NormalizationMode,
) -> Result<EpisodeOutput> {
    if query.rows() == 0 {
        return Err(Error::InvalidInput("episode has no query tokens".into()));
    }
    if query_labels.len() != query.rows() {
        return Err(Error::DimensionMismatch { expected: query.rows(), actual: query_labels.len() });
    }
    if query.cols() != support.cols() {
        return Err(Error::DimensionMismatch { expected: support.cols(), actual: query.cols() });
    }
    let raw = compute_prototypes(support, support_labels, n_classes)?;
    let (protos, q) = apply_normalization(&raw, query, mode)?;
    let mut dist = Mat::zeros(q.rows(), n_classes);
    let mut probs = Mat::zeros(q.rows(), n_classes);
    let mut predictions = Vec::with_capacity(q.rows());
    let mut loss = 0.0;
    for (j, (x, &y)) in q.row_iter().zip(query_labels).enumerate() {
        if y >= n_classes {
            return Err(Error::InvalidInput(format!("query label {y} outside 0..{n_classes}")));
        }
        let d = distances(x, &protos)?;
        loss += neg_log_prob(&d, y);
        predictions.push(argmin(&d));
        probs.row_mut(j).copy_from_slice(&softmax_neg(&d));
        dist.row_mut(j).copy_from_slice(&d);
    }
    Ok(EpisodeOutput { probs, predictions, loss: loss / q.rows() as f64, distances: dist, prototypes: protos })
}

/// The three terms of `‖x − c‖² = ‖x‖² − 2xᵀc + ‖c‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceTerms {
    pub query_sq: f64,
    pub cross: f64,
    pub proto_sq: f64,
}

impl DistanceTerms {
    pub fn distance(&self) -> f64 {
        self.query_sq - 2.0 * self.cross + self.proto_sq
    }
}

pub fn distance_decomposition(x: &[f64], c: &[f64]) -> Result<DistanceTerms> {
    if x.len() != c.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: c.len() });
    }
    Ok(DistanceTerms { query_sq: dot(x, x), cross: dot(x, c), proto_sq: dot(c, c) })
}

/// Convenience for diagnostics: prototype norms after `mode`.
pub fn prototype_norms(p: &Prototypes) -> Vec<f64> {
    p.c.row_iter().map(l2_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Mat {
        Mat::from_rows(r).unwrap()
    }

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, d: usize) -> Mat {
        Mat::from_vec(r, d, (0..r * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn prototype_means() {
        let p = compute_prototypes(&rows(&[&[1.0, 2.0], &[5.0, -1.0]]), &[1, 0], 2).unwrap();
        assert_eq!(p.c.row(0), &[5.0, -1.0]);
        assert_eq!(p.c.row(1), &[1.0, 2.0]);
        let p = compute_prototypes(&rows(&[&[0.0, 0.0], &[2.0, 2.0]]), &[0, 0], 1).unwrap();
        assert_eq!(p.c.row(0), &[1.0, 1.0]);
        assert!(matches!(
            compute_prototypes(&rows(&[&[0.0, 1.0]]), &[0], 2),
            Err(Error::DegenerateClass { class: 1 })
        ));
    }

    #[test]
    fn prototype_matches_summation_and_grid_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_mat(&mut rng, 5, 2);
        let p = compute_prototypes(&s, &[0; 5], 1).unwrap();
        let mut sum = [0.0; 2];
        for r in s.row_iter() {
            sum[0] += r[0];
            sum[1] += r[1];
        }
        assert_abs_diff_eq!(p.c[(0, 0)], sum[0] / 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.c[(0, 1)], sum[1] / 5.0, epsilon = 1e-12);
        let cost = |c: &[f64]| s.row_iter().map(|r| squared_euclidean(r, c).unwrap()).sum::<f64>();
        let at_mean = cost(p.c.row(0));
        for i in -20..=20 {
            for j in -20..=20 {
                let c = [p.c[(0, 0)] + i as f64 * 0.05, p.c[(0, 1)] + j as f64 * 0.05];
                assert!(at_mean <= cost(&c) + 1e-12);
            }
        }
    }

    #[test]
    fn normalization_modes() {
        let p = compute_prototypes(&rows(&[&[3.0, 4.0]]), &[0], 1).unwrap();
        let q = rows(&[&[10.0, 0.0]]);
        let (pn, qn) = apply_normalization(&p, &q, NormalizationMode::ProtoOnly).unwrap();
        assert_abs_diff_eq!(pn.c[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(pn.c[(0, 1)], 0.8, epsilon = 1e-15);
        assert_eq!(qn, q);
        assert_eq!(pn.raw_norms, vec![5.0]);

        let (p0, q0) = apply_normalization(&p, &q, NormalizationMode::None).unwrap();
        assert_eq!(p0.c.as_slice(), p.c.as_slice());
        assert_eq!(q0, q);

        let (pq, qq) = apply_normalization(&p, &q, NormalizationMode::QueryOnly).unwrap();
        assert_eq!(pq.c, p.c);
        assert_eq!(qq.row(0), &[1.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_mat(&mut rng, 6, 4);
        let p = compute_prototypes(&s, &[0, 1, 2, 0, 1, 2], 3).unwrap();
        let q = random_mat(&mut rng, 9, 4);
        let (pb, qb) = apply_normalization(&p, &q, NormalizationMode::Both).unwrap();
        for n in pb.c.row_norms().into_iter().chain(qb.row_norms()) {
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
        }

        let z = compute_prototypes(&rows(&[&[0.0, 0.0]]), &[0], 1).unwrap();
        assert!(matches!(
            apply_normalization(&z, &q, NormalizationMode::ProtoOnly),
            Err(Error::DegeneratePrototype { .. })
        ));
    }

    #[test]
    fn hand_bias_flip() {
        // classes: 0 = (0.5, 0), 1 = (0, 3); query (0.4, 1.2)
        let s = rows(&[&[0.5, 0.0], &[0.0, 3.0]]);
        let p = compute_prototypes(&s, &[0, 1], 2).unwrap();
        let x = [0.4, 1.2];
        let d = distances(&x, &p).unwrap();
        assert_abs_diff_eq!(d[0], 1.45, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 3.40, epsilon = 1e-12);
        assert_eq!(predict(&x, &p).unwrap(), 0);

        let (pn, _) = apply_normalization(&p, &Mat::with_cols(2), NormalizationMode::ProtoOnly).unwrap();
        let d = distances(&x, &pn).unwrap();
        assert_abs_diff_eq!(d[0], 1.80, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.20, epsilon = 1e-12);
        assert_eq!(predict(&x, &pn).unwrap(), 1);
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let s = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]);
        let p = compute_prototypes(&s, &[0, 1, 2, 3], 4).unwrap();
        for v in class_probabilities(&[0.0, 0.0], &p).unwrap() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let out = episode_forward(&s, &[0, 1, 2, 3], &rows(&[&[0.0, 0.0], &[0.0, 0.0]]), &[2, 1], 4, NormalizationMode::None)
            .unwrap();
        assert_abs_diff_eq!(out.loss, 4f64.ln(), epsilon = 1e-15);
        assert_eq!(out.predictions, vec![0, 0]);
    }

    #[test]
    fn query_at_prototype_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_mat(&mut rng, 4, 3);
        let p = compute_prototypes(&s, &[0, 1, 2, 3], 4).unwrap();
        for k in 0..4 {
            let probs = class_probabilities(p.c.row(k), &p).unwrap();
            let best = probs.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| *v).fold(0.0, f64::max);
            assert!(probs[k] > best);
        }
    }

    #[test]
    fn separated_clusters_have_vanishing_loss() {
        let s = rows(&[&[100.0, 0.0], &[0.0, 100.0], &[-100.0, 0.0]]);
        let q = rows(&[&[100.0, 0.0], &[0.0, 100.0], &[-100.0, 0.0]]);
        let out = episode_forward(&s, &[0, 1, 2], &q, &[0, 1, 2], 3, NormalizationMode::None).unwrap();
        assert!(out.loss < 1e-12);
        assert_eq!(out.predictions, vec![0, 1, 2]);
    }

    #[test]
    fn loss_matches_per_token_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_mat(&mut rng, 9, 5);
        let sl = [0, 1, 2, 0, 1, 2, 0, 1, 2];
        let q = random_mat(&mut rng, 7, 5);
        let ql = [0, 2, 1, 1, 0, 2, 2];
        for mode in NormalizationMode::ALL {
            let out = episode_forward(&s, &sl, &q, &ql, 3, mode).unwrap();
            // independent recomputation: explicit means, explicit exp/sum
            let mut protos = vec![vec![0.0; 5]; 3];
            for (r, &l) in s.row_iter().zip(&sl) {
                for (a, b) in protos[l].iter_mut().zip(r) {
                    *a += b / 3.0;
                }
            }
            if mode.normalizes_prototypes() {
                for p in &mut protos {
                    let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    p.iter_mut().for_each(|v| *v /= n);
                }
            }
            let mut total = 0.0;
            for (r, &y) in q.row_iter().zip(&ql) {
                let mut x = r.to_vec();
                if mode.normalizes_queries() {
                    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    x.iter_mut().for_each(|v| *v /= n);
                }
                let e: Vec<f64> = protos
                    .iter()
                    .map(|p| (-x.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).exp())
                    .collect();
                total += -(e[y] / e.iter().sum::<f64>()).ln();
            }
            assert_abs_diff_eq!(out.loss, total / 7.0, epsilon = 1e-9);
            for row in out.probs.row_iter() {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn decomposition_cases() {
        let t = distance_decomposition(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((t.query_sq, t.cross, t.proto_sq), (1.0, 0.0, 1.0));
        assert_eq!(t.distance(), 2.0);
        let x = [2.0, -3.0, 0.5];
        let t = distance_decomposition(&x, &x).unwrap();
        assert_eq!((t.query_sq, t.cross, t.proto_sq), (13.25, 13.25, 13.25));
        assert_eq!(t.distance(), 0.0);
    }

    #[test]
    fn mode_parsing() {
        for m in NormalizationMode::ALL {
            assert_eq!(m.as_str().parse::<NormalizationMode>().unwrap(), m);
        }
        assert!("sideways".parse::<NormalizationMode>().is_err());
    }

    proptest! {
        #[test]
        fn decomposition_identity(
            x in prop::collection::vec(-20.0f64..20.0, 5),
            c in prop::collection::vec(-20.0f64..20.0, 5),
        ) {
            let t = distance_decomposition(&x, &c).unwrap();
            let d = squared_euclidean(&x, &c).unwrap();
            prop_assert!((t.distance() - d).abs() <= 1e-9 * (1.0 + t.query_sq + t.proto_sq));
        }

        #[test]
        fn shift_equivariance_under_none(seed in 0u64..500, t in prop::collection::vec(-50.0f64..50.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_mat(&mut rng, 6, 3);
            let q = random_mat(&mut rng, 4, 3);
            let sl = [0, 1, 2, 0, 1, 2];
            let ql = [0, 1, 2, 1];
            let shift = |m: &Mat| {
                let mut m = m.clone();
                for i in 0..m.rows() {
                    axpy(1.0, &t, m.row_mut(i));
                }
                m
            };
            let a = episode_forward(&s, &sl, &q, &ql, 3, NormalizationMode::None).unwrap();
            let b = episode_forward(&shift(&s), &sl, &shift(&q), &ql, 3, NormalizationMode::None).unwrap();
            for (x, y) in a.probs.as_slice().iter().zip(b.probs.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn support_scale_invariance_under_proto_only(seed in 0u64..500, lambda in 0.05f64..20.0, class in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_mat(&mut rng, 6, 4);
            let q = random_mat(&mut rng, 5, 4);
            let sl = [0, 1, 2, 0, 1, 2];
            let ql = [0; 5];
            let mut scaled = s.clone();
            for (i, &l) in sl.iter().enumerate() {
                if l == class {
                    scaled.row_mut(i).iter_mut().for_each(|v| *v *= lambda);
                }
            }
            let a = episode_forward(&s, &sl, &q, &ql, 3, NormalizationMode::ProtoOnly).unwrap();
            let b = episode_forward(&scaled, &sl, &q, &ql, 3, NormalizationMode::ProtoOnly).unwrap();
            prop_assert_eq!(a.predictions, b.predictions);
        }
    }
}
