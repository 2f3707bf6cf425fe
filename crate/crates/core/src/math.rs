//! Small dense numerics shared by every other module.
//!
//! Everything accumulates in `f64`. Vectors are plain slices; [`Mat`] is a
//! row-major matrix with a fixed column count.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with a norm at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "matrix needs at least one column");
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Empty matrix with `cols` columns, ready for [`Mat::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidInput("matrix needs at least one column".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::InvalidInput("no rows given".into()))?;
        let mut m = Mat::with_cols(cols.max(1));
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::DimensionMismatch { expected: self.cols, actual: row.len() });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · v` for a column vector `v` of length `cols`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.row_iter().map(|r| dot(r, v)).collect()
    }

    /// `selfᵀ · v` for a vector `v` of length `rows`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            axpy(s, r, &mut out);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.row_iter().map(l2_norm).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Softmax over negated distances, `p_k ∝ exp(-d_k)`, with the smallest
/// distance subtracted first.
pub fn softmax_neg(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out: Vec<f64> = distances.iter().map(|d| (min - d).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Index of the largest value. Values within a relative `1e-12` of the
/// running best count as ties and keep the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        if v - b > 1e-12 * b.abs().max(1.0) {
            best = i;
        }
    }
    best
}

/// Index of the smallest value under the same tie rule as [`argmax`].
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let b = values[best];
        if b - v > 1e-12 * b.abs().max(1.0) {
            best = i;
        }
    }
    best
}

pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n > NORM_EPS).then(|| v.iter().map(|x| x / n).collect())
}

/// Scales every row to unit length. A row whose norm is at or below
/// [`NORM_EPS`] is an error.
pub fn normalize_rows(m: &Mat) -> Result<Mat> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = l2_norm(row);
        if !(n > NORM_EPS) {
            return Err(Error::DegeneratePrototype { row: i, norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Projection of a matrix onto its top two principal directions.
#[derive(Debug, Clone, Serialize)]
pub struct Pca {
    /// R×2 projected coordinates.
    pub coords: Mat,
    pub components: [Vec<f64>; 2],
    /// Population variance along each component (the covariance eigenvalues).
    pub variances: [f64; 2],
    pub mean: Vec<f64>,
    /// Fewer than two nonzero eigenvalues; the affected columns are zero.
    pub rank_deficient: bool,
}

/// Top-2 PCA of mean-centered rows.
///
/// Eigenvector signs are fixed so the largest-magnitude coordinate is
/// positive. Eigenvalues that tie are ordered by the position of that
/// coordinate.
pub fn pca_top2(m: &Mat) -> Result<Pca> {
    let (r, d) = (m.rows(), m.cols());
    if r < 3 {
        return Err(Error::InvalidInput(format!("pca needs at least 3 rows, got {r}")));
    }
    let mut mean = vec![0.0; d];
    for row in m.row_iter() {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|x| *x /= r as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in m.row_iter() {
        for (c, (x, mu)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x - mu;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / r as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            fix_sign(&mut v);
            (eig.eigenvalues[k].max(0.0), v)
        })
        .collect();
    let lead = pairs.iter().map(|p| p.0).fold(0.0, f64::max);
    let tie_tol = 1e-12 * lead.max(f64::MIN_POSITIVE);
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= tie_tol {
            dominant_axis(&a.1).cmp(&dominant_axis(&b.1))
        } else {
            b.0.total_cmp(&a.0)
        }
    });

    let zero_tol = 1e-12 * lead.max(1e-300);
    let mut variances = [0.0; 2];
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut rank_deficient = false;
    for k in 0..2 {
        match pairs.get(k) {
            Some((val, vec)) if *val > zero_tol && lead > 0.0 => {
                variances[k] = *val;
                components[k] = vec.clone();
            }
            _ => rank_deficient = true,
        }
    }

    let mut coords = Mat::zeros(r, 2);
    for (i, row) in m.row_iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            centered[j] = x - mean[j];
        }
        coords[(i, 0)] = dot(&centered, &components[0]);
        coords[(i, 1)] = dot(&centered, &components[1]);
    }
    Ok(Pca { coords, components, variances, mean, rank_deficient })
}

fn dominant_axis(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

fn fix_sign(v: &mut [f64]) {
    let axis = dominant_axis(v);
    if v[axis] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Descriptive statistics of a list of norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `std / mean`.
    pub cv: f64,
}

pub fn coeff_variation(xs: &[f64]) -> Result<NormStats> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("coefficient of variation of an empty list".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::UndefinedCv { mean });
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Rounding can put the mean a few ulps outside [min, max] on constant input.
    let mean = mean.clamp(min, max);
    Ok(NormStats { min, max, mean, std, cv: std / mean })
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.is_empty() {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = rand_vec(&mut rng, 8);
        let mut acc = 0.0;
        for x in &v {
            acc += x * x;
        }
        assert_abs_diff_eq!(l2_norm(&v), acc.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn squared_euclidean_cases() {
        assert_eq!(squared_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(squared_euclidean(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(matches!(
            squared_euclidean(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_neg(&[1.3; 5]);
        for x in &p {
            assert_abs_diff_eq!(*x, 0.2, epsilon = 1e-15);
        }
        let p = softmax_neg(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-12);
        // large distances do not underflow to NaN
        let p = softmax_neg(&[1000.0, 1001.0, 5000.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rows_cases() {
        let m = Mat::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert_abs_diff_eq!(n[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n[(0, 1)], 0.8, epsilon = 1e-15);
        let again = normalize_rows(&n).unwrap();
        for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let scaled = Mat::from_rows(&[[30.0, 40.0]]).unwrap();
        assert_eq!(normalize_rows(&scaled).unwrap(), n);
        let zero = Mat::from_rows(&[[1.0, 0.0], [0.0, 1e-13]]).unwrap();
        assert!(matches!(normalize_rows(&zero), Err(Error::DegeneratePrototype { row: 1, .. })));
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0 + 1e-15, 1.0]), 0);
        assert_eq!(argmin(&[4.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn cv_cases() {
        let s = coeff_variation(&[4.0; 6]).unwrap();
        assert_eq!(s.cv, 0.0);
        let s = coeff_variation(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.cv), (2.0, 1.0, 0.5));
        let s = coeff_variation(&[7.25, 9.0, 11.5, 17.13]).unwrap();
        assert_eq!((s.min, s.max), (7.25, 17.13));
        assert!(matches!(coeff_variation(&[-1.0, 1.0]), Err(Error::UndefinedCv { .. })));
    }

    #[test]
    fn pca_collinear_has_zero_second_variance() {
        let rows: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_top2(&Mat::from_rows(&rows).unwrap()).unwrap();
        assert!(p.rank_deficient);
        assert_eq!(p.variances[1], 0.0);
        assert!(p.coords.row_iter().all(|r| r[1] == 0.0));
        assert!(p.variances[0] > 0.0);
    }

    #[test]
    fn pca_ellipse_major_axis_is_x() {
        // x = 5 cos t, y = 1 sin t, sampled uniformly in t: var_x = 12.5, var_y = 0.5
        let n = 64;
        let rows: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                [5.0 * t.cos(), t.sin()]
            })
            .collect();
        let p = pca_top2(&Mat::from_rows(&rows).unwrap()).unwrap();
        assert_abs_diff_eq!(p.components[0][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.components[0][1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.variances[0], 12.5, epsilon = 1e-9);
        assert_abs_diff_eq!(p.variances[1], 0.5, epsilon = 1e-9);
        assert!(!p.rank_deficient);
    }

    #[test]
    fn pca_too_few_rows() {
        let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert!(pca_top2(&m).is_err());
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(spearman(&xs, &[10.0, 20.0, 30.0, 400.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&xs, &[4.0, 3.0, 2.0, 1.0]), -1.0, epsilon = 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    proptest! {
        #[test]
        fn factorization_identity(
            a in prop::collection::vec(-100.0f64..100.0, 6),
            b in prop::collection::vec(-100.0f64..100.0, 6),
        ) {
            let d = squared_euclidean(&a, &b).unwrap();
            let f = dot(&a, &a) - 2.0 * dot(&a, &b) + dot(&b, &b);
            prop_assert!((d - f).abs() <= 1e-9 * (1.0 + dot(&a, &a) + dot(&b, &b)));
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            d in prop::collection::vec(0.0f64..500.0, 2..12),
            c in -200.0f64..200.0,
        ) {
            let p = softmax_neg(&d);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
            let q = softmax_neg(&shifted);
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalize_rows_idempotent_and_scale_invariant(
            row in prop::collection::vec(-50.0f64..50.0, 4),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(l2_norm(&row) > 1e-3);
            let m = Mat::from_rows(&[row.clone()]).unwrap();
            let n1 = normalize_rows(&m).unwrap();
            prop_assert!((l2_norm(n1.row(0)) - 1.0).abs() <= 1e-9);
            let n2 = normalize_rows(&n1).unwrap();
            let scaled: Vec<f64> = row.iter().map(|x| x * scale).collect();
            let n3 = normalize_rows(&Mat::from_rows(&[scaled]).unwrap()).unwrap();
            for i in 0..4 {
                prop_assert!((n1[(0, i)] - n2[(0, i)]).abs() <= 1e-9);
                prop_assert!((n1[(0, i)] - n3[(0, i)]).abs() <= 1e-9);
            }
        }

        #[test]
        fn pca_variances_ordered(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..12).map(|_| rand_vec(&mut rng, 5)).collect();
            let p = pca_top2(&Mat::from_rows(&rows).unwrap()).unwrap();
            prop_assert!(p.variances[0] >= p.variances[1]);
            prop_assert!(p.variances[1] >= 0.0);
        }
    }
}
