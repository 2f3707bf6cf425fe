//! Training of the projection tail through the prototypical head, with
//! exact gradients, episodic evaluation and early stopping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{spans, Dataset};
use crate::encoder::{gather, EmbeddingStore, EpisodeBatch, ProjectionParams};
use crate::error::{Error, Result};
use crate::math::{axpy, coeff_variation, dot, l2_norm, softmax_neg, Mat, NormStats};
use crate::protohead::{compute_prototypes, episode_forward, neg_log_prob, NormalizationMode};
use crate::sampler::{sample_episode, sample_episodes, Episode, EpisodeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Episode shape used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    pub k: usize,
    pub n_lo: usize,
    pub n_hi: usize,
    pub q_lo: usize,
    pub q_hi: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        EpisodeShape { k: 5, n_lo: 1, n_hi: 2, q_lo: 1, q_hi: 2 }
    }
}

impl EpisodeShape {
    pub fn spec(&self, seed: u64) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.k, self.n_lo, self.n_hi, self.q_lo, self.q_hi, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: NormalizationMode,
    /// `None` picks the mode default, see [`TrainConfig::effective_lr`].
    pub learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    /// Training steps between dev evaluations.
    pub eval_every: usize,
    pub early_stop_patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub episode: EpisodeShape,
    /// Episodes in each fixed evaluation set (train and dev).
    pub eval_episodes: usize,
    /// Projection output dimension; defaults to the input dimension.
    pub d_out: Option<usize>,
    pub span_level: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: NormalizationMode::None,
            learning_rate: None,
            optimizer: OptimizerKind::default(),
            episodes_per_epoch: 100,
            max_epochs: 20,
            eval_every: 100,
            early_stop_patience: 5,
            grad_clip_norm: 10.0,
            seed: 1,
            episode: EpisodeShape::default(),
            eval_episodes: 100,
            d_out: None,
            span_level: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// 1e-4 when prototypes keep their norms, 1e-5 when they are normalized.
    pub fn effective_lr(&self) -> f64 {
        self.learning_rate.unwrap_or(if self.mode.normalizes_prototypes() { 1e-5 } else { 1e-4 })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.effective_lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if self.early_stop_patience < 1 || self.eval_every < 1 || self.eval_episodes < 1 {
            return Err(Error::InvalidInput("patience, eval_every and eval_episodes must be >= 1".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidInput("grad_clip_norm must be positive".into()));
        }
        self.episode.spec(self.seed).map(|_| ())
    }
}

/// Gradients of the mean episode loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dw: Mat,
    pub db: Vec<f64>,
    /// With respect to the raw (pre-projection) support rows.
    pub d_support: Mat,
    /// With respect to the raw query rows.
    pub d_query: Mat,
}

impl GradientBundle {
    fn param_norm(&self) -> f64 {
        (dot(self.dw.as_slice(), self.dw.as_slice()) + dot(&self.db, &self.db)).sqrt()
    }

    /// Every entry in a fixed order: dW, db, support, query.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.dw.as_slice().to_vec();
        v.extend_from_slice(&self.db);
        v.extend_from_slice(self.d_support.as_slice());
        v.extend_from_slice(self.d_query.as_slice());
        v
    }
}

/// Loss of a raw episode batch under `params` and `mode`.
pub fn episode_loss(batch: &EpisodeBatch, params: &ProjectionParams, mode: NormalizationMode) -> Result<f64> {
    let s = params.apply_rows(&batch.support);
    let q = params.apply_rows(&batch.query);
    Ok(episode_forward(&s, &batch.support_labels, &q, &batch.query_labels, batch.n_classes, mode)?.loss)
}

/// Backpropagates `g` through `v ↦ v/‖v‖` given `v̂` and `‖v‖`.
fn unit_backward(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(unit, g);
    g.iter().zip(unit).map(|(gi, ui)| (gi - ui * proj) / norm).collect()
}

fn check_finite(term: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure { term: term.into() })
    }
}

/// Mean episode loss and its exact gradients.
pub fn backward(
    batch: &EpisodeBatch,
    params: &ProjectionParams,
    mode: NormalizationMode,
) -> Result<(f64, GradientBundle)> {
    let k = batch.n_classes;
    let m = batch.query.rows();
    if m == 0 {
        return Err(Error::InvalidInput("episode has no query tokens".into()));
    }
    let support = params.apply_rows(&batch.support);
    let query = params.apply_rows(&batch.query);
    let dim = params.d_out();

    let raw = compute_prototypes(&support, &batch.support_labels, k)?;
    let proto_norms = raw.raw_norms.clone();
    let protos = if mode.normalizes_prototypes() { crate::math::normalize_rows(&raw.c)? } else { raw.c.clone() };
    let query_norms = query.row_norms();
    let q = if mode.normalizes_queries() { crate::math::normalize_rows(&query)? } else { query.clone() };

    let mut g_proto = Mat::zeros(k, dim);
    let mut g_query = Mat::zeros(m, dim);
    let mut loss = 0.0;
    let mut d = vec![0.0; k];
    let mut diff = vec![0.0; dim];
    for (j, (x, &y)) in q.row_iter().zip(&batch.query_labels).enumerate() {
        for (dk, c) in d.iter_mut().zip(protos.row_iter()) {
            *dk = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        loss += neg_log_prob(&d, y);
        let p = softmax_neg(&d);
        for (kk, c) in protos.row_iter().enumerate() {
            // dJ/dd_jk = (δ_ky - p_k) / M
            let g = ((kk == y) as u8 as f64 - p[kk]) / m as f64;
            if g == 0.0 {
                continue;
            }
            for ((df, a), b) in diff.iter_mut().zip(x).zip(c) {
                *df = a - b;
            }
            axpy(2.0 * g, &diff, g_query.row_mut(j));
            axpy(-2.0 * g, &diff, g_proto.row_mut(kk));
        }
    }
    loss /= m as f64;

    if mode.normalizes_prototypes() {
        for kk in 0..k {
            let g = unit_backward(g_proto.row(kk), protos.row(kk), proto_norms[kk]);
            g_proto.row_mut(kk).copy_from_slice(&g);
        }
    }
    if mode.normalizes_queries() {
        for j in 0..m {
            let g = unit_backward(g_query.row(j), q.row(j), query_norms[j]);
            g_query.row_mut(j).copy_from_slice(&g);
        }
    }

    let mut counts = vec![0usize; k];
    for &l in &batch.support_labels {
        counts[l] += 1;
    }
    let mut g_support = Mat::zeros(batch.support.rows(), dim);
    for (i, &l) in batch.support_labels.iter().enumerate() {
        axpy(1.0 / counts[l] as f64, g_proto.row(l), g_support.row_mut(i));
    }

    let mut dw = Mat::zeros(dim, params.d_in());
    let mut db = vec![0.0; dim];
    let mut accumulate = |g: &Mat, x: &Mat| {
        for (gr, xr) in g.row_iter().zip(x.row_iter()) {
            for (o, &go) in gr.iter().enumerate() {
                if go != 0.0 {
                    axpy(go, xr, dw.row_mut(o));
                }
            }
            axpy(1.0, gr, &mut db);
        }
    };
    accumulate(&g_support, &batch.support);
    accumulate(&g_query, &batch.query);

    let mut d_support = Mat::with_cols(params.d_in());
    for g in g_support.row_iter() {
        d_support.push_row(&params.w.tr_mul_vec(g))?;
    }
    let mut d_query = Mat::with_cols(params.d_in());
    for g in g_query.row_iter() {
        d_query.push_row(&params.w.tr_mul_vec(g))?;
    }

    if !loss.is_finite() {
        return Err(Error::NumericalFailure { term: "loss".into() });
    }
    check_finite("dW", dw.as_slice())?;
    check_finite("db", &db)?;
    check_finite("d_support", d_support.as_slice())?;
    check_finite("d_query", d_query.as_slice())?;
    Ok((loss, GradientBundle { dw, db, d_support, d_query }))
}

pub const FD_STEP_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Central finite differences of [`episode_loss`] for every coordinate of
/// W, b and the raw episode rows.
pub fn finite_diff_grad(
    batch: &EpisodeBatch,
    params: &ProjectionParams,
    mode: NormalizationMode,
    h: f64,
) -> Result<GradientBundle> {
    if !(FD_STEP_RANGE.0..=FD_STEP_RANGE.1).contains(&h) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {h:e} outside [{:e}, {:e}]",
            FD_STEP_RANGE.0, FD_STEP_RANGE.1
        )));
    }
    let central = |f: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };

    let mut p = params.clone();
    let flat = params.to_flat();
    let mut gp = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        gp[i] = central(&mut |delta| {
            let mut f = flat.clone();
            f[i] += delta;
            p.set_flat(&f);
            episode_loss(batch, &p, mode)
        })?;
    }
    let nw = params.w.as_slice().len();
    let dw = Mat::from_vec(params.d_out(), params.d_in(), gp[..nw].to_vec())?;
    let db = gp[nw..].to_vec();

    let mut b = batch.clone();
    let mut d_support = Mat::zeros(batch.support.rows(), batch.support.cols());
    for i in 0..batch.support.as_slice().len() {
        let orig = batch.support.as_slice()[i];
        d_support.as_mut_slice()[i] = central(&mut |delta| {
            b.support.as_mut_slice()[i] = orig + delta;
            let l = episode_loss(&b, params, mode);
            b.support.as_mut_slice()[i] = orig;
            l
        })?;
    }
    let mut d_query = Mat::zeros(batch.query.rows(), batch.query.cols());
    for i in 0..batch.query.as_slice().len() {
        let orig = batch.query.as_slice()[i];
        d_query.as_mut_slice()[i] = central(&mut |delta| {
            b.query.as_mut_slice()[i] = orig + delta;
            let l = episode_loss(&b, params, mode);
            b.query.as_mut_slice()[i] = orig;
            l
        })?;
    }
    Ok(GradientBundle { dw, db, d_support, d_query })
}

/// Entries smaller than this are compared on an absolute scale; central
/// differences carry roughly 1e-10 of roundoff at h = 1e-5.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Largest `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)` over all entries.
pub fn max_relative_error(analytic: &GradientBundle, numeric: &GradientBundle) -> f64 {
    analytic
        .flat()
        .iter()
        .zip(numeric.flat())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// A small random episode for gradient checking: `n_classes` classes
/// including O, Gaussian rows, a random projection with a non-zero bias.
pub fn random_check_episode(rng: &mut ChaCha8Rng, n_classes: usize, d_in: usize, d_out: usize) -> (EpisodeBatch, ProjectionParams) {
    let mut rows = |n: usize| {
        Mat::from_vec(n, d_in, (0..n * d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    };
    let per_class = 2;
    let support = rows(n_classes * per_class);
    let query = rows(3 * n_classes);
    let support_labels = (0..n_classes * per_class).map(|i| i % n_classes).collect();
    let query_labels = (0..3 * n_classes).map(|i| (i * 7 + 1) % n_classes).collect();
    let mut params = ProjectionParams::random(d_in, d_out, rng);
    params.w.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
    params.b = (0..d_out).map(|_| rng.random_range(-0.5..0.5)).collect();
    (EpisodeBatch { n_classes, support, support_labels, query, query_labels }, params)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub mode: NormalizationMode,
    pub episodes: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients on `episodes` random episodes
/// per mode. `corrupt` flips the sign of the analytic dW, for exercising
/// the harness itself.
pub fn gradient_check_suite(episodes: usize, h: f64, tol: f64, seed: u64, corrupt: bool) -> Result<Vec<GradCheckRow>> {
    let mut out = Vec::new();
    for mode in NormalizationMode::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..episodes {
            let (batch, params) = random_check_episode(&mut rng, 3, 5, 4);
            let (_, mut g) = backward(&batch, &params, mode)?;
            if corrupt {
                g.dw.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
            }
            let n = finite_diff_grad(&batch, &params, mode, h)?;
            worst = worst.max(max_relative_error(&g, &n));
        }
        out.push(GradCheckRow { mode, episodes, max_rel_error: worst, passed: worst <= tol });
    }
    Ok(out)
}

/// `(precision, recall, f1)`; zero denominators give 0.
pub fn micro_f1(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    fn add(&mut self, o: &ClassCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Token-level counts over non-O labels.
pub fn token_counts(gold: &[usize], pred: &[usize]) -> Vec<(usize, ClassCounts)> {
    let mut out = Vec::new();
    for (&g, &p) in gold.iter().zip(pred) {
        if p != 0 {
            let c = if p == g { ClassCounts { tp: 1, ..Default::default() } } else { ClassCounts { fp: 1, ..Default::default() } };
            out.push((p, c));
        }
        if g != 0 && g != p {
            out.push((g, ClassCounts { fn_: 1, ..Default::default() }));
        }
    }
    out
}

/// Exact-match counts over contiguous same-label spans.
pub fn span_counts(gold: &[usize], pred: &[usize]) -> Vec<(usize, ClassCounts)> {
    let g = spans(gold, |_| false);
    let p = spans(pred, |_| false);
    let mut out = Vec::new();
    for s in &p {
        let hit = g.contains(s);
        out.push((s.label, if hit { ClassCounts { tp: 1, ..Default::default() } } else { ClassCounts { fp: 1, ..Default::default() } }));
    }
    for s in &g {
        if !p.contains(s) {
            out.push((s.label, ClassCounts { fn_: 1, ..Default::default() }));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub micro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub totals: ClassCounts,
    pub per_class: BTreeMap<String, ClassCounts>,
    pub mean_loss: f64,
    pub episodes: usize,
    pub query_tokens: usize,
    /// Statistics of the pre-normalization entity prototype norms across episodes.
    pub norm_stats: Option<NormStats>,
}

impl EvalReport {
    pub fn to_csv(&self, step: &str, split: &str) -> String {
        let mut out = String::new();
        let mut row = |metric: &str, v: f64| {
            let _ = writeln!(out, "{step},{split},{metric},{v}");
        };
        row("micro_f1", self.micro_f1);
        row("precision", self.precision);
        row("recall", self.recall);
        row("mean_loss", self.mean_loss);
        row("tp", self.totals.tp as f64);
        row("fp", self.totals.fp as f64);
        row("fn", self.totals.fn_ as f64);
        if let Some(s) = &self.norm_stats {
            row("proto_norm_min", s.min);
            row("proto_norm_max", s.max);
            row("proto_norm_mean", s.mean);
            row("proto_norm_cv", s.cv);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub span_level: bool,
    pub workers: usize,
}

struct EpisodeEval {
    counts: Vec<(String, ClassCounts)>,
    loss: f64,
    tokens: usize,
    entity_norms: Vec<f64>,
}

fn eval_episode(
    ep: &Episode,
    support_store: &EmbeddingStore,
    query_store: &EmbeddingStore,
    params: Option<&ProjectionParams>,
    mode: NormalizationMode,
    span_level: bool,
) -> Result<EpisodeEval> {
    let mut batch = gather(ep, support_store, query_store)?;
    if let Some(p) = params {
        batch.support = p.apply_rows(&batch.support);
        batch.query = p.apply_rows(&batch.query);
    }
    let out = episode_forward(&batch.support, &batch.support_labels, &batch.query, &batch.query_labels, batch.n_classes, mode)?;
    let name = |l: usize| ep.classes[l - 1].clone();
    let mut counts = Vec::new();
    let mut offset = 0;
    for s in &ep.query {
        let n = s.labels.len();
        let pred = &out.predictions[offset..offset + n];
        let c = if span_level { span_counts(&s.labels, pred) } else { token_counts(&s.labels, pred) };
        counts.extend(c.into_iter().map(|(l, c)| (name(l), c)));
        offset += n;
    }
    Ok(EpisodeEval {
        counts,
        loss: out.loss,
        tokens: batch.query.rows(),
        entity_norms: out.prototypes.raw_norms[1..].to_vec(),
    })
}

/// Pooled micro-F1 over every query token of every episode.
pub fn evaluate(
    episodes: &[Episode],
    store: &EmbeddingStore,
    params: Option<&ProjectionParams>,
    mode: NormalizationMode,
    opts: EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(episodes, store, store, params, mode, opts)
}

pub fn evaluate_with(
    episodes: &[Episode],
    support_store: &EmbeddingStore,
    query_store: &EmbeddingStore,
    params: Option<&ProjectionParams>,
    mode: NormalizationMode,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let run = |ep: &Episode| eval_episode(ep, support_store, query_store, params, mode, opts.span_level);
    let results: Vec<EpisodeEval> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| episodes.par_iter().map(run).collect::<Result<_>>())?
    } else {
        episodes.iter().map(run).collect::<Result<_>>()?
    };

    let mut per_class: BTreeMap<String, ClassCounts> = BTreeMap::new();
    let mut totals = ClassCounts::default();
    let mut loss = 0.0;
    let mut tokens = 0;
    let mut norms = Vec::new();
    for r in &results {
        for (name, c) in &r.counts {
            per_class.entry(name.clone()).or_default().add(c);
            totals.add(c);
        }
        loss += r.loss;
        tokens += r.tokens;
        norms.extend_from_slice(&r.entity_norms);
    }
    if tokens == 0 {
        return Err(Error::InvalidInput("evaluation has no query tokens".into()));
    }
    let (precision, recall, f1) = micro_f1(totals.tp, totals.fp, totals.fn_);
    Ok(EvalReport {
        metric: if opts.span_level { "span" } else { "token" }.into(),
        micro_f1: f1,
        precision,
        recall,
        totals,
        per_class,
        mean_loss: loss / results.len() as f64,
        episodes: results.len(),
        query_tokens: tokens,
        norm_stats: coeff_variation(&norms).ok(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub step: usize,
    pub train_f1: f64,
    pub dev_f1: f64,
    /// Mean training loss since the previous record (the initial evaluation
    /// loss of the train set at step 0).
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub records: Vec<CurveRecord>,
}

impl LearningCurve {
    pub fn push(&mut self, r: CurveRecord) {
        assert!(self.records.last().is_none_or(|l| l.step < r.step), "curve steps must increase");
        self.records.push(r);
    }

    /// Flat `step,split,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(out, "{},train,micro_f1,{}", r.step, r.train_f1);
            let _ = writeln!(out, "{},dev,micro_f1,{}", r.step, r.dev_f1);
            let _ = writeln!(out, "{},train,loss,{}", r.step, r.train_loss);
        }
        out
    }
}

/// A dataset and the store holding its embeddings.
#[derive(Debug, Clone, Copy)]
pub struct SplitData<'a> {
    pub dataset: &'a Dataset,
    pub store: &'a EmbeddingStore,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub params: ProjectionParams,
    pub initial_params: ProjectionParams,
    pub curve: LearningCurve,
    pub best_step: usize,
    pub best_dev_f1: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Independent seed for one of a run's random streams.
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15) ^ stream.wrapping_mul(0xd1b54a32d192ed03)
}

/// Fixed evaluation episodes of a split for a training run.
pub fn eval_episodes(cfg: &TrainConfig, data: &Dataset, stream: u64) -> Result<Vec<Episode>> {
    let spec = cfg.episode.spec(derived_seed(cfg.seed, stream))?;
    sample_episodes(data, &spec, 0, cfg.eval_episodes, cfg.workers)
}

enum OptimizerState {
    Sgd,
    Momentum { momentum: f64, velocity: Vec<f64> },
    Adam { beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::SgdMomentum { momentum } => OptimizerState::Momentum { momentum, velocity: vec![0.0; n] },
            OptimizerKind::Adam { beta1, beta2, eps } => {
                OptimizerState::Adam { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
            }
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => axpy(-lr, grad, theta),
            OptimizerState::Momentum { momentum, velocity } => {
                for ((th, g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = *momentum * *v + g;
                    *th -= lr * *v;
                }
            }
            OptimizerState::Adam { beta1, beta2, eps, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((th, g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                    *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Episodic training with dev-based early stopping. Evaluates once before
/// the first step, then every `eval_every` steps.
pub fn train(train_split: SplitData<'_>, dev_split: SplitData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let params = {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, 0));
        let d_in = train_split.store.dim();
        ProjectionParams::random(d_in, cfg.d_out.unwrap_or(d_in), &mut rng)
    };
    train_from(train_split, dev_split, cfg, params)
}

pub fn train_from(
    train_split: SplitData<'_>,
    dev_split: SplitData<'_>,
    cfg: &TrainConfig,
    mut params: ProjectionParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let lr = cfg.effective_lr();
    let opts = EvalOptions { span_level: cfg.span_level, workers: cfg.workers };
    let train_spec = cfg.episode.spec(derived_seed(cfg.seed, 1))?;
    let train_eval = eval_episodes(cfg, train_split.dataset, 2)?;
    let dev_eval = eval_episodes(cfg, dev_split.dataset, 3)?;

    let initial_params = params.clone();
    let mut curve = LearningCurve::default();
    let evaluate_both = |p: &ProjectionParams| -> Result<(EvalReport, EvalReport)> {
        Ok((
            evaluate(&train_eval, train_split.store, Some(p), cfg.mode, opts)?,
            evaluate(&dev_eval, dev_split.store, Some(p), cfg.mode, opts)?,
        ))
    };

    let (tr, dv) = evaluate_both(&params)?;
    curve.push(CurveRecord { step: 0, train_f1: tr.micro_f1, dev_f1: dv.micro_f1, train_loss: tr.mean_loss });
    let mut best = (dv.micro_f1, 0usize, params.clone());
    let mut since_best = 0usize;

    let mut opt = OptimizerState::new(cfg.optimizer, params.to_flat().len());
    let mut step = 0usize;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut stopped_early = false;
    'outer: for _epoch in 0..cfg.max_epochs {
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(train_split.dataset, &train_spec, step as u64)?;
            let batch = gather(&ep, train_split.store, train_split.store)?;
            let (loss, grad) = backward(&batch, &params, cfg.mode)?;
            if !loss.is_finite() || loss > 1e6 {
                return Err(Error::Divergence { step, loss });
            }
            loss_acc += loss;
            loss_n += 1;

            let mut g = grad.dw.as_slice().to_vec();
            g.extend_from_slice(&grad.db);
            let norm = grad.param_norm();
            if norm > cfg.grad_clip_norm {
                let s = cfg.grad_clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
            let mut theta = params.to_flat();
            opt.step(&mut theta, &g, lr);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step, loss });
            }
            params.set_flat(&theta);
            step += 1;

            if step.is_multiple_of(cfg.eval_every) {
                let (tr, dv) = evaluate_both(&params)?;
                curve.push(CurveRecord {
                    step,
                    train_f1: tr.micro_f1,
                    dev_f1: dv.micro_f1,
                    train_loss: loss_acc / loss_n as f64,
                });
                loss_acc = 0.0;
                loss_n = 0;
                if dv.micro_f1 > best.0 {
                    best = (dv.micro_f1, step, params.clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    log::info!("training stopped after {step} steps; best dev F1 {:.4} at step {}", best.0, best.1);
    Ok(TrainOutcome {
        params: best.2,
        initial_params,
        curve,
        best_step: best.1,
        best_dev_f1: best.0,
        steps: step,
        stopped_early,
    })
}

/// Mean loss of the first `n` training episodes under `params`.
pub fn mean_episode_loss(split: SplitData<'_>, spec: &EpisodeSpec, n: usize, params: &ProjectionParams, mode: NormalizationMode) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n {
        let ep = sample_episode(split.dataset, spec, i as u64)?;
        let batch = gather(&ep, split.store, split.store)?;
        total += episode_loss(&batch, params, mode)?;
    }
    Ok(total / n as f64)
}

/// Frobenius norm of the difference between two parameter sets.
pub fn param_distance(a: &ProjectionParams, b: &ProjectionParams) -> f64 {
    let d: Vec<f64> = a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| x - y).collect();
    l2_norm(&d)
}
