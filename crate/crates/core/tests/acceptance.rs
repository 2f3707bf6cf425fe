//! Acceptance criteria P1–P10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use protonorm::corpus::Dataset;
use protonorm::diagnostics::{auto_scenarios, bias_probe, prototype_norm_survey, BiasScenario};
use protonorm::math::{dot, Mat};
use protonorm::protohead::{apply_normalization, compute_prototypes, distance_decomposition, distances};
use protonorm::sampler::write_episode_file;
use protonorm::trainer::{
    eval_episodes, evaluate, gradient_check_suite, micro_f1, span_counts, token_counts, EvalOptions, SplitData,
    TrainOutcome,
};
use protonorm::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn p1_gradients() -> Outcome {
    let t = Instant::now();
    let rows = gradient_check_suite(20, 1e-5, 1e-4, 2024, false).expect("gradient suite");
    let elapsed = t.elapsed();
    let worst: Vec<String> = rows.iter().map(|r| format!("{}={:.2e}", r.mode, r.max_rel_error)).collect();
    Outcome {
        pass: rows.iter().all(|r| r.passed && r.episodes == 20) && elapsed < Duration::from_secs(30),
        detail: format!("max rel err {} (tol 1e-4, h 1e-5), {:.1}s", worst.join(" "), elapsed.as_secs_f64()),
    }
}

fn p2_mean_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..100 {
        let d = rng.random_range(2..=8);
        let n = rng.random_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, d)).collect();
        let m = Mat::from_rows(&rows).unwrap();
        let c = compute_prototypes(&m, &vec![0; n], 1).unwrap().c.row(0).to_vec();
        let objective =
            |p: &[f64]| rows.iter().map(|x| x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>();
        let at_mean = objective(&c);
        for _ in 0..100 {
            let dir = gauss(&mut rng, d);
            let norm = dot(&dir, &dir).sqrt();
            let p: Vec<f64> = c.iter().zip(&dir).map(|(ci, di)| ci + 0.01 * di / norm).collect();
            if at_mean > objective(&p) {
                violations += 1;
            }
        }
    }
    Outcome { pass: violations == 0, detail: format!("{violations} of 10000 perturbations beat the mean") }
}

fn p3_factorization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=64);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let x: Vec<f64> = gauss(&mut rng, d).iter().map(|v| v * scale).collect();
        let c = gauss(&mut rng, d);
        let direct: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = distance_decomposition(&x, &c).unwrap();
        worst = worst.max((t.query_sq - 2.0 * t.cross + t.proto_sq - direct).abs() / direct);
    }
    Outcome { pass: worst <= 1e-9, detail: format!("max relative error {worst:.2e} over 10000 pairs (tol 1e-9)") }
}

fn p4_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_norm: f64 = 0.0;
    let mut mismatches = 0;
    for _ in 0..1000 {
        let d = rng.random_range(2..=16);
        let k = rng.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let s = 10f64.powf(rng.random_range(-1.0..1.5));
                gauss(&mut rng, d).into_iter().map(|v| v * s).collect()
            })
            .collect();
        let m = Mat::from_rows(&rows).unwrap();
        let p = compute_prototypes(&m, &(0..k).collect::<Vec<_>>(), k).unwrap();
        let x = gauss(&mut rng, d);
        let (pn, q) = apply_normalization(&p, &Mat::from_rows(&[x.clone()]).unwrap(), NormalizationMode::ProtoOnly).unwrap();
        for r in pn.c.row_iter() {
            worst_norm = worst_norm.max((dot(r, r).sqrt() - 1.0).abs());
        }
        let dist = distances(q.row(0), &pn).unwrap();
        let by_distance = (0..k).fold(0, |b, i| if -dist[i] > -dist[b] { i } else { b });
        // Unit prototypes computed independently of the library.
        let scores: Vec<f64> = rows
            .iter()
            .map(|r| {
                let n = dot(r, r).sqrt();
                x.iter().zip(r).map(|(a, b)| a * b / n).sum()
            })
            .collect();
        let by_dot = (0..k).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        mismatches += (by_distance != by_dot) as usize;
    }
    Outcome {
        pass: worst_norm <= 1e-9 && mismatches == 0,
        detail: format!("max |norm-1| {worst_norm:.2e}, {mismatches} argmax mismatches in 1000 trials"),
    }
}

fn p5_bias() -> Outcome {
    let hand = bias_probe(&[BiasScenario::hand()]).unwrap();
    let s = &hand.scenarios[0];
    let hand_ok = s.prediction(NormalizationMode::None) == 0 && s.prediction(NormalizationMode::ProtoOnly) == 1;
    let auto = bias_probe(&auto_scenarios(10_000, 16, 5, false)).unwrap();
    let unit = bias_probe(&auto_scenarios(10_000, 16, 5, true)).unwrap();
    let attraction = auto.attraction.unwrap_or(f64::NAN);
    Outcome {
        pass: hand_ok && attraction > 0.5 && unit.flips == 0,
        detail: format!(
            "hand: None→class {}, ProtoOnly→class {}; attraction {attraction:.4} over {} ambiguous; {} flips on unit prototypes",
            s.prediction(NormalizationMode::None) + 1,
            s.prediction(NormalizationMode::ProtoOnly) + 1,
            auto.ambiguous,
            unit.flips
        ),
    }
}

struct ShiftRun {
    mode: NormalizationMode,
    outcome: TrainOutcome,
    train_f1: f64,
    test_f1: f64,
}

fn shift_run(corpus: &SyntheticCorpus, mode: NormalizationMode, lr: Option<f64>) -> ShiftRun {
    let cfg = TrainConfig { mode, learning_rate: lr, workers: 4, ..Default::default() };
    let outcome = train(
        SplitData { dataset: &corpus.train, store: &corpus.store },
        SplitData { dataset: &corpus.dev, store: &corpus.store },
        &cfg,
    )
    .expect("training run");
    let opts = EvalOptions { span_level: false, workers: 4 };
    let test_eps = eval_episodes(&cfg, &corpus.test, 4).unwrap();
    let train_eps = eval_episodes(&cfg, &corpus.train, 5).unwrap();
    let test_f1 = evaluate(&test_eps, &corpus.store, Some(&outcome.params), mode, opts).unwrap().micro_f1;
    let train_f1 = evaluate(&train_eps, &corpus.store, Some(&outcome.params), mode, opts).unwrap().micro_f1;
    ShiftRun { mode, outcome, train_f1, test_f1 }
}

fn describe(r: &ShiftRun) -> String {
    format!(
        "{} train {:.3} test {:.3} gap {:.3}",
        r.mode,
        r.train_f1,
        r.test_f1,
        r.train_f1 - r.test_f1
    )
}

fn p6_frequency_shift(corpus: &SyntheticCorpus) -> (Outcome, ShiftRun) {
    let t = Instant::now();
    let none = shift_run(corpus, NormalizationMode::None, Some(1e-4));
    let proto = shift_run(corpus, NormalizationMode::ProtoOnly, Some(1e-4));
    let proto_default = shift_run(corpus, NormalizationMode::ProtoOnly, None);
    let elapsed = t.elapsed();
    let gap = |r: &ShiftRun| r.train_f1 - r.test_f1;
    let pass = proto.test_f1 > none.test_f1 && gap(&none) > gap(&proto) && elapsed < Duration::from_secs(300);
    let detail = format!(
        "{} | {} | F1 margin {:+.3}, gap margin {:+.3} (lr 1e-4 both; ProtoOnly at default lr 1e-5: {}), {:.1}s",
        describe(&none),
        describe(&proto),
        proto.test_f1 - none.test_f1,
        gap(&none) - gap(&proto),
        describe(&proto_default),
        elapsed.as_secs_f64()
    );
    (Outcome { pass, detail }, none)
}

fn p7_loss_anchor() -> Outcome {
    let corpus = synth_generate(&SyntheticConfig::symmetric()).unwrap();
    let spec = EpisodeSpec::new(5, 1, 2, 1, 2, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ProjectionParams::random(corpus.store.dim(), corpus.store.dim(), &mut rng);
    let split = SplitData { dataset: &corpus.train, store: &corpus.store };
    let mean = protonorm::trainer::mean_episode_loss(split, &spec, 200, &params, NormalizationMode::None).unwrap();
    let anchor = 6f64.ln();
    let ratio = mean / anchor;

    let same = Mat::from_rows(&vec![vec![0.25, -1.5, 2.0]; 6]).unwrap();
    let query = Mat::from_rows(&[[0.25, -1.5, 2.0]]).unwrap();
    let equal = episode_forward(&same, &[0, 1, 2, 3, 4, 5], &query, &[3], 6, NormalizationMode::None).unwrap();
    Outcome {
        pass: (0.8..=1.3).contains(&ratio) && equal.loss == anchor,
        detail: format!(
            "mean initial loss {mean:.4} = {ratio:.3} x ln 6 (band [0.8, 1.3]); all-equal distances loss {} vs ln 6 {}",
            equal.loss, anchor
        ),
    }
}

fn p8_sampler(d: &Dataset) -> Outcome {
    let spec = EpisodeSpec::new(5, 1, 2, 1, 2, 99).unwrap();
    let eps = sample_episodes(d, &spec, 0, 1000, 1).unwrap();
    let by_id: HashMap<u64, &Sentence> = d.sentences.iter().map(|s| (s.id, s)).collect();
    let mut problems = Vec::new();
    for ep in &eps {
        let classes: BTreeSet<&String> = ep.classes.iter().collect();
        if ep.classes.len() != 5 || classes.len() != 5 {
            problems.push(format!("episode {} has {} classes", ep.index, classes.len()));
        }
        let support_ids: BTreeSet<u64> = ep.support.iter().map(|s| s.sent).collect();
        if ep.query.iter().any(|s| support_ids.contains(&s.sent)) {
            problems.push(format!("episode {} shares sentences", ep.index));
        }
        let mut shots = vec![0usize; ep.classes.len()];
        for (part, items) in [("support", &ep.support), ("query", &ep.query)] {
            for item in items {
                let src = by_id[&item.sent];
                for (pos, &l) in item.labels.iter().enumerate() {
                    let name = d.schema.name(src.labels[pos]).unwrap();
                    let want = ep.classes.iter().position(|c| c == name).map_or(0, |i| i + 1);
                    if l != want {
                        problems.push(format!("episode {} {part} token mislabeled", ep.index));
                    }
                }
                if part == "support" {
                    for m in src.mentions() {
                        let name = d.schema.name(m.label).unwrap();
                        if let Some(i) = ep.classes.iter().position(|c| c == name) {
                            shots[i] += 1;
                        }
                    }
                }
            }
        }
        if shots.iter().any(|&s| !(1..=2).contains(&s)) {
            problems.push(format!("episode {} support shots {shots:?}", ep.index));
        }
    }
    let reference = write_episode_file(&eps).unwrap();
    let mut same_bytes = true;
    for workers in [2, 4, 8] {
        let again = sample_episodes(d, &spec, 0, 1000, workers).unwrap();
        same_bytes &= write_episode_file(&again).unwrap() == reference && again == eps;
    }
    Outcome {
        pass: problems.is_empty() && same_bytes,
        detail: format!(
            "1000 episodes, {} violations{}; identical bytes across 1/2/4/8 workers: {same_bytes}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    }
}

/// Counts computed by enumerating every (position, class) decision.
fn brute_force_counts(gold: &[usize], pred: &[usize], n_labels: usize) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for k in 1..n_labels {
        for i in 0..gold.len() {
            match (gold[i] == k, pred[i] == k) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
    }
    (tp, fp, fn_)
}

fn f1_oracle(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn p9_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(2..=4);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (_, c) in token_counts(&gold, &pred) {
            tp += c.tp;
            fp += c.fp;
            fn_ += c.fn_;
        }
        let oracle = brute_force_counts(&gold, &pred, k);
        if (tp, fp, fn_) != oracle || (micro_f1(tp, fp, fn_).2 - f1_oracle(oracle.0, oracle.1, oracle.2)).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let (tp, fp, fn_) = token_counts(&[1, 0, 2], &[1, 2, 2]).iter().fold((0, 0, 0), |a, (_, c)| (a.0 + c.tp, a.1 + c.fp, a.2 + c.fn_));
    let hand = micro_f1(tp, fp, fn_).2;
    let spans_ok = {
        let c = span_counts(&[1, 1, 0, 2], &[1, 1, 0, 2]);
        c.iter().all(|(_, x)| x.fp == 0 && x.fn_ == 0) && c.len() == 2
    };
    Outcome {
        pass: mismatches == 0 && (tp, fp, fn_) == (2, 1, 0) && (hand - 0.8).abs() < 1e-15 && spans_ok,
        detail: format!("{mismatches} mismatches in 50 random pairs; hand TP={tp} FP={fp} FN={fn_} F1={hand}"),
    }
}

fn p10_norm_direction(corpus: &SyntheticCorpus, run: &ShiftRun) -> Outcome {
    let cfg = TrainConfig::default();
    let eps = eval_episodes(&cfg, &corpus.train, 6).unwrap();
    let pre = prototype_norm_survey(&eps, &corpus.store, Some(&run.outcome.initial_params)).unwrap();
    let post = prototype_norm_survey(&eps, &corpus.store, Some(&run.outcome.params)).unwrap();
    Outcome {
        pass: post.global.cv < pre.global.cv,
        detail: format!(
            "None-mode prototype norm CV {:.4} before, {:.4} after training (best step {})",
            pre.global.cv, post.global.cv, run.outcome.best_step
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    results.push(("P1", "gradient agreement", p1_gradients()));
    results.push(("P2", "mean optimality", p2_mean_optimality()));
    results.push(("P3", "distance factorization", p3_factorization()));
    results.push(("P4", "normalization contract", p4_normalization()));
    results.push(("P5", "norm bias flip", p5_bias()));
    let corpus = synth_generate(&SyntheticConfig::default()).expect("synthetic corpus");
    let (p6, none_run) = p6_frequency_shift(&corpus);
    results.push(("P6", "frequency shift", p6));
    results.push(("P7", "loss anchor", p7_loss_anchor()));
    results.push(("P8", "sampler invariants", p8_sampler(&corpus.train)));
    results.push(("P9", "metric oracle", p9_metric()));
    results.push(("P10", "norm statistics direction", p10_norm_direction(&corpus, &none_run)));

    for (id, name, o) in &results {
        println!("{id:<4} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed in {:.1}s", results.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
