use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use protonorm::corpus::{entity_frequency_stats, norm_frequency_correlation, serialize_conll, Split};
use protonorm::diagnostics::{
    auto_scenarios, bias_probe, classifier_row_norm_survey, entity_histogram_csv, pca_frequency_scatter,
    pca_frequency_scatter_occurrences, prototype_norm_survey, BiasScenario, MIN_SURVEY_EPISODES,
};
use protonorm::encoder::{read_pne1_rows, ProjectionParams};
use protonorm::sampler::{make_fixed_support_task, write_episode_file};
use protonorm::trainer::{evaluate_with, gradient_check_suite, EvalOptions, GradCheckRow, SplitData, FD_STEP_RANGE};
use protonorm::{evaluate, synth_generate, train, EvalReport, Episode, Error};
use serde::Serialize;
use serde_json::json;

use crate::config::{split_name, DataSource, RunConfig, SplitSet};
use crate::error::{CliError, CliResult};

/// Random stream of the held-out evaluation episodes.
pub const EVAL_STREAM: u64 = 4;
/// Random stream of the norm-survey episodes.
pub const SURVEY_STREAM: u64 = 6;

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, text)
}

fn tag(cfg: &RunConfig) -> String {
    format!("{}_seed{}", cfg.train.mode, cfg.train.seed)
}

fn episodes(cfg: &RunConfig, ds: &protonorm::Dataset, count: usize, stream: u64) -> CliResult<Vec<Episode>> {
    let c = protonorm::TrainConfig { eval_episodes: count, ..cfg.train.clone() };
    Ok(protonorm::trainer::eval_episodes(&c, ds, stream)?)
}

fn check_params(params: Option<&ProjectionParams>, set: &SplitSet) -> CliResult<()> {
    match params {
        Some(p) if p.d_in() != set.store.dim() => Err(CliError::Config(format!(
            "parameters expect {}-dimensional embeddings but the dump has {}",
            p.d_in(),
            set.store.dim()
        ))),
        _ => Ok(()),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let corpus = synth_generate(&cfg.synthetic)?;
    ensure_dir(out)?;
    let mut classes = serde_json::Map::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let name = split_name(split);
        let (ds, store) = corpus.store.rebased(corpus.split(split))?;
        write_text(&out.join(format!("{name}.conll")), serialize_conll(&ds))?;
        store.write(&out.join(format!("{name}.pne1")))?;
        classes.insert(name.into(), json!(&ds.schema.names()[1..]));
        info!("{name}: {} sentences, {} tokens", ds.sentences.len(), store.len());
    }
    corpus.frequencies.write(&out.join("frequencies.tsv"))?;
    write_json(&out.join("synthetic.json"), &cfg.synthetic)?;
    write_json(&out.join("classes.json"), &classes)?;
    println!("wrote synthetic corpus to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    split: &'a str,
    mode: protonorm::NormalizationMode,
    seed: u64,
    learning_rate: f64,
    best_step: usize,
    best_dev_f1: f64,
    steps: usize,
    stopped_early: bool,
    report: &'a EvalReport,
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = DataSource::open(cfg)?;
    let tr = data.split(Split::Train)?;
    let dv = data.split(Split::Dev)?;
    let diag = out.join("diagnostics");
    ensure_dir(&diag)?;
    write_json(&out.join("config.json"), cfg)?;

    let started = SystemTime::now();
    let clock = Instant::now();
    let outcome = train(
        SplitData { dataset: &tr.dataset, store: &tr.store },
        SplitData { dataset: &dv.dataset, store: &dv.store },
        &cfg.train,
    )?;
    info!("trained {} steps, best dev F1 {:.4} at step {}", outcome.steps, outcome.best_dev_f1, outcome.best_step);
    outcome.params.write(&out.join("params.bin"))?;
    write_text(&out.join("curve.csv"), outcome.curve.to_csv())?;

    let split = if data.has(cfg.eval.split) { cfg.eval.split } else { Split::Dev };
    let held_out = if split == Split::Dev { dv } else { data.split(split)? };
    let eps = episodes(cfg, &held_out.dataset, cfg.eval.episodes, EVAL_STREAM)?;
    let opts = EvalOptions { span_level: cfg.train.span_level, workers: cfg.train.workers };
    let report = evaluate(&eps, &held_out.store, Some(&outcome.params), cfg.train.mode, opts)?;
    let summary = TrainSummary {
        split: split_name(split),
        mode: cfg.train.mode,
        seed: cfg.train.seed,
        learning_rate: cfg.train.effective_lr(),
        best_step: outcome.best_step,
        best_dev_f1: outcome.best_dev_f1,
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        report: &report,
    };
    write_json(&out.join("eval.json"), &summary)?;
    let mut csv = String::from("step,split,metric,value\n");
    csv.push_str(&report.to_csv(&outcome.best_step.to_string(), split_name(split)));
    write_text(&out.join("eval.csv"), csv)?;

    if eps.len() >= MIN_SURVEY_EPISODES {
        let t = tag(cfg);
        for (label, p) in [("initial", &outcome.initial_params), ("best", &outcome.params)] {
            let r = prototype_norm_survey(&eps, &held_out.store, Some(p))?;
            write_text(&diag.join(format!("norms_{label}_{t}.csv")), r.to_csv())?;
            write_json(&diag.join(format!("norms_{label}_{t}.json")), &r)?;
        }
    }

    let elapsed = clock.elapsed().as_secs_f64();
    let unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &out.join("meta.json"),
        &json!({ "version": env!("CARGO_PKG_VERSION"), "started_unix": unix, "elapsed_secs": elapsed }),
    )?;
    println!(
        "{} seed {}: {} steps, best dev F1 {:.4}, {} F1 {:.4} -> {}",
        cfg.train.mode,
        cfg.train.seed,
        outcome.steps,
        outcome.best_dev_f1,
        split_name(split),
        report.micro_f1,
        out.display()
    );
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig, params: Option<&ProjectionParams>, out: Option<&Path>) -> CliResult<EvalReport> {
    let data = DataSource::open(cfg)?;
    let split = cfg.eval.split;
    let query = data.split(split)?;
    check_params(params, &query)?;
    let opts = EvalOptions { span_level: cfg.train.span_level, workers: cfg.train.workers };
    let (report, kind) = match cfg.eval.fixed_support_shots {
        Some(shots) => {
            let support = data
                .support()?
                .ok_or_else(|| CliError::Config("fixed-support evaluation needs data.support".into()))?;
            check_params(params, &support)?;
            let task = make_fixed_support_task(&support.dataset, &query.dataset, shots, cfg.train.seed)?;
            let r = evaluate_with(&[task], &support.store, &query.store, params, cfg.train.mode, opts)?;
            (r, format!("fixed{shots}"))
        }
        None => {
            let eps = episodes(cfg, &query.dataset, cfg.eval.episodes, EVAL_STREAM)?;
            (evaluate(&eps, &query.store, params, cfg.train.mode, opts)?, "episodes".to_string())
        }
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let stem = format!("eval_{}_{kind}_{}", split_name(split), tag(cfg));
        write_json(&dir.join(format!("{stem}.json")), &report)?;
        let mut csv = String::from("step,split,metric,value\n");
        csv.push_str(&report.to_csv("final", split_name(split)));
        write_text(&dir.join(format!("{stem}.csv")), csv)?;
    }
    println!(
        "{} {} ({kind}, {} metric): F1 {:.4} P {:.4} R {:.4} over {} episodes",
        cfg.train.mode,
        split_name(split),
        report.metric,
        report.micro_f1,
        report.precision,
        report.recall,
        report.episodes
    );
    Ok(report)
}

pub fn diagnose(cfg: &RunConfig, params: Option<&ProjectionParams>, out: &Path) -> CliResult<()> {
    let data = DataSource::open(cfg)?;
    let d = &cfg.diagnostics;
    let split = d.split;
    let set = data.split(split)?;
    check_params(params, &set)?;
    ensure_dir(out)?;
    let sname = split_name(split);
    let t = tag(cfg);

    let eps = episodes(cfg, &set.dataset, d.survey_episodes, SURVEY_STREAM)?;
    let survey = prototype_norm_survey(&eps, &set.store, params)?;
    write_text(&out.join(format!("norms_{sname}_{t}.csv")), survey.to_csv())?;
    write_json(&out.join(format!("norms_{sname}_{t}.json")), &survey)?;
    println!("prototype norms on {sname}: cv {:.4} over {} episodes", survey.global.cv, eps.len());

    if d.bias_dim < 2 {
        return Err(CliError::Config("diagnostics.bias_dim must be at least 2".into()));
    }
    let mut scenarios = vec![BiasScenario::hand()];
    scenarios.extend(auto_scenarios(d.bias_scenarios, d.bias_dim, cfg.train.seed, d.unit_prototypes));
    let probe = bias_probe(&scenarios)?;
    let seed = cfg.train.seed;
    write_text(&out.join(format!("bias_probe_seed{seed}.csv")), probe.to_csv())?;
    write_json(
        &out.join(format!("bias_probe_seed{seed}.json")),
        &json!({
            "scenarios": probe.scenarios.len(),
            "dim": d.bias_dim,
            "unit_prototypes": d.unit_prototypes,
            "flips": probe.flips,
            "ambiguous": probe.ambiguous,
            "attraction": probe.attraction,
            "hand": probe.scenarios[0],
        }),
    )?;
    println!("bias probe: {} of {} scenarios flip under prototype normalization", probe.flips, probe.scenarios.len());

    if let Some(freq) = data.frequencies()? {
        let scatter =
            if d.occurrences { pca_frequency_scatter_occurrences(&set.store, &freq) } else { pca_frequency_scatter(&set.store, &freq) };
        match scatter {
            Ok(s) => {
                write_text(&out.join(format!("pca_scatter_{sname}_seed{seed}.csv")), s.to_csv())?;
                write_json(
                    &out.join(format!("pca_scatter_{sname}_seed{seed}.json")),
                    &json!({
                        "points": s.rows.len(),
                        "variances": s.variances,
                        "corr_pc1": s.corr_pc1,
                        "corr_pc2": s.corr_pc2,
                        "rank_deficient": s.rank_deficient,
                    }),
                )?;
                println!("frequency scatter: |corr| {:.3}", s.max_abs_correlation());
            }
            Err(e @ Error::InsufficientOverlap { .. }) => warn!("skipping frequency scatter: {e}"),
            Err(e) => return Err(e.into()),
        }
        match norm_frequency_correlation(&set.store, &freq) {
            Ok(r) => write_json(&out.join(format!("norm_frequency_{sname}_seed{seed}.json")), &r)?,
            Err(e @ Error::InsufficientOverlap { .. }) => warn!("skipping norm/frequency correlation: {e}"),
            Err(e) => return Err(e.into()),
        }
        write_json(
            &out.join(format!("entity_frequency_{sname}_seed{seed}.json")),
            &entity_frequency_stats(&set.dataset, &freq),
        )?;
        if !d.entities.is_empty() {
            let csv = entity_histogram_csv(&set.dataset, &freq, &d.entities)?;
            write_text(&out.join(format!("entity_histogram_{sname}_seed{seed}.csv")), csv)?;
        }
    } else {
        info!("no frequency table configured; skipping frequency analyses");
    }

    if let Some(path) = &cfg.data.classifier_dump {
        let stats = classifier_row_norm_survey(&read_pne1_rows(path)?)?;
        write_json(&out.join("classifier_norms.json"), &stats)?;
        println!("classifier row norms: cv {:.4}", stats.cv);
    }
    Ok(())
}

pub struct GradcheckArgs {
    pub episodes: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    pub inject_sign_error: bool,
}

pub fn gradcheck(args: &GradcheckArgs, out: Option<&Path>) -> CliResult<Vec<GradCheckRow>> {
    let (lo, hi) = FD_STEP_RANGE;
    if !(lo..=hi).contains(&args.h) {
        return Err(CliError::Usage(format!("--h must lie in [{lo:e}, {hi:e}], got {:e}", args.h)));
    }
    if args.episodes == 0 || !(args.tol > 0.0) {
        return Err(CliError::Usage("--episodes must be >= 1 and --tol positive".into()));
    }
    let rows = gradient_check_suite(args.episodes, args.h, args.tol, args.seed, args.inject_sign_error)?;
    println!("{:<12} {:>8} {:>14}  status", "mode", "episodes", "max_rel_error");
    for r in &rows {
        println!("{:<12} {:>8} {:>14.3e}  {}", r.mode, r.episodes, r.max_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    if let Some(path) = out {
        write_json(path, &rows)?;
    }
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.mode.to_string()).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::CheckFailed(format!("gradient mismatch above {:e} in {}", args.tol, failed.join(", "))))
    }
}

pub fn sample(cfg: &RunConfig, split: Split, count: usize, stream: u64, out: Option<&PathBuf>) -> CliResult<()> {
    let data = DataSource::open(cfg)?;
    let set = data.split(split)?;
    let eps = episodes(cfg, &set.dataset, count, stream)?;
    let text = write_episode_file(&eps)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(dir)?;
            }
            write_text(path, text)?;
            info!("wrote {} episodes to {}", eps.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
