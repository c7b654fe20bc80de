//! Acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the PASS/FAIL lines always
//! print. Criterion 8 talks to a real chat-completions endpoint and only runs
//! when `LFM_BENCH_LIVE_ENDPOINT` is set; `LFM_BENCH_LIVE_MODEL` and
//! `LFM_BENCH_LIVE_API_KEY_ENV` are optional.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lfm_bench::backend::REFUSAL;
use lfm_bench::catalog::{load_catalog, load_ratings, select_typical_users, MovieId, PoolConfig, RatingsFormat, UserId};
use lfm_bench::eval::{aggregate, default_baseline, CellKey, GroupBy, Imputation, MetricsCell, Method, ScoredInstance};
use lfm_bench::extract::{extract_rating, Answer, Prediction};
use lfm_bench::nmf::{self, FactorModel, NmfConfig, Observation};
use lfm_bench::runner::{
    load_records, log_runtime, resume, run_experiment, run_experiment_with, BackendKind, BackendSettings, DataConfig,
    ExperimentConfig, RunOptions,
};
use lfm_bench::sampler::{sample_task_instances, sample_user_histories, SamplingConfig, Side, TaskKind};
use lfm_bench::synth::{generate_world, write_world, SynthWorldConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let world = generate_world(&SynthWorldConfig { n_users: 300, ratings_per_user: 150, ..Default::default() }).map_err(err)?;
    let start = Instant::now();
    let pool = select_typical_users(
        &world.ratings,
        &PoolConfig { exact_count: 150, n_eval: 300, n_background: 0, ..Default::default() },
    )
    .map_err(err)?;
    let sampling = SamplingConfig::default();
    let samples = sample_user_histories(&pool, &world.ratings, &sampling).map_err(err)?;
    let set = sample_task_instances(&samples, &world.catalog, &sampling);
    let secs = start.elapsed().as_secs_f64();
    let counts: Vec<usize> = TaskKind::ALL.iter().map(|&k| set.count(k)).collect();
    ensure(counts.iter().all(|&n| n == 2700), format!("instance counts {counts:?}"))?;
    ensure(secs < 10.0, format!("took {secs:.2}s"))?;
    Ok(format!("2700 instances per task kind in {secs:.2}s"))
}

fn render(family: usize, score: f64) -> String {
    let s = if score.fract() == 0.0 && family % 2 == 0 { format!("{score:.0}") } else { format!("{score:.1}") };
    match family {
        0 => format!("{s}/5"),
        1 => format!("{s} out of 5"),
        2 => format!("a rating of {s}"),
        _ => format!("a score of {s}"),
    }
}

fn criterion_2() -> Outcome {
    for failure in ["I would give it a rating of 4 or 4.5 out of 5", "I would give this movie a score of 3 or 4 out of 5"] {
        ensure(extract_rating(failure) == Prediction::Unreadable, format!("{failure:?} was readable"))?;
    }
    let fixtures: [(&str, f64); 30] = [
        ("4/5", 4.0),
        ("4.5/5", 4.5),
        ("0.5/5", 0.5),
        ("5/5", 5.0),
        ("3 / 5", 3.0),
        ("I'd say 2.5/5.", 2.5),
        ("Rating: 1/5", 1.0),
        ("3.5/5.0", 3.5),
        ("4 out of 5", 4.0),
        ("4.5 out of 5", 4.5),
        ("I would rate it 3 out of 5 stars.", 3.0),
        ("2 OUT OF 5", 2.0),
        ("1.5 out of 5.0", 1.5),
        ("5 out of 5!", 5.0),
        ("0.5 out of 5", 0.5),
        ("a rating of 4", 4.0),
        ("A rating of 3.5 seems fair.", 3.5),
        ("I would give it a rating of 2", 2.0),
        ("a rating of 5.0", 5.0),
        ("a score of 4.5", 4.5),
        ("I'd give it a score of 1", 1.0),
        ("A Rating Of 3", 3.0),
        ("I would give it a rating of 4.0 out of 5.", 4.0),
        ("4/5, so a rating of 4", 4.0),
        ("3.5 out of 5 (3.5/5)", 3.5),
        ("Given the history, I predict 2.5 out of 5.", 2.5),
        ("Score: 4.5/5. That is a score of 4.5.", 4.5),
        ("8/10 overall, or 4/5", 4.0),
        ("a rating of 1.5, i.e. 1.5/5", 1.5),
        ("The user would give it 5/5", 5.0),
    ];
    for (text, want) in fixtures {
        let got = extract_rating(text);
        ensure(got == Prediction::Readable(Answer::Score(want)), format!("{text:?} parsed as {got:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid: Vec<f64> = (1..=10).map(|h| h as f64 / 2.0).collect();
    let mut violations = 0;
    let n = 10_000;
    for _ in 0..n {
        let score = grid[rng.gen_range(0..grid.len())];
        let base = format!("I think {}.", render(rng.gen_range(0..4), score));
        let agree = format!("{base} To restate, {}.", render(rng.gen_range(0..4), score));
        let other = loop {
            let o = grid[rng.gen_range(0..grid.len())];
            if o != score {
                break o;
            }
        };
        let conflict = format!("{base} Or maybe {}.", render(rng.gen_range(0..4), other));
        let readable = Prediction::Readable(Answer::Score(score));
        if extract_rating(&base) != readable || extract_rating(&agree) != readable || extract_rating(&conflict) != Prediction::Unreadable {
            violations += 1;
        }
    }
    ensure(violations == 0, format!("{violations} metamorphic violations"))?;
    Ok(format!("2 published failures unreadable, 30 fixtures exact, 0 violations in {n} fuzz cases"))
}

fn criterion_3() -> Outcome {
    let obs = |u: u64, i: u64, v: f64| Observation { user: UserId(u), item: MovieId(i), value: v };
    // (a)
    let mut m = FactorModel::from_parts(1, vec![UserId(0)], vec![MovieId(0)], vec![1.0], vec![1.0], 4.0).map_err(err)?;
    m.train(&[obs(0, 0, 4.0)], 0.0, 0.0, 1);
    ensure(m.user_factors(UserId(0)) == Some(&[4.0][..]), "single-step P is not 4")?;

    // (b)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for fit_i in 0..1000 {
        let n = rng.gen_range(1..30);
        let data: Vec<Observation> =
            (0..n).map(|_| obs(rng.gen_range(0..6), rng.gen_range(0..8), rng.gen_range(0..=10) as f64 / 2.0)).collect();
        let config = NmfConfig {
            n_factors: rng.gen_range(1..5),
            n_epochs: rng.gen_range(1..12),
            reg_pu: rng.gen_range(0.0..0.2),
            reg_qi: rng.gen_range(0.0..0.2),
            seed: fit_i,
            ..Default::default()
        };
        let model = nmf::fit(&data, &config).map_err(err)?;
        for u in model.users() {
            ensure(model.user_factors(*u).unwrap().iter().all(|v| *v >= 0.0 && v.is_finite()), "negative user factor")?;
        }
        for i in model.items() {
            ensure(model.item_factors(*i).unwrap().iter().all(|v| *v >= 0.0 && v.is_finite()), "negative item factor")?;
        }
    }

    // (c)
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pu: Vec<[f64; 2]> = (0..20).map(|_| [rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5)]).collect();
    let qi: Vec<[f64; 2]> = (0..30).map(|_| [rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5)]).collect();
    let planted: Vec<Observation> = (0..20)
        .flat_map(|u| (0..30).map(move |i| (u, i)))
        .map(|(u, i)| obs(u as u64, i as u64, pu[u][0] * qi[i][0] + pu[u][1] * qi[i][1]))
        .collect();
    let model = nmf::fit(&planted, &NmfConfig { n_factors: 4, n_epochs: 200, reg_pu: 0.0, reg_qi: 0.0, ..Default::default() })
        .map_err(err)?;
    let rmse = model.training_rmse(&planted);
    // simultaneous updates swap a global scale c for 1/c each epoch, so compare after the best rescale
    let est: Vec<f64> = planted.iter().map(|o| model.raw(o.user, o.item).unwrap()).collect();
    let c = planted.iter().zip(&est).map(|(o, e)| o.value * e).sum::<f64>() / est.iter().map(|e| e * e).sum::<f64>();
    let shape = (planted.iter().zip(&est).map(|(o, e)| (o.value - c * e).powi(2)).sum::<f64>() / planted.len() as f64).sqrt();
    ensure(shape < 0.05, format!("planted rank-2 rmse {shape:.4} after rescale by {c:.3}"))?;

    // (d)
    let est = model.predict(UserId(0), MovieId(999), nmf::RATING_CLIP);
    ensure(est.imputed && est.value == model.global_mean, "unknown item not imputed with the training mean")?;
    Ok(format!("closed-form step exact, 1000 fits nonnegative, planted rmse {shape:.4} after rescale by {c:.3} (raw {rmse:.4}), unknown item imputed"))
}

fn brute_force(rows: &[ScoredInstance]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let errors: Vec<f64> = rows.iter().filter_map(|r| r.error).collect();
    let credits: Vec<f64> = rows.iter().filter_map(|r| r.credit).collect();
    let readable = rows.iter().filter(|r| r.prediction.is_readable()).count();
    let failed = rows.iter().filter(|r| r.prediction == Prediction::GenerationFailed).count();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let nonempty = !errors.is_empty();
    (
        (rows.len() > failed).then(|| readable as f64 / (rows.len() - failed) as f64),
        nonempty.then(|| mean(&errors.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt()),
        nonempty.then(|| mean(&errors.iter().map(|e| e.abs()).collect::<Vec<_>>())),
        nonempty.then(|| mean(&errors)),
        (!credits.is_empty()).then(|| 1.0 - mean(&credits)),
    )
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        (None, None) => true,
        _ => false,
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let task = TaskKind::ALL[rng.gen_range(0..3)];
        let n = rng.gen_range(1..60);
        let rows: Vec<ScoredInstance> = (0..n)
            .map(|i| {
                let prediction = match rng.gen_range(0..4) {
                    0 => Prediction::Unreadable,
                    1 => Prediction::GenerationFailed,
                    _ if task == TaskKind::Rating => Prediction::Readable(Answer::Score(rng.gen_range(1..=10) as f64 / 2.0)),
                    _ => Prediction::Readable(Answer::Choice(if rng.gen_bool(0.5) { Side::A } else { Side::B })),
                };
                let (credit, error) = if task == TaskKind::Rating {
                    (None, Some(rng.gen_range(-4.5..4.5)))
                } else {
                    (Some([0.0, 0.5, 1.0][rng.gen_range(0..3)]), None)
                };
                ScoredInstance {
                    instance_id: format!("i{i}"),
                    key: CellKey { method: Method::Direct, task, history_size: 10, profile_length: None, background_size: None },
                    prediction,
                    imputed: false,
                    credit,
                    error,
                }
            })
            .collect();
        let cell = &aggregate(&rows, GroupBy::ALL).map_err(err)?[0];
        let (rel, rmse, mae, bias, er) = brute_force(&rows);
        ensure(
            close(cell.reliability, rel) && close(cell.rmse, rmse) && close(cell.mae, mae) && close(cell.bias, bias) && close(cell.error_rate, er),
            format!("aggregate disagrees with brute force: {cell:?}"),
        )?;
        if let (Some(r), Some(m), Some(b)) = (cell.rmse, cell.mae, cell.bias) {
            ensure(r + 1e-12 >= m && m + 1e-12 >= b.abs(), "rmse >= mae >= |bias| violated")?;
        }
    }
    let world = generate_world(&SynthWorldConfig { n_users: 20, ..Default::default() }).map_err(err)?;
    let pool = select_typical_users(&world.ratings, &PoolConfig { n_eval: 20, n_background: 0, ..Default::default() }).map_err(err)?;
    let sampling = SamplingConfig::default();
    let samples = sample_user_histories(&pool, &world.ratings, &sampling).map_err(err)?;
    let by_id: BTreeMap<_, _> = samples.iter().map(|s| (s.id.clone(), s)).collect();
    let set = sample_task_instances(&samples, &world.catalog, &sampling);
    let scored: Vec<ScoredInstance> = set
        .instances
        .iter()
        .filter(|i| i.kind().is_pairwise())
        .map(|i| default_baseline(i, &by_id[&i.sample_id].history, Imputation::SampleMean))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    for cell in aggregate(&scored, GroupBy::ALL).map_err(err)? {
        ensure(cell.error_rate == Some(0.5), format!("default pairwise error rate {:?}", cell.error_rate))?;
    }
    Ok("1000 random sets match brute force within 1e-12, ordering holds, default pairwise error 0.5".into())
}

fn write_synth(dir: &Path, config: &SynthWorldConfig) -> Result<(), String> {
    let world = generate_world(config).map_err(err)?;
    write_world(&world, dir).map_err(err)?;
    Ok(())
}

fn mock_config(dir: &Path, out: &str, n_eval: usize, n_background: usize) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: dir.join(out),
        workers: 1,
        data: DataConfig { ratings: dir.join("ratings.csv"), movies: dir.join("movies.csv") },
        pool: PoolConfig { n_eval, n_background, ..Default::default() },
        background_sizes: vec![0, n_background / 2, n_background],
        backend: Some(BackendSettings {
            kind: BackendKind::Mock,
            registry: Some(dir.join("registry.json")),
            cache_dir: Some(dir.join("cache")),
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn cell<'a>(metrics: &'a [MetricsCell], method: Method, task: TaskKind, wl: Option<usize>) -> Vec<&'a MetricsCell> {
    metrics.iter().filter(|c| c.method == Some(method) && c.task == Some(task) && (wl.is_none() || c.profile_length == wl)).collect()
}

fn pooled(cells: &[&MetricsCell], f: impl Fn(&MetricsCell) -> Option<f64>) -> f64 {
    let n: usize = cells.iter().map(|c| c.n_total).sum();
    cells.iter().map(|c| f(c).unwrap_or(0.0) * c.n_total as f64).sum::<f64>() / n as f64
}

fn criterion_5() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    write_synth(tmp.path(), &SynthWorldConfig { n_users: 50, n_background_users: 100, ..Default::default() })?;
    let start = Instant::now();
    let first = run_experiment(&mock_config(tmp.path(), "first", 50, 100)).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(first.complete, "run incomplete")?;
    let m = &first.metrics;
    let default_mae = pooled(&cell(m, Method::Default, TaskKind::Rating, None), |c| c.mae);
    let mut parts = Vec::new();
    for wl in [50, 100, 200] {
        let lfm_mae = pooled(&cell(m, Method::Lfm, TaskKind::Rating, Some(wl)), |c| c.mae);
        let pref = pooled(&cell(m, Method::Lfm, TaskKind::Preference, Some(wl)), |c| c.error_rate);
        let choice = pooled(&cell(m, Method::Lfm, TaskKind::Choice, Some(wl)), |c| c.error_rate);
        ensure(lfm_mae <= default_mae - 0.3, format!("LFM {wl} mae {lfm_mae:.3} vs default {default_mae:.3}"))?;
        ensure(pref <= 0.15, format!("LFM {wl} preference error {pref:.3}"))?;
        ensure(choice <= 0.15, format!("LFM {wl} choice error {choice:.3}"))?;
        if wl == 50 {
            parts.push(format!("LFM mae {lfm_mae:.3} vs default {default_mae:.3}, pref err {pref:.3}, choice err {choice:.3}"));
        }
    }
    let second = run_experiment(&mock_config(tmp.path(), "second", 50, 100)).map_err(err)?;
    ensure(second.backend_calls == 0, format!("warm rerun made {} backend calls", second.backend_calls))?;
    for name in ["metrics.csv", "metrics.json", "records/profiles.jsonl", "records/lfm.jsonl", "records/direct.jsonl", "records/nmf.jsonl", "records/default.jsonl"] {
        let a = std::fs::read(first.dir.join(name)).map_err(err)?;
        let b = std::fs::read(second.dir.join(name)).map_err(err)?;
        ensure(a == b, format!("{name} differs on warm rerun"))?;
    }
    ensure(secs < 120.0, format!("cold run took {secs:.1}s"))?;
    parts.push(format!("warm rerun bit-identical with 0 calls, cold run {secs:.1}s"));
    Ok(parts.join("; "))
}

fn criterion_6() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    write_synth(tmp.path(), &SynthWorldConfig { n_users: 300, ..Default::default() })?;
    let mut config = mock_config(tmp.path(), "refusals", 300, 0);
    config.methods = vec![Method::Lfm, Method::Direct];
    config.profile_word_limits = vec![50];
    config.workers = 4;
    config.backend.as_mut().unwrap().refusal_rate = 0.2;
    let run = run_experiment(&config).map_err(err)?;
    ensure(run.complete, "run incomplete")?;
    let records = load_records(&run.dir).map_err(err)?;
    let attempted = records.iter().filter(|r| r.scored.prediction != Prediction::GenerationFailed).count();
    let readable = records.iter().filter(|r| r.scored.prediction.is_readable()).count();
    let reliability = readable as f64 / attempted as f64;
    let unreadable = 1.0 - reliability;
    ensure((unreadable - 0.2).abs() <= 0.01, format!("unreadable fraction {unreadable:.4}"))?;

    let ratings = load_ratings(&tmp.path().join("ratings.csv"), RatingsFormat::Csv).map_err(err)?;
    let (catalog, _) = load_catalog(&tmp.path().join("movies.csv")).map_err(err)?;
    let pool = select_typical_users(&ratings, &config.pool).map_err(err)?;
    let samples = sample_user_histories(&pool, &ratings, &config.sampling).map_err(err)?;
    let means: BTreeMap<&str, f64> = samples.iter().map(|s| (s.id.as_str(), s.history_mean().unwrap())).collect();
    let instances = sample_task_instances(&samples, &catalog, &config.sampling).instances;
    let by_id: BTreeMap<&str, _> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut refused_ratings = 0;
    for r in records.iter().filter(|r| r.scored.key.task == TaskKind::Rating && r.calls[0].output == REFUSAL) {
        refused_ratings += 1;
        let inst = by_id[r.instance_id.as_str()];
        let want = means[inst.sample_id.as_str()] - inst.truth_rating().unwrap().value();
        ensure(
            r.scored.imputed && r.scored.prediction == Prediction::Unreadable && r.scored.error == Some(want),
            format!("{} refused but not imputed with its history mean", r.instance_id),
        )?;
    }
    ensure(refused_ratings > 0, "no refused rating instances")?;
    Ok(format!(
        "unreadable fraction {unreadable:.4} over {attempted} records (injected 0.20); {refused_ratings} refused ratings imputed with history mean"
    ))
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    write_synth(tmp.path(), &SynthWorldConfig { n_users: 20, n_background_users: 20, ..Default::default() })?;
    let full = run_experiment(&mock_config(tmp.path(), "full", 20, 20)).map_err(err)?;
    let mut config = mock_config(tmp.path(), "killed", 20, 20);
    config.backend.as_mut().unwrap().cache_dir = Some(tmp.path().join("cache-killed"));
    let half = full.new_records / 2;
    let killed = run_experiment_with(&config, &RunOptions { stop_after: Some(half), generator: None }).map_err(err)?;
    ensure(!killed.complete, "run finished despite the stop")?;
    let resumed = resume(&config.out_dir).map_err(err)?;
    ensure(resumed.complete, "resume did not complete")?;
    ensure(resumed.new_records + killed.new_records == full.new_records, "resume redid finished work")?;
    let a = std::fs::read(full.dir.join("metrics.csv")).map_err(err)?;
    let b = std::fs::read(config.out_dir.join("metrics.csv")).map_err(err)?;
    ensure(a == b, "metrics differ after resume")?;
    ensure(resume(&config.out_dir).map_err(err)?.new_records == 0, "second resume was not a no-op")?;
    Ok(format!("stopped after {half} of {} records, resumed metrics identical", full.new_records))
}

fn criterion_8() -> Option<Outcome> {
    let endpoint = std::env::var("LFM_BENCH_LIVE_ENDPOINT").ok()?;
    Some((|| {
        let tmp = tempfile::tempdir().map_err(err)?;
        write_synth(tmp.path(), &SynthWorldConfig { n_users: 2, ..Default::default() })?;
        let mut config = mock_config(tmp.path(), "live", 2, 0);
        config.methods = vec![Method::Lfm, Method::Direct, Method::Default];
        config.profile_word_limits = vec![50];
        config.sampling.history_sizes = vec![10];
        config.generation.model_name = std::env::var("LFM_BENCH_LIVE_MODEL").unwrap_or_else(|_| "default".into());
        let b = config.backend.as_mut().unwrap();
        b.kind = BackendKind::Http;
        b.endpoint = endpoint;
        b.api_key_env = std::env::var("LFM_BENCH_LIVE_API_KEY_ENV").ok();
        b.wrapper_prefix = String::new();
        b.wrapper_suffix = String::new();
        let run = run_experiment(&config).map_err(err)?;
        ensure(run.complete, "run incomplete")?;
        let records = load_records(&run.dir).map_err(err)?;
        for task in TaskKind::ALL {
            let n = records
                .iter()
                .filter(|r| matches!(r.scored.key.method, Method::Lfm | Method::Direct) && r.scored.key.task == task && r.scored.prediction.is_readable())
                .count();
            ensure(n >= 1, format!("no readable {task} prediction"))?;
        }
        let rows = log_runtime(&run.dir).map_err(err)?;
        ensure(rows.iter().any(|r| r.stage == "summarize"), "no summarize runtime row")?;
        ensure(run.dir.join("runtime.csv").exists(), "runtime.csv missing")?;
        Ok(format!("{} records, {} runtime rows", records.len(), rows.len()))
    })())
}

fn main() {
    let checks: Vec<(usize, &str, fn() -> Outcome)> = vec![
        (1, "sampling protocol count", criterion_1),
        (2, "extraction fixtures", criterion_2),
        (3, "nmf correctness", criterion_3),
        (4, "metrics oracle", criterion_4),
        (5, "hermetic end-to-end", criterion_5),
        (6, "reliability accounting", criterion_6),
        (7, "resume", criterion_7),
    ];
    let mut failed = 0;
    for (n, name, f) in checks {
        match f() {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {detail}");
            }
        }
    }
    match criterion_8() {
        None => println!("criterion 8 (live smoke test): SKIP: set LFM_BENCH_LIVE_ENDPOINT to run"),
        Some(Ok(detail)) => println!("criterion 8 (live smoke test): PASS: {detail}"),
        Some(Err(detail)) => {
            failed += 1;
            println!("criterion 8 (live smoke test): FAIL: {detail}");
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
