//! Acceptance run. Prints one PASS, FAIL or SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 8 needs licensed data: set `SIGVER_DEEPSIGNDB` to a directory
//! holding `train_manifest.json`, `val_manifest.json` and
//! `eval_comparisons.json`, as written by `scripts/reproduce_deepsigndb.sh`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigver::checkpoint::{self, CheckpointMeta};
use sigver::formats::SignatureFormat;
use sigver::manifest::load_bank;
use sigver::pipeline::{run_protocol, ParallelAligner};
use sigver_core::autodiff::nn::Init;
use sigver_core::autodiff::primitives::check_all_primitives;
use sigver_core::autodiff::{Adam, AdamConfig, Graph, Mode, ParamStore, Precision, Real, Tensor};
use sigver_core::dtw::dtw_frames;
use sigver_core::evaluation::compute_eer;
use sigver_core::model::{GaussianRangeEncoding, ModelConfig, SiameseModel, Variant};
use sigver_core::synth::{generate_synthetic_dataset, subject_id};
use sigver_core::training::{
    grad_check_model, pair_accuracy, sample_pairs, train, CachedAligner, EpochLog, FeatureBank, PairSource, TrainHyper,
};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took <= budget, || format!("took {took:.1?}, budget {budget:?}"))
}

fn shape_ledger() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in Variant::ALL {
        let model = SiameseModel::<f32>::new(ModelConfig::new(variant).with_seed(1)).map_err(|e| e.to_string())?;
        let x = Tensor::new(&[2000, 23], (0..2000 * 23).map(|_| rng.random_range(-2.0..2.0)).collect())
            .map_err(|e| e.to_string())?;
        let t = model.trace_shapes(x).map_err(|e| e.to_string())?;
        let mut want_temporal = Some(92);
        let mut want_channels = None;
        let mut want_embedding = 92;
        match variant {
            Variant::Vanilla | Variant::Gait => {}
            Variant::VanillaTc => {
                want_channels = Some((64, 250));
                want_embedding = 184;
            }
            Variant::That => {
                want_temporal = None;
                want_channels = Some((64, 250));
                want_embedding = 128;
            }
        }
        let got = (t.frontend, t.temporal_tokens, t.channel_tokens, t.embedding);
        let want = ((250, 64), Some((250, 64)), want_channels, want_embedding);
        ensure(got == want, || format!("{variant}: got {got:?}, want {want:?}"))?;
        if want_temporal.is_some() {
            ensure(t.temporal_embedding == want_temporal, || format!("{variant}: temporal {:?}", t.temporal_embedding))?;
        }
        if variant == Variant::VanillaTc {
            ensure(t.channel_embedding == Some(92), || format!("{variant}: channel {:?}", t.channel_embedding))?;
        }
    }
    within(started, Duration::from_secs(1))?;
    Ok(format!("4 variants in {:.2?}", started.elapsed()))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

type Cell = (usize, usize);

/// Minimum-cost monotone path by enumeration; ties go to the path whose
/// backward moves (diagonal < up < left) are lexicographically first.
fn brute_dtw(a: &[f64], b: &[f64], c: usize) -> (f64, Vec<Cell>) {
    fn walk(cell: Cell, end: Cell, path: &mut Vec<Cell>, visit: &mut dyn FnMut(&[Cell])) {
        path.push(cell);
        if cell == end {
            visit(path);
        } else {
            let (i, j) = cell;
            for next in [(i + 1, j + 1), (i + 1, j), (i, j + 1)] {
                if next.0 <= end.0 && next.1 <= end.1 {
                    walk(next, end, path, visit);
                }
            }
        }
        path.pop();
    }
    let (n, m) = (a.len() / c, b.len() / c);
    let mut best: Option<(f64, Vec<u8>, Vec<Cell>)> = None;
    walk((0, 0), (n - 1, m - 1), &mut Vec::new(), &mut |p| {
        let cost = p
            .iter()
            .fold(0.0, |s, &(i, j)| s + dist(&a[i * c..(i + 1) * c], &b[j * c..(j + 1) * c]));
        let moves: Vec<u8> = p
            .windows(2)
            .rev()
            .map(|w| match (w[1].0 - w[0].0, w[1].1 - w[0].1) {
                (1, 1) => 0,
                (1, 0) => 1,
                _ => 2,
            })
            .collect();
        let better = match &best {
            None => true,
            Some((bc, bm, _)) => cost < *bc || (cost == *bc && moves < *bm),
        };
        if better {
            best = Some((cost, moves, p.to_vec()));
        }
    });
    let (cost, _, path) = best.expect("a path exists");
    (cost, path)
}

fn dtw_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 250;
    for case in 0..cases {
        let c = rng.random_range(1..=3);
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mut frames = |len: usize| -> Vec<f64> { (0..len * c).map(|_| f64::from(rng.random_range(-3i32..=3))).collect() };
        let (a, b) = (frames(n), frames(m));
        let got = dtw_frames(&a, &b, c).map_err(|e| e.to_string())?;
        let (cost, path) = brute_dtw(&a, &b, c);
        ensure(got.cost == cost && got.steps == path, || {
            format!("case {case}: cost {} vs {cost}, path {:?} vs {path:?}", got.cost, got.steps)
        })?;
    }
    within(started, Duration::from_secs(10))?;
    Ok(format!("{cases} pairs identical in {:.2?}", started.elapsed()))
}

fn gradients() -> Check {
    let started = Instant::now();
    let mut worst_primitive = 0.0f64;
    for (p, r) in check_all_primitives(100, Precision::F64).map_err(|e| e.to_string())? {
        ensure(r.max_relative_error <= 1e-5, || format!("{p:?}: {:.3e}", r.max_relative_error))?;
        worst_primitive = worst_primitive.max(r.max_relative_error);
    }
    let mut worst_model = 0.0f64;
    for variant in Variant::ALL {
        let r = grad_check_model(variant, 128, 0, Precision::F64).map_err(|e| e.to_string())?;
        ensure(r.max_relative_error <= 1e-4, || {
            format!("{variant}: {:.3e} at {}[{}]", r.max_relative_error, r.worst_parameter, r.worst_index)
        })?;
        worst_model = worst_model.max(r.max_relative_error);
    }
    within(started, Duration::from_secs(300))?;
    Ok(format!(
        "primitives {worst_primitive:.1e}, variants {worst_model:.1e} in {:.1?}",
        started.elapsed()
    ))
}

fn gre_row_error<F: Real>(store: &ParamStore<F>, gre: &GaussianRangeEncoding) -> Result<f64, String> {
    let mut g = Graph::new(store, Mode::Eval);
    let w = gre.weights(&mut g).map_err(|e| e.to_string())?;
    let w = g.value(w);
    Ok((0..gre.positions)
        .map(|i| ((0..gre.ranges).map(|j| w.get(i, j).as_f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

fn gre_case<F: Real>(ranges: usize, positions: usize) -> Result<f64, String> {
    let err = |e: sigver_core::Error| e.to_string();
    let mut store = ParamStore::<F>::new();
    let gre = GaussianRangeEncoding::new(&mut store, &mut Init::new(3), "gre", positions, 8, ranges).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(positions as u64 * 31 + ranges as u64);
    let target: Vec<F> = (0..positions * 8).map(|_| F::of(rng.random_range(-1.0..1.0))).collect();
    let mut worst = gre_row_error(&store, &gre)?;
    let mut adam = Adam::new(AdamConfig { lr: 0.5, ..AdamConfig::default() }, &store);
    for _ in 0..100 {
        let grads = {
            let mut g = Graph::new(&store, Mode::Eval);
            let e = gre.encoding(&mut g).map_err(err)?;
            let l = g.weighted_sum(e, &target).map_err(err)?;
            g.backward(l).map_err(err)?
        };
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(&mut store);
        worst = worst.max(gre_row_error(&store, &gre)?);
    }
    Ok(worst)
}

fn gre_normalisation() -> Check {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for ranges in [2, 5, 20] {
        for positions in [64, 250] {
            let e = gre_case::<f32>(ranges, positions)?.max(gre_case::<f64>(ranges, positions)?);
            ensure(e <= 1e-6, || format!("K {ranges}, T {positions}: row sum off by {e:.2e}"))?;
            worst = worst.max(e);
        }
    }
    within(started, Duration::from_secs(30))?;
    Ok(format!("max row error {worst:.1e} over 100 steps in {:.2?}", started.elapsed()))
}

/// EER by sweeping every score as a threshold; lowest threshold wins ties.
fn brute_eer(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let (ng, ni) = (genuine.len(), impostor.len());
    let mut best: Option<(u128, f64, f64)> = None;
    for &t in [f64::NEG_INFINITY, f64::INFINITY].iter().chain(genuine).chain(impostor) {
        let fa = impostor.iter().filter(|&&s| s >= t).count();
        let fr = genuine.iter().filter(|&&s| s < t).count();
        let gap = ((fa * ng) as i128 - (fr * ni) as i128).unsigned_abs();
        let better = match best {
            None => true,
            Some((bg, bt, _)) => gap < bg || (gap == bg && t < bt),
        };
        if better {
            best = Some((gap, t, (fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0));
        }
    }
    let (_, t, eer) = best.expect("candidates exist");
    (eer, t)
}

fn eer_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let grid: u32 = if case % 2 == 0 { 20 } else { 1000 };
        let shift = rng.random_range(0..grid / 2);
        let mut draw = |offset: u32| -> Vec<f64> {
            let n = rng.random_range(1..=30);
            (0..n)
                .map(|_| f64::from((rng.random_range(1..grid) + offset).min(grid - 1)) / f64::from(grid))
                .collect()
        };
        let (g, i) = (draw(shift), draw(0));
        let got = compute_eer(&g, &i).map_err(|e| e.to_string())?;
        let want = brute_eer(&g, &i);
        ensure((got.eer, got.threshold) == want, || format!("case {case}: {:?} vs {want:?}", (got.eer, got.threshold)))?;
    }
    let separable = compute_eer(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3]).map_err(|e| e.to_string())?.eer;
    ensure(separable == 0.0, || format!("separable EER {separable}"))?;
    let degenerate = compute_eer(&[0.5], &[0.5]).map_err(|e| e.to_string())?.eer;
    ensure(degenerate == 0.5, || format!("identical-score EER {degenerate}"))?;
    within(started, Duration::from_secs(10))?;
    Ok(format!("1000 sets plus edge cases in {:.2?}", started.elapsed()))
}

const SMOKE_SEED: u64 = 42;

fn smoke_banks() -> Result<(FeatureBank, FeatureBank), String> {
    let data = generate_synthetic_dataset(20, 16, 8, SMOKE_SEED).map_err(|e| e.to_string())?;
    let cut = subject_id(14);
    let (tr, va): (Vec<_>, Vec<_>) = data.into_iter().partition(|s| s.subject_id() < cut.as_str());
    Ok((
        FeatureBank::from_signatures(&tr).map_err(|e| e.to_string())?,
        FeatureBank::from_signatures(&va).map_err(|e| e.to_string())?,
    ))
}

fn smoke_hyper() -> TrainHyper {
    TrainHyper {
        adam: AdamConfig::default(),
        batch_size: 16,
        max_epochs: 30,
        patience: 30,
        pairs_per_epoch: 256,
        validation_pairs: 128,
        seed: SMOKE_SEED,
    }
}

struct SmokeRun {
    log: Vec<EpochLog>,
    accuracy: f64,
    validation_eer: f64,
    best_epoch: usize,
    took: Duration,
}

/// Trains in f32 on one thread and measures the accuracy of the kept model
/// on 128 training pairs drawn independently of the training schedule.
fn smoke_run(train_bank: &FeatureBank, val_bank: &FeatureBank) -> Result<SmokeRun, String> {
    let started = Instant::now();
    let config = ModelConfig::new(Variant::Vanilla).with_seed(SMOKE_SEED);
    let mut source = CachedAligner::default();
    let out = train::<f32>(config, train_bank, val_bank, &smoke_hyper(), &mut source, &mut |_| {})
        .map_err(|e| e.to_string())?;
    let probe = sample_pairs(train_bank, 128, 7).map_err(|e| e.to_string())?;
    let pairs = source.prepare(train_bank, &probe.pairs, 2000).map_err(|e| e.to_string())?;
    let accuracy = pair_accuracy(&out.model, &pairs).map_err(|e| e.to_string())?;
    Ok(SmokeRun {
        log: out.log,
        accuracy,
        validation_eer: out.state.best_validation_eer,
        best_epoch: out.state.best_epoch,
        took: started.elapsed(),
    })
}

fn smoke(run: &Result<SmokeRun, String>) -> Check {
    let run = run.as_ref().map_err(Clone::clone)?;
    let summary = format!(
        "accuracy {:.3}, validation EER {:.3} (epoch {} of {}), {:.1?}",
        run.accuracy,
        run.validation_eer,
        run.best_epoch,
        run.log.len(),
        run.took
    );
    ensure(run.accuracy >= 0.95 && run.validation_eer <= 0.15, || summary.clone())?;
    ensure(run.took <= Duration::from_secs(20 * 60), || format!("{summary}: over 20 min"))?;
    Ok(summary)
}

fn determinism(first: &Result<SmokeRun, String>, banks: &(FeatureBank, FeatureBank)) -> Check {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = smoke_run(&banks.0, &banks.1)?;
    let bits = |log: &[EpochLog]| log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    ensure(bits(&first.log) == bits(&second.log), || {
        let at = first.log.iter().zip(&second.log).position(|(a, b)| a.loss.to_bits() != b.loss.to_bits());
        format!("loss logs differ (first difference at epoch {:?})", at.map(|i| i + 1))
    })?;
    Ok(format!("{} epoch losses bit-identical", first.log.len()))
}

fn deepsigndb(dir: &Path) -> Check {
    let err = |e: sigver::AppError| e.to_string();
    let train_bank = load_bank(&dir.join("train_manifest.json")).map_err(err)?;
    let val_bank = load_bank(&dir.join("val_manifest.json")).map_err(err)?;
    let epochs = std::env::var("SIGVER_DEEPSIGNDB_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(30);
    let hyper = TrainHyper {
        max_epochs: epochs,
        ..TrainHyper::default()
    };
    let config = ModelConfig::new(Variant::Vanilla);
    let out = train::<f32>(config.clone(), &train_bank, &val_bank, &hyper, &mut ParallelAligner::default(), &mut |l| {
        eprintln!("{}", serde_json::to_string(l).expect("log line serialises"));
    })
    .map_err(|e| e.to_string())?;
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = work.path().join("vanilla.ckpt");
    let meta = CheckpointMeta {
        model: config,
        training_subjects: train_bank.subjects().into_iter().map(String::from).collect(),
        optimizer: None,
        optimizer_step: 0,
        train_state: Some(out.state),
    };
    checkpoint::save(&ckpt, &out.model, None, &meta).map_err(err)?;
    let run = run_protocol(
        &ckpt,
        &dir.join("eval_comparisons.json"),
        SignatureFormat::CanonicalTsv,
        &work.path().join("report"),
        false,
    )
    .map_err(err)?;
    let eer = 100.0 * run.report.eer_overall.eer;
    ensure((eer - 4.64).abs() <= 1.5, || format!("overall EER {eer:.2}%, target 4.64 ± 1.5"))?;
    Ok(format!("overall EER {eer:.2}%"))
}

fn guarded(f: impl FnOnce() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(m)) => Outcome::Pass(m),
        Ok(Err(m)) => Outcome::Fail(m),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        }
    }
}

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    let (tag, msg, ok) = match outcome {
        Outcome::Pass(m) => ("PASS", m, true),
        Outcome::Fail(m) => ("FAIL", m, false),
        Outcome::Skip(m) => ("SKIP", m, true),
    };
    println!("criterion {n} {name}: {tag} - {msg}");
    ok
}

fn main() {
    let mut ok = true;
    ok &= report(1, "shape ledger", &guarded(shape_ledger));
    ok &= report(2, "dtw oracle", &guarded(dtw_oracle));
    ok &= report(3, "gradient verification", &guarded(gradients));
    ok &= report(4, "gre normalisation", &guarded(gre_normalisation));
    ok &= report(5, "eer oracle", &guarded(eer_oracle));

    let banks = smoke_banks();
    let first = match &banks {
        Ok((tr, va)) => catch_unwind(AssertUnwindSafe(|| smoke_run(tr, va))).unwrap_or_else(|_| Err("smoke run panicked".into())),
        Err(e) => Err(e.clone()),
    };
    ok &= report(6, "end-to-end smoke", &guarded(|| smoke(&first)));
    ok &= report(
        7,
        "determinism",
        &guarded(|| determinism(&first, banks.as_ref().map_err(Clone::clone)?)),
    );

    let dataset = std::env::var_os("SIGVER_DEEPSIGNDB");
    let outcome = match dataset {
        Some(dir) => guarded(|| deepsigndb(Path::new(&dir))),
        None => Outcome::Skip("SIGVER_DEEPSIGNDB not set".into()),
    };
    ok &= report(8, "deepsigndb reproduction", &outcome);

    if !ok {
        std::process::exit(1);
    }
}
