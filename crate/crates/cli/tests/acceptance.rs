//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. The training criteria take roughly a quarter
//! hour on one core.

use std::fs;
use std::process::Command;
use std::time::Instant;

use relpos::attention::check::{
    clip_plateau_spread, encoder_gradcheck, group_passes, logits_gradcheck, m4_equivalence, shift_deviation,
    CheckDims,
};
use relpos::attention::{checkpoint, Encoder, EncoderConfig};
use relpos::posembed::{param_count, AbsTable, Extrapolation, MethodKind, PositionMethod, RelTable};
use relpos::tasks::{band_mass, export_attention, sweep_k, TaskGenerator, TaskKind, BAND_RADIUS};
use relpos::tensor::{ParamStore, SeededRng};
use relpos::Error;
use relpos_cli::config::{Overrides, RunConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

/// Closed-form position parameter counts, written out independently of the library.
fn expected_count(kind: MethodKind, m: usize, h: usize, n: usize, d: usize) -> usize {
    match kind {
        MethodKind::Absolute => n * h * d,
        MethodKind::Sinusoid => 0,
        MethodKind::Shaw | MethodKind::Method3 | MethodKind::Method4 => m * h * (2 * n - 1) * d,
        MethodKind::Method1 => m * h * n,
        MethodKind::Method2 => m * h * (2 * n - 1),
        MethodKind::XlnetLike => m * h * d * d,
    }
}

fn parameter_accounting() -> Outcome {
    let table_kinds = [
        MethodKind::Absolute,
        MethodKind::Shaw,
        MethodKind::Method1,
        MethodKind::Method2,
        MethodKind::Method3,
        MethodKind::Method4,
    ];
    let mut dims = vec![(12, 12, 512, 64)];
    let mut rng = SeededRng::new(17);
    for _ in 0..3 {
        dims.push((rng.between(1, 4), rng.between(1, 4), rng.between(2, 24), 2 * rng.between(1, 4)));
    }
    let mut checked = 0;
    for &(m, h, n, d) in &dims {
        for kind in table_kinds {
            let method = PositionMethod::new(kind);
            let mut store = ParamStore::new();
            let built = match kind {
                MethodKind::Absolute => AbsTable::new(&mut store, n, h * d, &mut SeededRng::new(0)).element_count(&store),
                _ => RelTable::new(&mut store, &method, m, h, n, d)
                    .map_err(e2s)?
                    .map_or(0, |t| t.element_count()),
            };
            let want = expected_count(kind, m, h, n, d);
            if built != want || param_count(&method, m, h, n, d) != want {
                return Err(format!("{kind} at {:?}: built {built}, expected {want}", (m, h, n, d)));
            }
            // Small configs also go through the full encoder.
            if n < 512 {
                let model = Encoder::new(EncoderConfig::new(m, h, d, n, 5, method), 1).map_err(e2s)?;
                if model.position_element_count() != want {
                    return Err(format!("{kind} encoder at {:?}", (m, h, n, d)));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (method, config) pairs exact, including (12,12,512,64)"))
}

fn algebraic_identity() -> Outcome {
    let worst = m4_equivalence(100, 2024).map_err(e2s)?;
    check(worst < 1e-10, format!("100 instances, max |diff| {worst:.2e} (tol 1e-10)"))
}

fn gradient_correctness() -> Outcome {
    let mut worst_logits: f64 = 0.0;
    let mut worst_encoder: f64 = 0.0;
    for kind in MethodKind::ALL {
        let mut reports = vec![(false, logits_gradcheck(kind, false, 1).map_err(e2s)?)];
        if kind == MethodKind::Method4 {
            reports.push((false, logits_gradcheck(kind, true, 1).map_err(e2s)?));
        }
        reports.push((true, encoder_gradcheck(kind, 1, CheckDims::default()).map_err(e2s)?));
        for (full, groups) in reports {
            for g in groups {
                if full {
                    worst_encoder = worst_encoder.max(g.rel_floored);
                } else {
                    worst_logits = worst_logits.max(g.rel);
                }
                if !group_passes(&g, full) {
                    return Err(format!("{kind} {}: rel {:.2e} floored {:.2e}", g.name, g.rel, g.rel_floored));
                }
            }
        }
    }
    Ok(format!(
        "all methods, h=1e-5: logits max rel {worst_logits:.2e}, encoder max rel {worst_encoder:.2e} (tol 1e-6)"
    ))
}

fn shift_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for kind in MethodKind::ALL.into_iter().filter(|k| k.is_relative()) {
        for (len, shift, seed) in [(4, 3, 1), (6, 1, 2), (8, 5, 3)] {
            worst = worst.max(shift_deviation(kind, len, shift, seed).map_err(e2s)?);
        }
    }
    let abs = shift_deviation(MethodKind::Absolute, 6, 1, 2).map_err(e2s)?;
    check(
        worst <= 1e-12 && abs > 1e-6,
        format!("relative max dev {worst:.2e} (tol 1e-12); absolute dev {abs:.2e}"),
    )
}

fn clipping_semantics() -> Outcome {
    let mut worst: f64 = 0.0;
    for kind in MethodKind::ALL.into_iter().filter(|k| k.accepts_clip()) {
        for (pos, neg) in clip_plateau_spread(kind, 2, 9, 11).map_err(e2s)? {
            worst = worst.max(pos).max(neg);
        }
    }
    check(worst == 0.0, format!("k=2, spread of logits at |j-i| >= 2: {worst:e}"))
}

fn inductive_property() -> Outcome {
    let n = 8;
    let tokens = |len: usize| (0..len).map(|i| i % 5).collect::<Vec<_>>();
    let abs = Encoder::new(EncoderConfig::new(1, 2, 4, n, 5, PositionMethod::new(MethodKind::Absolute)), 1)
        .map_err(e2s)?;
    let abs_ok = matches!(abs.predict(&tokens(n + 1), Extrapolation::Saturate), Err(Error::Capacity { .. }));
    let mut failed = Vec::new();
    for kind in MethodKind::ALL.into_iter().filter(|k| k.is_relative()) {
        let method = PositionMethod {
            clip_k: kind.accepts_clip().then_some(3),
            ..PositionMethod::new(kind)
        };
        let model = Encoder::new(EncoderConfig::new(1, 2, 4, n, 5, method), 1).map_err(e2s)?;
        match model.predict(&tokens(2 * n), Extrapolation::Saturate) {
            Ok(t) if t.data().iter().all(|v| v.is_finite()) => {}
            _ => failed.push(kind.name()),
        }
    }
    check(
        abs_ok && failed.is_empty(),
        format!("absolute capacity error at L=n+1: {abs_ok}; relative failures at L=2n: {failed:?}"),
    )
}

fn base_config() -> Result<RunConfig, String> {
    RunConfig::resolve(None, &Overrides::default()).map_err(e2s)
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Criteria 7 and 8 share one sweep: Method4 on offset-copy, k ∈ {2,8,16,31},
/// seeds {1,2,3}, the default toy config.
fn plateau_and_extrapolation() -> (Outcome, Outcome) {
    let run = || -> Result<_, String> {
        let cfg = base_config()?;
        let exp = cfg.experiment().map_err(e2s)?;
        let rows = sweep_k(&exp, &[2, 8, 16, 31], &[1, 2, 3], workers()).map_err(e2s)?;
        let chance = 1.0 / cfg.model.vocab as f64;
        Ok((rows, chance))
    };
    let (rows, chance) = match run() {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    println!("  k-accuracy table (mean over seeds 1,2,3):");
    println!("  {}", relpos::tasks::sweep_csv(&rows).trim_end().replace('\n', "\n  "));
    let mean = |k: usize, len: usize| rows.iter().find(|r| r.k == k).and_then(|r| r.mean_at(len));
    let plateau = match (mean(8, 32), mean(16, 32)) {
        (Some(a8), Some(a16)) => check(
            (a8 - a16).abs() <= 0.02,
            format!("len 32: k=8 {:.2}%, k=16 {:.2}% (within 2 points)", 100.0 * a8, 100.0 * a16),
        ),
        _ => Err("missing accuracies".into()),
    };
    let extrap = match (mean(8, 32), mean(8, 64)) {
        (Some(a32), Some(a64)) => check(
            (a32 - a64).abs() <= 0.05 && a64 - chance >= 0.5,
            format!(
                "k=8: len 32 {:.2}%, len 64 {:.2}%, chance {:.2}%",
                100.0 * a32,
                100.0 * a64,
                100.0 * chance
            ),
        ),
        _ => Err("missing accuracies".into()),
    };
    (plateau, extrap)
}

/// Masked-LM training, three seeds; band mass of the exported layer-0
/// attention averaged over held-out sequences of length 32.
fn attention_locality() -> Outcome {
    let mut cfg = base_config()?;
    cfg.task.kind = TaskKind::MaskedLm;
    cfg.task.train_len = [16, 32];
    cfg.task.eval_lens = vec![32];
    let len = 32;
    let mut exps = Vec::new();
    for seed in [1, 2, 3] {
        cfg.seed = seed;
        exps.push(cfg.experiment().map_err(e2s)?);
    }
    let models: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = exps.iter().map(|e| s.spawn(move || e.run())).collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });
    let task = TaskGenerator::new(cfg.task_spec()).map_err(e2s)?;
    let mut rng = SeededRng::new(99);
    let (mut total, mut count, mut worst_row) = (0.0, 0, 0.0f64);
    for model in models {
        let (model, _) = model.map_err(e2s)?;
        let batch = task.generate(&mut rng, 8, len).map_err(e2s)?;
        for seq in &batch.inputs {
            let w = export_attention(&model, seq, 0).map_err(e2s)?;
            for r in 0..len {
                worst_row = worst_row.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
            }
            total += band_mass(&w, BAND_RADIUS).map_err(e2s)?;
            count += 1;
        }
    }
    let mean = total / count as f64;
    let baseline = (2 * BAND_RADIUS + 1) as f64 / len as f64;
    check(
        mean > baseline && worst_row <= 1e-9,
        format!("band mass {mean:.3} vs uniform {baseline:.3}; max |row sum - 1| {worst_row:.1e}"),
    )
}

const TINY: &str = r#"
seed = 7
[model]
layers = 1
heads = 2
d_z = 4
max_len = 12
vocab = 8
clip_k = 4
[task]
train_len = [4, 12]
eval_lens = [12, 24]
[optimizer]
lr = 0.003
[schedule]
epochs = 3
steps_per_epoch = 20
batch_size = 8
eval_batch = 8
"#;

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).map_err(|e| e.to_string())?;
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_relpos"))
            .args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("train failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        metrics.push(fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())?);
    }
    let identical = metrics[0] == metrics[1];

    let model = checkpoint::load(dir.path().join("a/model.ckpt")).map_err(e2s)?;
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&model, &again).map_err(e2s)?;
    let reloaded = checkpoint::load(&again).map_err(e2s)?;
    let tokens: Vec<usize> = (0..20).map(|i| (i * 3) % 7).collect();
    let a = model.predict(&tokens, Extrapolation::Saturate).map_err(e2s)?;
    let b = reloaded.predict(&tokens, Extrapolation::Saturate).map_err(e2s)?;
    let bitwise = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        identical && bitwise,
        format!("metrics byte-identical: {identical}; reloaded forward bitwise equal: {bitwise}"),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, outcome: Outcome, results: &mut Vec<(&str, Outcome)>| {
        let line = match &outcome {
            Ok(d) => format!("PASS  {name}: {d}"),
            Err(d) => format!("FAIL  {name}: {d}"),
        };
        println!("{line}");
        results.push((name, outcome));
    };
    report("1 parameter accounting", parameter_accounting(), &mut results);
    report("2 pairwise form identity", algebraic_identity(), &mut results);
    report("3 gradient correctness", gradient_correctness(), &mut results);
    report("4 shift invariance", shift_invariance(), &mut results);
    report("5 clipping semantics", clipping_semantics(), &mut results);
    report("6 inductive property", inductive_property(), &mut results);
    let (plateau, extrap) = plateau_and_extrapolation();
    report("7 clip-distance plateau", plateau, &mut results);
    report("8 length extrapolation", extrap, &mut results);
    report("9 attention locality", attention_locality(), &mut results);
    report("10 determinism and persistence", determinism_and_persistence(), &mut results);

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
