use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::args::{Command, Common, EvalArgs, ExportArgs, ParamcountArgs};
use crate::config::RunConfig;
use relpos::attention::check::{
    encoder_gradcheck, group_passes, identity_init_deviation, logits_gradcheck, m4_equivalence, CheckDims,
};
use relpos::attention::{checkpoint, Encoder};
use relpos::posembed::{
    param_count, relative_sinusoid, sinusoid_table, weights_csv, AbsTable, MethodKind, PositionMethod, RelTable,
};
use relpos::tasks::{
    attention_csv, export_attention, extrapolate_eval, sweep_csv, sweep_k, EvalOutcome, RunMetrics, TaskGenerator,
};
use relpos::tensor::{GroupError, ParamStore, SeededRng};
use relpos::{Error, Result};

/// Exit status for a command outcome: 0 success, 1 invalid input,
/// 2 numeric or training failure, 3 sequence beyond model capacity.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Capacity { .. }) => 3,
        Err(Error::Numeric { .. } | Error::Divergence { .. }) => 2,
        Err(_) => 1,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Paramcount(a) => paramcount(&a),
        Command::Gradcheck(c) => gradcheck(&resolve(&c)?),
        Command::Equivalence(c) => equivalence(&resolve(&c)?),
        Command::Train(c) => train(&resolve(&c)?),
        Command::Eval(a) => eval(&a),
        Command::SweepK(c) => sweep(&resolve(&c)?),
        Command::Extrapolate(c) => extrapolate(&resolve(&c)?),
        Command::ExportAttn(a) => export_attn(&a),
    }
}

fn resolve(c: &Common) -> Result<RunConfig> {
    RunConfig::resolve(c.config.as_deref(), &c.overrides()?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents).map_err(|e| Error::Io(format!("{}: {e}", dir.join(name).display())))
}

/// Creates the output directory and echoes the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io(format!("{}: {e}", cfg.out.display())))?;
    write(&cfg.out, "config.toml", &cfg.to_toml())
}

fn accuracy_json(acc: &BTreeMap<usize, EvalOutcome>) -> Value {
    serde_json::to_value(acc).expect("accuracies serialize")
}

/// One JSON object per epoch, then a summary object. Wall-clock time is kept
/// out of this file so repeated runs produce identical bytes.
pub fn metrics_jsonl(metrics: &RunMetrics, model: &Encoder) -> String {
    let mut out = String::new();
    for (i, e) in metrics.epochs.iter().enumerate() {
        let line = json!({
            "epoch": i + 1,
            "step": e.step,
            "loss": e.loss,
            "accuracy": accuracy_json(&e.accuracy),
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    let summary = json!({
        "summary": {
            "param_count": metrics.param_count,
            "position_param_count": model.position_element_count(),
            "backbone_param_count": model.backbone_element_count(),
            "steps": metrics.epochs.last().map_or(0, |e| e.step),
            "final_accuracy": metrics.final_accuracy().map(accuracy_json),
        }
    });
    out.push_str(&summary.to_string());
    out.push('\n');
    out
}

fn write_run(cfg: &RunConfig, model: &Encoder, metrics: &RunMetrics) -> Result<()> {
    write(&cfg.out, "metrics.jsonl", &metrics_jsonl(metrics, model))?;
    write(
        &cfg.out,
        "timing.json",
        &format!("{}\n", json!({ "wall_clock_s": metrics.wall_clock_s })),
    )?;
    checkpoint::save(model, cfg.out.join("model.ckpt"))
}

fn print_accuracy(acc: &BTreeMap<usize, EvalOutcome>) {
    for (len, outcome) in acc {
        match outcome {
            EvalOutcome::Accuracy(a) => println!("  length {len:>4}: accuracy {a:.4}"),
            EvalOutcome::CapacityError => println!("  length {len:>4}: capacity error"),
        }
    }
}

fn paramcount(a: &ParamcountArgs) -> Result<()> {
    let (mut m, mut h, mut n, mut d) = (12, 12, 512, 64);
    if let Some(path) = &a.common.config {
        let cfg = RunConfig::load(path)?;
        (m, h, n, d) = (cfg.model.layers, cfg.model.heads, cfg.model.max_len, cfg.model.d_z);
    }
    m = a.layers.unwrap_or(m);
    h = a.heads.unwrap_or(h);
    n = a.common.max_len.unwrap_or(n);
    d = a.dim.unwrap_or(d);
    if m == 0 || h == 0 || n < 2 || d == 0 {
        return Err(Error::Config(format!("need m, h, d >= 1 and n >= 2, got ({m}, {h}, {n}, {d})")));
    }
    println!("m={m} h={h} n={n} d={d} (d_x={})", h * d);
    println!("{:<10} {:<34} {:>14}{}", "method", "formula", "count", if a.check { "  built" } else { "" });
    for kind in MethodKind::ALL {
        let method = PositionMethod::new(kind);
        let count = param_count(&method, m, h, n, d);
        let mut line = format!("{:<10} {:<34} {:>14}", kind.name(), kind.formula(), count);
        if a.check {
            let built = built_count(&method, m, h, n, d)?;
            if built != count {
                return Err(Error::Numeric {
                    op: "paramcount",
                    detail: format!("{kind}: formula {count}, built {built}"),
                });
            }
            line.push_str(&format!("  {built}"));
        }
        println!("{line}");
    }
    Ok(())
}

/// Element count of the position parameters actually allocated for `method`.
fn built_count(method: &PositionMethod, m: usize, h: usize, n: usize, d: usize) -> Result<usize> {
    let mut store = ParamStore::new();
    match method.kind {
        MethodKind::Absolute => {
            AbsTable::new(&mut store, n, h * d, &mut SeededRng::new(0));
        }
        MethodKind::XlnetLike => {
            for _ in 0..m * h {
                store.add("w_r", relpos::tensor::Tensor::zeros(&[d, d]));
            }
        }
        _ => {
            RelTable::new(&mut store, method, m, h, n, d)?;
        }
    }
    Ok(store.element_count())
}

fn report_groups(label: &str, groups: &[GroupError], full_encoder: bool, failures: &mut Vec<String>) {
    for g in groups {
        let ok = group_passes(g, full_encoder);
        let shown = if full_encoder { g.rel_floored } else { g.rel };
        println!(
            "{label:<10} {:<24} rel {shown:.3e}  {}",
            g.name,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("{label} {}", g.name));
        }
    }
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let kind = cfg.method_kind()?;
    let mut failures = Vec::new();
    report_groups("logits", &logits_gradcheck(kind, false, cfg.seed)?, false, &mut failures);
    if kind == MethodKind::Method4 {
        report_groups("expanded", &logits_gradcheck(kind, true, cfg.seed)?, false, &mut failures);
    }
    report_groups(
        "encoder",
        &encoder_gradcheck(kind, cfg.seed, CheckDims::default())?,
        true,
        &mut failures,
    );
    if failures.is_empty() {
        println!("gradcheck {kind}: pass");
        Ok(())
    } else {
        Err(Error::Numeric {
            op: "gradcheck",
            detail: failures.join(", "),
        })
    }
}

fn equivalence(cfg: &RunConfig) -> Result<()> {
    let mut failed = Vec::new();
    let worst = m4_equivalence(100, cfg.seed)?;
    let ok = worst < 1e-10;
    println!("pairwise vs expanded pairwise, 100 instances: max |diff| {worst:.3e}  {}", verdict(ok));
    if !ok {
        failed.push("pairwise forms".to_string());
    }
    for (kind, dev) in identity_init_deviation(cfg.seed)? {
        let ok = dev == 0.0;
        println!("identity init {:<10} max |diff| {dev:.3e}  {}", kind.name(), verdict(ok));
        if !ok {
            failed.push(format!("identity init {kind}"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: "equivalence",
            detail: failed.join(", "),
        })
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let (model, metrics) = cfg.experiment()?.run()?;
    write_run(cfg, &model, &metrics)?;
    println!(
        "trained {} for {} steps in {:.1}s; {} parameters",
        model.config().method,
        metrics.epochs.last().map_or(0, |e| e.step),
        metrics.wall_clock_s,
        metrics.param_count
    );
    if let Some(acc) = metrics.final_accuracy() {
        print_accuracy(acc);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let mut spec = cfg.task_spec();
    spec.vocab = model.config().vocab;
    let task = TaskGenerator::new(spec)?;
    let acc = extrapolate_eval(&model, &task, cfg.schedule.eval_batch, &SeededRng::new(cfg.seed))?;
    prepare_out(&cfg)?;
    write(
        &cfg.out,
        "eval.jsonl",
        &format!("{}\n", json!({ "accuracy": accuracy_json(&acc) })),
    )?;
    print_accuracy(&acc);
    if let Some((&len, _)) = acc.iter().find(|(_, o)| **o == EvalOutcome::CapacityError) {
        return Err(Error::Capacity {
            detail: "evaluation length beyond the model's position table".into(),
            len,
            max: model.config().max_len,
        });
    }
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    cfg.validate_sweep()?;
    prepare_out(cfg)?;
    let rows = sweep_k(&cfg.experiment()?, &cfg.sweep.k_values, &cfg.sweep.seeds, cfg.workers)?;
    let mut jsonl = String::new();
    for row in &rows {
        for (seed, acc) in &row.runs {
            jsonl.push_str(&json!({ "k": row.k, "seed": seed, "accuracy": accuracy_json(acc) }).to_string());
            jsonl.push('\n');
        }
        let means: BTreeMap<usize, Option<f64>> =
            cfg.task.eval_lens.iter().map(|&l| (l, row.mean_at(l))).collect();
        jsonl.push_str(&json!({ "k": row.k, "mean_accuracy": means }).to_string());
        jsonl.push('\n');
    }
    write(&cfg.out, "sweep.jsonl", &jsonl)?;
    let table = sweep_csv(&rows);
    write(&cfg.out, "sweep.csv", &table)?;
    print!("{table}");
    Ok(())
}

fn extrapolate(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let (model, metrics) = cfg.experiment()?.run()?;
    write_run(cfg, &model, &metrics)?;
    let acc = metrics.final_accuracy().cloned().unwrap_or_default();
    let mut csv = String::from("length,accuracy\n");
    for (len, outcome) in &acc {
        match outcome {
            EvalOutcome::Accuracy(a) => csv.push_str(&format!("{len},{a}\n")),
            EvalOutcome::CapacityError => csv.push_str(&format!("{len},capacity_error\n")),
        }
    }
    write(&cfg.out, "extrapolation.csv", &csv)?;
    println!("trained on lengths {}..={}", cfg.task.train_len[0], cfg.task.train_len[1]);
    print_accuracy(&acc);
    Ok(())
}

/// Token ids separated by whitespace or commas.
pub fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Usage(format!("bad token id {s:?}"))))
        .collect()
}

/// Relative distances exported for the embedding-weight plot.
const EXPORT_SPAN: i64 = 50;

fn export_attn(a: &ExportArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let text = fs::read_to_string(&a.tokens).map_err(|e| Error::Io(format!("{}: {e}", a.tokens.display())))?;
    let tokens = parse_tokens(&text)?;
    if tokens.is_empty() {
        return Err(Error::Usage("token file is empty".into()));
    }
    let weights = export_attention(&model, &tokens, a.layer)?;
    let emb = embedding_weights_csv(&model, a.layer, a.head)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io(format!("{}: {e}", cfg.out.display())))?;
    write(&cfg.out, "attention.csv", &attention_csv(&weights))?;
    write(&cfg.out, "embedding_weights.csv", &emb)?;
    println!(
        "wrote {}x{} attention of layer {} and position weights to {}",
        tokens.len(),
        tokens.len(),
        a.layer,
        cfg.out.display()
    );
    Ok(())
}

/// Position weights of one layer and head for distances −50…50, clamped to
/// the clip distance and to what the model stores. Absolute and sinusoid inputs export per-position
/// rows instead.
fn embedding_weights_csv(model: &Encoder, layer: usize, head: usize) -> Result<String> {
    let cfg = model.config();
    if layer >= cfg.layers || head >= cfg.heads {
        return Err(Error::Bounds(format!(
            "layer {layer}, head {head} of a {}x{} encoder",
            cfg.layers, cfg.heads
        )));
    }
    let n = cfg.max_len as i64;
    match cfg.method.kind {
        MethodKind::Absolute => {
            let abs = model.abs_table().expect("absolute table");
            Ok(weights_csv(model.store().value(abs.weights), 0).replacen("rel_pos", "pos", 1))
        }
        MethodKind::Sinusoid => Ok(weights_csv(&sinusoid_table(0..n, cfg.d_x)?, 0).replacen("rel_pos", "pos", 1)),
        MethodKind::XlnetLike => {
            let span = EXPORT_SPAN.min(n - 1);
            let r = relative_sinusoid(span as usize + 1, cfg.d_z)?;
            let w_r = model.xlnet_params(layer, head).expect("xlnet parameters").w_r;
            Ok(weights_csv(&r.matmul(model.store().value(w_r))?, -span))
        }
        _ => {
            let table = model.rel_table().expect("relative table");
            let (min, max) = table.distance_extent();
            // Entries past the clip distance are never read.
            let span = cfg.method.clip_k.map_or(EXPORT_SPAN, |k| EXPORT_SPAN.min(k as i64));
            let (lo, hi) = ((-span).max(min), span.min(max));
            Ok(weights_csv(&table.export_weights(model.store(), layer, head, lo, hi)?, lo))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), 0);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), 1);
        assert_eq!(exit_code(&Err(Error::Divergence { step: 3, loss: f64::NAN })), 2);
        assert_eq!(
            exit_code(&Err(Error::Capacity {
                detail: String::new(),
                len: 9,
                max: 8
            })),
            3
        );
    }

    #[test]
    fn tokens_parse() {
        assert_eq!(parse_tokens("1 2,3\n4").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_tokens("1 x").is_err());
    }

    #[test]
    fn built_counts_match_formulas() {
        for kind in MethodKind::ALL {
            let method = PositionMethod::new(kind);
            assert_eq!(
                built_count(&method, 2, 3, 9, 4).unwrap(),
                param_count(&method, 2, 3, 9, 4),
                "{kind}"
            );
        }
    }
}
