use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[model]
layers = 1
heads = 2
d_z = 4
max_len = 12
vocab = 8
method = "method4"
clip_k = 4
[task]
train_len = [4, 12]
eval_lens = [12, 24]
[optimizer]
lr = 0.003
[schedule]
epochs = 2
steps_per_epoch = 10
batch_size = 4
eval_batch = 4
[sweep]
k_values = [2, 4]
seeds = [1, 2]
"#;

fn relpos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relpos")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn paramcount_prints_bert_base_counts() {
    let o = relpos(&["paramcount", "--check"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for count in ["393216", "73728", "147312", "9427968"] {
        assert!(out.contains(count), "{count} missing:\n{out}");
    }
}

#[test]
fn bad_input_exits_with_one() {
    assert_eq!(code(&relpos(&["train", "--method", "nope"])), 1);
    assert_eq!(code(&relpos(&["paramcount", "--max-len", "1"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlayerz = 2\n").unwrap();
    assert_eq!(code(&relpos(&["train", "--config", bad.to_str().unwrap()])), 1);
    // Clipping is meaningless for Method1.
    assert_eq!(code(&relpos(&["train", "--method", "method1", "--k", "3"])), 1);
}

#[test]
fn gradcheck_and_equivalence_pass() {
    for method in ["shaw", "xlnet", "method1", "method4"] {
        let o = relpos(&["gradcheck", "--method", method]);
        assert_eq!(code(&o), 0, "{method}: {}", String::from_utf8_lossy(&o.stdout));
    }
    assert_eq!(code(&relpos(&["equivalence"])), 0);
}

#[test]
fn train_is_byte_reproducible_and_eval_reports_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    for run in ["a", "b"] {
        assert_eq!(code(&relpos(&["train", "--config", &cfg, "--out", &out(run)])), 0);
    }
    let a = fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().contains("param_count"));
    for f in ["timing.json", "model.ckpt", "config.toml"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    let ckpt = out("a/model.ckpt");
    let o = relpos(&["eval", "--config", &cfg, "--checkpoint", &ckpt, "--out", &out("e")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Absolute cannot go past its table.
    let abs_cfg = out("abs.toml");
    fs::write(&abs_cfg, TINY.replace("clip_k = 4\n", "")).unwrap();
    let abs = out("abs");
    assert_eq!(code(&relpos(&["train", "--config", &abs_cfg, "--method", "absolute", "--out", &abs])), 0);
    let o = relpos(&["eval", "--config", &abs_cfg, "--checkpoint", &format!("{abs}/model.ckpt"), "--out", &abs]);
    assert_eq!(code(&o), 3);

    let tokens = dir.path().join("tokens.txt");
    fs::write(&tokens, "1 2 3 4 5 6 7 1 2 3 4 5 6 7 1 2").unwrap();
    let o = relpos(&[
        "export-attn", "--config", &cfg, "--checkpoint", &ckpt, "--tokens", tokens.to_str().unwrap(), "--out",
        &out("x"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let attn = fs::read_to_string(dir.path().join("x/attention.csv")).unwrap();
    assert_eq!(attn.lines().count(), 17);
    let emb = fs::read_to_string(dir.path().join("x/embedding_weights.csv")).unwrap();
    // Distances −4…4 with clip 4.
    assert_eq!(emb.lines().count(), 10);
}

#[test]
fn sweep_and_extrapolate_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("s");
    let o = relpos(&["sweep-k", "--config", &cfg, "--workers", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("k,acc_len_12,acc_len_24\n"), "{csv}");
    assert_eq!(csv.lines().count(), 3);

    let out = dir.path().join("x");
    let o = relpos(&["extrapolate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(out.join("extrapolation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    fs::write(&cfg, TINY.replace("lr = 0.003", "lr = 1e300")).unwrap();
    let o = relpos(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
