use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[model]
width = 16
layers = 1
heads = 2
vision_feature_dim = 16
patch_height = 16
patch_width = 16
frames = 2

[train]
epochs = 1
batch_size = 4
"#;

fn lavender(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lavender"))
        .args(args)
        .env("LAVENDER_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lavender(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = lavender(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

struct Env {
    dir: TempDir,
}

impl Env {
    fn new(n: usize) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        let e = Env { dir };
        ok(&["gen", "--n", &n.to_string(), "--seed", "7", "--out", &e.s("corpus")]);
        e
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }

    fn train(&self, cmd: &str, out: &str, extra: &[&str]) -> String {
        let (config, corpus, out) = (self.s("small.toml"), self.s("corpus"), self.s(out));
        let mut args = vec![cmd, "--config", &config, "--corpus", &corpus, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_writes_the_requested_clips_reproducibly() {
    let e = Env::new(20);
    let manifest = fs::read_to_string(e.p("corpus/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 20);
    ok(&["gen", "--n", "20", "--seed", "7", "--out", &e.s("again")]);
    for f in ["manifest.jsonl", "corpus.json", "vocab.txt", "clips/clip00003.vclp"] {
        assert_eq!(read(&e.p(&format!("corpus/{f}"))), read(&e.p(&format!("again/{f}"))), "{f}");
    }
}

#[test]
fn invalid_splits_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c").to_string_lossy().into_owned();
    let (c, err) = code(&["gen", "--n", "10", "--splits", "0.5,0.5,0.5", "--out", &out]);
    assert_eq!(c, 2);
    assert!(err.contains("split"), "{err}");
}

#[test]
fn pretrain_archives_config_and_reruns_identically() {
    let e = Env::new(16);
    e.train("pretrain", "a", &["--seed", "3"]);
    e.train("pretrain", "b", &["--seed", "3"]);
    for f in ["model.ckpt", "history.jsonl"] {
        assert_eq!(read(&e.p(&format!("a/{f}"))), read(&e.p(&format!("b/{f}"))), "{f}");
    }
    let run = fs::read_to_string(e.p("a/run.toml")).unwrap();
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("out = ")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&run), strip(&fs::read_to_string(e.p("b/run.toml")).unwrap()));
    assert!(run.starts_with("# lavender "), "{run}");
    assert!(run.contains("seed = 3"), "{run}");
    // values from the file survive next to the flags
    assert!(run.contains("width = 16"), "{run}");
}

#[test]
fn few_shot_logs_the_rounded_up_training_size() {
    let e = Env::new(40);
    let out = e.train("finetune", "ft", &["--task", "mc_qa", "--few-shot", "0.1"]);
    // 32 training clips, one multiple-choice question each
    assert!(out.contains("training samples: 4"), "{out}");
    let metrics = fs::read_to_string(e.p("ft/metrics.json")).unwrap();
    assert!(metrics.contains("\"mc_qa\""), "{metrics}");
}

#[test]
fn multitask_records_the_decoration() {
    let e = Env::new(16);
    e.train("multitask", "mt", &["--tasks", "mc_qa,oe_qa", "--variant", "prompt"]);
    let run = fs::read_to_string(e.p("mt/run.toml")).unwrap();
    assert!(run.contains("decoration = \"prompt\""), "{run}");
    assert!(e.p("mt/model.ckpt").is_file());
}

#[test]
fn missing_init_checkpoint_exits_with_usage_code() {
    let e = Env::new(8);
    let (config, corpus, out, init) = (e.s("small.toml"), e.s("corpus"), e.s("x"), e.s("nope.ckpt"));
    let (c, err) = code(&["finetune", "--task", "oe_qa", "--config", &config, "--corpus", &corpus, "--out", &out, "--init", &init]);
    assert_eq!(c, 2);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let e = Env::new(8);
    fs::write(e.p("bad.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let (config, corpus, out) = (e.s("bad.toml"), e.s("corpus"), e.s("x"));
    let (c, _) = code(&["pretrain", "--config", &config, "--corpus", &corpus, "--out", &out]);
    assert_eq!(c, 2);
}

#[test]
fn zero_shot_scope_and_retrieval_report() {
    let e = Env::new(16);
    e.train("pretrain", "pre", &[]);
    let (ck, corpus) = (e.s("pre/model.ckpt"), e.s("corpus"));
    let (c, err) = code(&["zeroshot", "--checkpoint", &ck, "--corpus", &corpus, "--task", "caption"]);
    assert_eq!(c, 2);
    assert!(err.contains("zero-shot"), "{err}");
    let out = ok(&["zeroshot", "--checkpoint", &ck, "--corpus", &corpus, "--task", "mc_qa"]);
    assert!(out.contains("\"accuracy\""), "{out}");
    let out = ok(&["eval", "--checkpoint", &ck, "--corpus", &corpus, "--task", "retrieval", "--out", &e.s("ev")]);
    for k in ["r1", "r5", "r10", "average_recall"] {
        assert!(out.contains(k), "{k} missing from {out}");
    }
    assert!(e.p("ev/predictions.jsonl").is_file());
    let table = ok(&["report", &e.s("ev")]);
    assert!(table.contains("meta-average"), "{table}");
}

#[test]
fn non_finite_training_exits_with_numeric_code() {
    let e = Env::new(8);
    let (config, corpus, out) = (e.s("small.toml"), e.s("corpus"), e.s("x"));
    let (c, err) = code(&["pretrain", "--config", &config, "--corpus", &corpus, "--out", &out, "--lr", "1e300", "--epochs", "3"]);
    assert_eq!(c, 3, "{err}");
}
