use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kags(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kags"))
        .args(args)
        .env_remove("KAGS_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|f| (f.strip_prefix(dir).unwrap().display().to_string(), fs::read(&f).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            files.extend(walk(&path));
        } else {
            files.push(path);
        }
    }
    files
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&kags(&["--help"])), 0);
    assert_eq!(code(&kags(&["generate", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let o = kags(&["train"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&kags(&["frobnicate"])), 1);
}

#[test]
fn missing_input_exits_one() {
    let o = kags(&["eval", "--predictions", "/nonexistent/p.jsonl", "--manifest", "/nonexistent/m.jsonl"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("p.jsonl"));
}

#[test]
fn bad_thread_count_exits_one() {
    let o = Command::new(env!("CARGO_BIN_EXE_kags"))
        .args(["gradcheck", "--module", "matmul"])
        .env("KAGS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_command() {
    let o = kags(&["gradcheck", "--module", "matmul", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    assert_eq!(code(&kags(&["gradcheck", "--module", "nope"])), 1);
}

#[test]
fn synth_is_seed_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    for (dir, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        assert_eq!(code(&kags(&["synth", "--albums", "3", "--out", p(dir), "--seed", seed])), 0);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn pipeline_runs_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(code(&kags(&["synth", "--albums", "2", "--out", p(&data), "--seed", "1"])), 0);
    let o = kags(&[
        "train", "--preset", "scaled", "--manifest", p(&manifest), "--knowledge",
        p(&data.join("knowledge.tsv")), "--out", p(&run), "--epochs", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("parameters"));
    let ckpt = run.join("checkpoint.kagc");
    let preds = root.path().join("preds.jsonl");
    let o = kags(&["generate", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&preds)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 2);
    let json = root.path().join("metrics.json");
    let o = kags(&["eval", "--predictions", p(&preds), "--manifest", p(&manifest), "--json", p(&json)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("CIDEr"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report.get("bleu1").is_some());
    let cams = root.path().join("cams");
    assert_eq!(code(&kags(&["cam", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&cams)])), 0);
    let maps = walk(&cams);
    assert_eq!(maps.len(), 10);
    let first = fs::read_to_string(&maps[0]).unwrap();
    assert_eq!(first.lines().count(), 4);
    assert!(first.lines().all(|l| l.split(',').count() == 4));
}
