use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn hsadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsadapt")).args(args).output().expect("spawn hsadapt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("corpus-{seed}"));
    ok(hsadapt(&["synth", "--seed", seed, "--out", p(&out)]));
    out
}

#[test]
fn synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "4");
    let b = tmp.path().join("again");
    ok(hsadapt(&["synth", "--seed", "4", "--out", p(&b)]));
    for f in ["facts.jsonl", "anchors.jsonl", "model.toy", "baseline.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(fs::read_to_string(a.join("facts.jsonl")).unwrap().lines().count(), 31);
    assert_eq!(fs::read_to_string(a.join("anchors.jsonl")).unwrap().lines().count(), 10);
    let m = manifest(&a);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 4);
    assert_eq!(m["outputs"].as_object().unwrap().len(), 4);
}

#[test]
fn unwritable_output_leaves_nothing_behind() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("corpus");
    let o = hsadapt(&["synth", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
    assert_eq!(fs::read_to_string(&blocker).unwrap(), "not a directory");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&hsadapt(&["bogus"])), 2);
    assert_eq!(code(&hsadapt(&["synth"])), 2);
    assert_eq!(code(&hsadapt(&["train", "--cache-dir", "x", "--out", "y", "--kind", "conv"])), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_hsadapt")).args(["stats"]).env("HSA_WORKERS", "0").output().unwrap();
    assert_eq!(code(&o), 2);
    assert_eq!(code(&hsadapt(&["--help"])), 0);
}

#[test]
fn missing_input_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let o = hsadapt(&["cache", "--corpus", p(&tmp.path().join("absent")), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn stats_reproduces_the_published_tables() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("stats");
    let o = ok(hsadapt(&["stats", "--out", p(&out)]));
    let text = stdout(&o);
    assert!(text.contains("overall: PASS"));
    assert!(!text.contains("FAIL"));
    assert_eq!(text.lines().filter(|l| l.ends_with("PASS")).count(), 8);
    assert!(out.join("stats.csv").exists());
    assert_eq!(manifest(&out)["status"], "ok");
}

#[test]
fn stats_rejects_tampered_data() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/paper/v1");
    for e in fs::read_dir(&src).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), data.join(e.file_name())).unwrap();
    }
    ok(hsadapt(&["stats", "--data", p(&data)]));
    let f = data.join("split_counts.jsonl");
    let text = fs::read_to_string(&f).unwrap().replacen("\"passed\": ", "\"passed\":  ", 1);
    fs::write(&f, text).unwrap();
    assert_ne!(code(&hsadapt(&["stats", "--data", p(&data)])), 0);
}

#[test]
fn gradcheck_passes_at_both_step_sizes() {
    let o = ok(hsadapt(&["gradcheck"]));
    assert!(stdout(&o).contains("correct norm 1.7321, broken norm 0.0000"));
    assert!(!stdout(&o).contains("FAIL"));
    let o = ok(hsadapt(&["gradcheck", "--eps", "1e-2"]));
    assert!(stdout(&o).contains("tolerance 1e-3"));
    assert_eq!(code(&hsadapt(&["gradcheck", "--eps", "0"])), 2);
}

#[test]
fn gradcheck_failure_exits_1_with_failed_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("g");
    let o = hsadapt(&["gradcheck", "--eps", "1e-1", "--tolerance", "1e-12", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert_eq!(manifest(&out)["status"], "failed");
    assert!(!out.join("gradcheck.txt").exists());
}

fn pipeline(corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pipeline", "--corpus", p(corpus), "--out", p(out), "--seed", "3", "--n-splits", "2", "--max-steps", "120"];
    args.extend_from_slice(extra);
    hsadapt(&args)
}

#[test]
fn pipeline_single_kind_is_reproducible_and_omits_fisher() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "2");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = ok(pipeline(&corpus, &a, &["--kinds", "swiglu"]));
    assert!(stdout(&o).contains("Fisher exact test omitted"));
    let o = Command::new(env!("CARGO_BIN_EXE_hsadapt"))
        .args(["pipeline", "--corpus", p(&corpus), "--out", p(&b), "--seed", "3", "--n-splits", "2", "--max-steps", "120"])
        .args(["--kinds", "swiglu"])
        .env("HSA_WORKERS", "2")
        .output()
        .unwrap();
    let o = ok(o);
    assert!(!stdout(&o).lines().any(|l| l.starts_with("linear")));
    for f in ["report.txt", "report.csv", "results.jsonl", "splits.json", "adapters/split1-swiglu.adp", "history/split2-swiglu.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["status"], "ok");
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert!(!a.join("adapters/split1-linear.adp").exists());
}

#[test]
fn staged_commands_chain() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "5");
    let cache = tmp.path().join("cache");
    ok(hsadapt(&["cache", "--corpus", p(&corpus), "--out", p(&cache), "--seed", "5", "--n-splits", "2"]));
    for f in ["cache.hsc", "embed.emb", "splits.json"] {
        assert!(cache.join(f).exists(), "{f}");
    }

    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 9\n\n[train]\nkind = \"swiglu\"\nmax_steps = 40\n").unwrap();
    let adp = tmp.path().join("adp");
    let o = ok(hsadapt(&["train", "--cache-dir", p(&cache), "--split", "1", "--config", p(&cfg), "--kind", "linear", "--out", p(&adp)]));
    assert!(stdout(&o).starts_with("trained linear on split 2: "));
    let m = manifest(&adp);
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["max_steps"], 40);
    assert_eq!(fs::read_to_string(adp.join("history.csv")).unwrap().lines().count(), 41);

    let ev = tmp.path().join("eval");
    ok(hsadapt(&["eval", "--cache-dir", p(&cache), "--adapter", p(&adp.join("adapter.adp")), "--split", "1", "--out", p(&ev)]));
    let base = tmp.path().join("base");
    ok(hsadapt(&["eval", "--cache-dir", p(&cache), "--out", p(&base)]));
    assert_eq!(fs::read_to_string(base.join("results.jsonl")).unwrap().lines().count(), 2);

    let rep = tmp.path().join("rep");
    let o = ok(hsadapt(&[
        "report",
        "--results",
        p(&ev.join("results.jsonl")),
        p(&base.join("results.jsonl")),
        "--corpus",
        p(&corpus),
        "--out",
        p(&rep),
    ]));
    assert!(stdout(&o).contains("Baseline pass rate by intensity level"));
    assert!(rep.join("report.csv").exists());

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "sead = 1\n").unwrap();
    assert_eq!(code(&hsadapt(&["train", "--cache-dir", p(&cache), "--config", p(&bad), "--out", p(&tmp.path().join("x"))])), 2);
}

#[test]
fn generate_checks_mode_before_printing() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "6");
    let o = ok(hsadapt(&["generate", "--corpus", p(&corpus), "--prompt", "The", "--max-tokens", "6"]));
    assert!(stdout(&o).contains("mode:       baseline"));
    let o = hsadapt(&["generate", "--corpus", p(&corpus), "--prompt", "The", "--mode", "last_position", "--side-by-side"]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
    assert_eq!(code(&hsadapt(&["generate", "--corpus", p(&corpus), "--prompt", "x", "--mode", "sideways"])), 2);
}

#[test]
fn steer_sweeps_the_default_grid() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "7");
    let out = tmp.path().join("steer");
    let o = ok(hsadapt(&["steer", "--corpus", p(&corpus), "--layers", "0,1", "--strengths", "1,2", "--out", p(&out)]));
    assert!(stdout(&o).contains("α=2"));
    assert_eq!(manifest(&out)["status"], "ok");
}
