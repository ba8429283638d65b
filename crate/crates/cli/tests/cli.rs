use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY_MODEL: &str = r#"
seed = 3

[model]
d_model = 16
n_layers = 1
n_heads = 2
max_context = 2048
projector_hidden = 16

[train]
epochs = 1
learning_rate = 0.003
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamdial"))
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn run(root: &Path, args: &[&str]) -> Output {
    bin().env("STREAMDIAL_OUTPUT_ROOT", root).args(args).output().expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = run(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    config: PathBuf,
    ckpt: Vec<(&'static str, PathBuf)>,
}

impl Fixture {
    fn train(&self) -> PathBuf {
        self.data.join("train.jsonl")
    }

    fn val(&self) -> PathBuf {
        self.data.join("val.jsonl")
    }

    fn checkpoint(&self, scheme: &str) -> &Path {
        &self.ckpt.iter().find(|(s, _)| *s == scheme).expect("trained scheme").1
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset and one tiny checkpoint per scheme, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let data = dir.join("data");
        ok(&dir, &["gen-data", "--out", s(&data), "--num-samples", "8", "--num-frames", "48", "--val-fraction", "0.25"]);
        let config = dir.join("tiny.toml");
        std::fs::write(&config, TINY_MODEL).unwrap();
        let mut ckpt = Vec::new();
        for scheme in ["streaming", "per_frame", "interleaved"] {
            let out = dir.join(format!("train-{scheme}"));
            let train = data.join("train.jsonl");
            ok(&dir, &["train", "--config", s(&config), "--data", s(&train), "--scheme", scheme, "--out", s(&out)]);
            ckpt.push((scheme, out.join("checkpoint.sdck")));
        }
        Fixture { dir, data, config, ckpt }
    })
}

#[test]
fn gen_data_default_config_writes_splits_and_manifest() {
    let root = scratch("gen-default");
    let out = ok(&root, &["gen-data"]);
    let dirs: Vec<_> = std::fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "one timestamped run directory");
    let run = &dirs[0];
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("gen-data-"));
    let manifest: serde_json::Value = serde_json::from_str(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["train"]["count"], 180);
    assert_eq!(manifest["val"]["count"], 20);
    assert_eq!(read(run.join("train.jsonl")).lines().count(), 180);
    assert!(read(run.join("config.resolved.toml")).contains("val_fraction = 0.1"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train: 180 samples, val: 20 samples"));
}

#[test]
fn gen_data_same_seed_gives_identical_files() {
    let root = scratch("gen-seed");
    let args = |out: &Path| {
        ["gen-data", "--seed", "11", "--num-samples", "12", "--num-frames", "60", "--source", "dialogue", "--out"]
            .into_iter()
            .map(String::from)
            .chain([s(out).to_string()])
            .collect::<Vec<_>>()
    };
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    for d in [&a, &b] {
        ok(&root, &args(d).iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["train.jsonl", "val.jsonl", "manifest.json", "config.resolved.toml"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    ok(&root, &["gen-data", "--seed", "12", "--num-samples", "12", "--num-frames", "60", "--source", "dialogue", "--out", s(&c)]);
    assert_ne!(read(a.join("train.jsonl")), read(c.join("train.jsonl")));
}

#[test]
fn zero_val_fraction_warns_and_writes_an_empty_split() {
    let root = scratch("gen-val0");
    let out = ok(&root, &["gen-data", "--num-samples", "3", "--num-frames", "30", "--val-fraction", "0", "--out", s(&root.join("d"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert_eq!(read(root.join("d/val.jsonl")), "");
    let manifest: serde_json::Value = serde_json::from_str(&read(root.join("d/manifest.json"))).unwrap();
    assert_eq!(manifest["val"]["count"], 0);
    assert_eq!(manifest["train"]["count"], 3);
}

#[test]
fn bad_config_is_a_usage_error() {
    let root = scratch("bad-config");
    let cfg = root.join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nnot_a_field = 3\n").unwrap();
    let out = run(&root, &["gen-data", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_field"));
    assert_eq!(run(&root, &["gen-data", "--config", s(&root.join("missing.toml"))]).status.code(), Some(1));
    assert_eq!(run(&root, &["gen-data", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(run(&root, &["--help"]).status.code(), Some(0));
}

#[test]
fn explicit_output_directory_is_write_once() {
    let root = scratch("write-once");
    let d = root.join("d");
    ok(&root, &["gen-data", "--num-samples", "2", "--num-frames", "30", "--out", s(&d)]);
    assert_eq!(run(&root, &["gen-data", "--num-samples", "2", "--num-frames", "30", "--out", s(&d)]).status.code(), Some(1));
}

#[test]
fn training_writes_checkpoint_log_and_state() {
    let f = fixture();
    for (scheme, ckpt) in &f.ckpt {
        let dir = ckpt.parent().unwrap();
        assert!(ckpt.is_file(), "{scheme}");
        assert!(dir.join("optimizer.bin").is_file());
        let log = read(dir.join("train_log.csv"));
        assert!(log.starts_with("step,"));
        assert_eq!(log.lines().count(), 1 + 6, "one row per training sample at batch size 1");
        let state: serde_json::Value = serde_json::from_str(&read(dir.join("train_state.json"))).unwrap();
        assert_eq!(state["epochs_done"], 1);
        assert!(read(dir.join("config.resolved.toml")).contains(&format!("scheme = \"{scheme}\"")));
    }
}

#[test]
fn per_frame_overflow_names_the_sample() {
    let f = fixture();
    let root = scratch("overflow");
    let out = run(
        &root,
        &["train", "--config", s(&f.config), "--data", s(&f.train()), "--scheme", "per_frame", "--max-context", "300"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("context overflow"), "{err}");
    assert!(err.contains("sample `narration-00000`"), "{err}");
}

#[test]
fn resume_refuses_a_mismatched_config() {
    let f = fixture();
    let root = scratch("resume-bad");
    let prev = f.checkpoint("streaming").parent().unwrap();
    let out = run(&root, &["train", "--resume", s(prev), "--learning-rate", "0.01", "--scheme", "interleaved"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("refusing to resume"), "{err}");
    assert!(err.contains("train.learning_rate: 0.003 -> 0.01"), "{err}");
    assert!(err.contains("train.scheme: \"streaming\" -> \"interleaved\""), "{err}");
}

#[test]
fn resume_continues_training() {
    let f = fixture();
    let root = scratch("resume-ok");
    let prev = f.checkpoint("streaming").parent().unwrap();
    let out = root.join("more");
    ok(&root, &["train", "--resume", s(prev), "--epochs", "2", "--out", s(&out)]);
    let state: serde_json::Value = serde_json::from_str(&read(out.join("train_state.json"))).unwrap();
    assert_eq!(state["epochs_done"], 2);
    assert_eq!(state["steps"], 12);
    assert_eq!(read(out.join("train_log.csv")).lines().count(), 1 + 12);
    assert_ne!(std::fs::read(out.join("checkpoint.sdck")).unwrap(), std::fs::read(f.checkpoint("streaming")).unwrap());
}

#[test]
fn eval_records_the_default_threshold() {
    let f = fixture();
    let root = scratch("eval-default");
    let out = root.join("e");
    ok(&root, &["eval", "--checkpoint", s(f.checkpoint("streaming")), "--data", s(&f.val()), "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&read(out.join("metrics.json"))).unwrap();
    assert_eq!(m["theta"], 0.6);
    assert_eq!(m["scheme"], "streaming");
    assert_eq!(m["reports"].as_array().unwrap().len(), 1);
    assert_eq!(m["reports"][0]["theta"], 0.6);
    assert!(m["reports"][0]["lm_ppl"].as_f64().unwrap() >= 1.0);
    assert!(read(out.join("config.resolved.toml")).contains("theta = 0.6"));
}

#[test]
fn eval_sweep_gives_one_row_per_threshold() {
    let f = fixture();
    let root = scratch("eval-sweep");
    let out = root.join("e");
    ok(&root, &["eval", "--checkpoint", s(f.checkpoint("per_frame")), "--data", s(&f.val()), "--theta-sweep", "0.5:0.8:0.1", "--out", s(&out)]);
    let csv = read(out.join("metrics.csv"));
    let thetas: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(thetas, ["0.5", "0.6", "0.7", "0.8"]);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("per_frame,")));
}

#[test]
fn eval_without_a_checkpoint_fails_clearly() {
    let f = fixture();
    let root = scratch("eval-missing");
    let missing = root.join("nope.sdck");
    let out = run(&root, &["eval", "--checkpoint", s(&missing), "--data", s(&f.val())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
    assert_eq!(std::fs::read_dir(&root).unwrap().count(), 0, "no run directory for a failed invocation");
}

#[test]
fn stream_writes_transcript_and_summary() {
    let f = fixture();
    let root = scratch("stream");
    let out = root.join("s");
    ok(&root, &[
        "stream", "--checkpoint", s(f.checkpoint("streaming")), "--sample", s(&f.val()), "--index", "1",
        "--theta", "0.6", "--fps", "2", "--decode-ms", "30", "--mode", "simulated", "--out", s(&out),
    ]);
    let lines = read(out.join("transcript.jsonl"));
    assert_eq!(lines.lines().count(), 48);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["frame_index"], 0);
    let summary: serde_json::Value = serde_json::from_str(&read(out.join("summary.json"))).unwrap();
    assert_eq!(summary["frames"], 48);
    assert_eq!(summary["mode"], "simulated");

    let conc = root.join("c");
    ok(&root, &[
        "stream", "--checkpoint", s(f.checkpoint("streaming")), "--sample", s(&f.val()), "--mode", "concurrent",
        "--time-scale", "0", "--decode-ms", "0", "--encode-ms", "0", "--skip-policy", "block", "--out", s(&conc),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&read(conc.join("summary.json"))).unwrap();
    assert_eq!(summary["mode"], "concurrent");
    assert_eq!(summary["frames_skipped"], 0);
    assert_eq!(
        run(&root, &["stream", "--checkpoint", s(f.checkpoint("streaming")), "--sample", s(&f.val()), "--index", "9"]).status.code(),
        Some(1)
    );
}

#[test]
fn bench_reports_checks_and_exit_code() {
    let f = fixture();
    let root = scratch("bench");
    let out = root.join("b");
    let res = run(&root, &[
        "bench", "--streaming", s(f.checkpoint("streaming")), "--per-frame", s(f.checkpoint("per_frame")),
        "--interleaved", s(f.checkpoint("interleaved")), "--untrained", "--data", s(&f.val()),
        "--train-data", s(&f.train()), "--check-concurrent", "--latency-sweep", "0,30", "--out", s(&out),
    ]);
    let checks: Vec<serde_json::Value> = serde_json::from_str(&read(out.join("checks.json"))).unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c["name"].as_str().unwrap()).collect();
    for n in ["timediff_ordering", "fluency_ordering", "peak_cache_ordering", "streaming_no_skips", "train_tokens_equal", "untrained_ppl_gap"] {
        assert!(names.contains(&n), "{n} missing from {names:?}");
    }
    for label in ["streaming", "per_frame", "interleaved", "untrained"] {
        let c = checks.iter().find(|c| c["name"] == format!("concurrent_equivalence_{label}")).unwrap();
        assert_eq!(c["passed"], true, "{c}");
    }
    let tokens = checks.iter().find(|c| c["name"] == "train_tokens_equal").unwrap();
    assert_eq!(tokens["passed"], true);
    let all = checks.iter().all(|c| c["passed"] == true);
    assert_eq!(res.status.code(), Some(if all { 0 } else { 3 }));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")).count(), checks.len());

    let csv = read(out.join("ablation.csv"));
    assert!(csv.starts_with("Method,LM-PPL,LG-Match,TimeDiff,Fluency,#Training Token"));
    assert_eq!(csv.lines().count(), 5);
    assert!(read(out.join("ablation.md")).contains("| untrained |"));
    let sweep = read(out.join("latency_sweep.csv"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 4);
    assert!(out.join("metrics.json").is_file());
}

#[test]
fn bench_needs_a_checkpoint() {
    let f = fixture();
    let root = scratch("bench-none");
    assert_eq!(run(&root, &["bench", "--data", s(&f.val())]).status.code(), Some(1));
}

fn same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

#[test]
fn every_subcommand_is_reproducible() {
    let f = fixture();
    let root = scratch("repro");
    let pair = |name: &str| (root.join(format!("{name}-1")), root.join(format!("{name}-2")));
    let (g1, g2) = pair("gen");
    for g in [&g1, &g2] {
        ok(&root, &["gen-data", "--seed", "5", "--num-samples", "4", "--num-frames", "40", "--out", s(g)]);
    }
    same_files(&g1, &g2);
    let (t1, t2) = pair("train");
    for t in [&t1, &t2] {
        ok(&root, &["train", "--config", s(&f.config), "--data", s(&g1.join("train.jsonl")), "--out", s(t)]);
    }
    same_files(&t1, &t2);
    let (e1, e2) = pair("eval");
    for e in [&e1, &e2] {
        ok(&root, &["eval", "--checkpoint", s(&t1.join("checkpoint.sdck")), "--data", s(&f.val()), "--theta-sweep", "0.5:0.7:0.1", "--out", s(e)]);
    }
    same_files(&e1, &e2);
    let (b1, b2) = pair("bench");
    for b in [&b1, &b2] {
        let _ = run(&root, &["bench", "--streaming", s(&t1.join("checkpoint.sdck")), "--per-frame", s(f.checkpoint("per_frame")), "--data", s(&f.val()), "--latency-sweep", "10,30", "--out", s(b)]);
    }
    same_files(&b1, &b2);
    let _ = &f.dir;
}
