use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 5
steps = 4
batch_size = 4
warmup_steps = 1
videos_per_class = 1
eval_per_class = 1
eval_frames = 1, 8
";

fn videococa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_videococa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = videococa(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.cfg");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_fails_without_creating_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let missing = tmp.path().join("absent.cfg");
    let res = videococa(&["--config", s(&missing), "--out", s(&out), "gen-data"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("does not exist"));
    assert!(!out.exists());
}

#[test]
fn bad_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = videococa(&["--override", "learning_rate=1", "--out", s(&out), "gen-data"]);
    assert!(!res.status.success());
    assert!(!out.exists());
}

#[test]
fn gen_data_writes_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&out), "gen-data"]);
    let data = out.join("data");
    assert!(data.join("vocab.txt").is_file());
    assert!(fs::read_dir(&data).unwrap().count() >= 3);
    assert!(fs::read_to_string(out.join("config.resolved")).unwrap().contains("seed = 5"));
}

#[test]
fn training_replays_from_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    ok(&["--config", s(&cfg), "--override", "lr=0.001", "--out", s(&first), "train"]);
    let resolved = first.join("config.resolved");
    ok(&["--config", s(&resolved), "--out", s(&second), "train"]);
    let log = fs::read_to_string(first.join("steps.tsv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert_eq!(log, fs::read_to_string(second.join("steps.tsv")).unwrap());
    assert_eq!(
        fs::read(first.join("model.vcck")).unwrap(),
        fs::read(second.join("model.vcck")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(&resolved).unwrap(),
        fs::read_to_string(second.join("config.resolved")).unwrap()
    );
}

#[test]
fn cached_and_live_training_match() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cache_dir = tmp.path().join("cache");
    ok(&["--config", s(&cfg), "--out", s(&cache_dir), "precompute-cache"]);
    let cached = tmp.path().join("cached");
    let init = cache_dir.join("init.vcck");
    let cache = cache_dir.join("cache.vcca");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&cached),
        "train",
        "--cache",
        s(&cache),
        "--init",
        s(&init),
    ]);
    let live = tmp.path().join("live");
    ok(&[
        "--config",
        s(&cfg),
        "--override",
        "use_cache=false",
        "--out",
        s(&live),
        "train",
        "--init",
        s(&init),
    ]);
    let losses = |dir: &Path| -> Vec<f64> {
        fs::read_to_string(dir.join("steps.tsv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let (a, b) = (losses(&cached), losses(&live));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn cache_from_other_weights_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cache_dir = tmp.path().join("cache");
    ok(&["--config", s(&cfg), "--out", s(&cache_dir), "precompute-cache"]);
    let res = videococa(&[
        "--config",
        s(&cfg),
        "--seed",
        "6",
        "--out",
        s(&tmp.path().join("other")),
        "train",
        "--cache",
        s(&cache_dir.join("cache.vcca")),
    ]);
    assert!(!res.status.success());
}

#[test]
fn evaluation_commands_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["--config", s(&cfg), "--out", s(&run), "gen-data"]);
    let data = run.join("data");
    ok(&["--config", s(&cfg), "--out", s(&run), "train", "--data", s(&data)]);
    let ck = run.join("model.vcck");
    let common = ["--config", s(&cfg), "--out"];
    for (cmd, metric) in [
        ("eval-cls", "top1"),
        ("eval-retrieval", "t2v_R@1"),
        ("eval-caption", "BLEU-4"),
        ("ablate-frames", "top1"),
        ("vqa-train", "vqa_accuracy"),
    ] {
        let out = tmp.path().join(cmd);
        let mut args = common.to_vec();
        args.extend([s(&out), cmd, "--data", s(&data), "--checkpoint", s(&ck)]);
        let stdout = ok(&args);
        assert!(stdout.starts_with("metric\tsplit\tvalue\tparams"), "{cmd}: {stdout}");
        let report = fs::read_to_string(out.join("report.tsv")).unwrap();
        assert!(report.lines().any(|l| l.starts_with(&format!("{metric}\t"))), "{cmd}: {report}");
        for line in fs::read_to_string(out.join("report.jsonl")).unwrap().lines() {
            assert!(line.starts_with('{') && line.contains("\"metric\""));
        }
    }
    let frames = fs::read_to_string(tmp.path().join("ablate-frames/report.tsv")).unwrap();
    assert_eq!(frames.lines().filter(|l| l.starts_with("top1\t")).count(), 2);
    assert!(tmp.path().join("eval-caption/captions.tsv").is_file());
}
