use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset: 4 base, 2 val, 6 novel classes of 12 examples.
fn synth(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let seed = seed.to_string();
    let out = run(&[
        "synth", "--out", s(dir), "--seed", &seed, "--base-classes", "4", "--val-classes", "2",
        "--novel-classes", "6", "--examples", "12", "--width", "3", "--height", "3", "--dim", "16",
        "--prior-classes", "12",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (dir.join("manifest.toml"), dir.join("prior_head.fhd"))
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["eval", "--bogus"])), 1);
    assert_eq!(code(&run(&["eval", "--manifest", "m.toml", "--optimizer", "rmsprop"])), 1);
    assert_eq!(code(&run(&[])), 1);
}

#[test]
fn synth_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), 4);
    synth(b.path(), 4);
    for file in ["prior_head.fhd", "features/novel_000.fvt", "features/base_003.fvt"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
    }
    let manifest = fs::read_to_string(a.path().join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[class]]").count(), 12);
}

#[test]
fn invalid_synth_spec_touches_nothing() {
    let dir = TempDir::new().unwrap();
    let target = dir.path().join("never");
    let out = run(&["synth", "--out", s(&target), "--signal-fraction", "1.5"]);
    assert_eq!(code(&out), 1);
    assert!(!target.exists());
}

#[test]
fn attend_writes_identical_caches_and_heatmaps() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 1);
    let c1 = dir.path().join("a.fat");
    let c2 = dir.path().join("b.fat");
    let maps = dir.path().join("maps");
    let first = run(&[
        "attend", "--manifest", s(&manifest), "--head", s(&head), "--out", s(&c1), "--heatmaps",
        s(&maps),
    ]);
    assert_eq!(code(&first), 0);
    assert!(stdout(&first).contains("T = 2.6"));
    let second = run(&["attend", "--manifest", s(&manifest), "--head", s(&head), "--out", s(&c2)]);
    assert_eq!(stdout(&first).lines().next(), stdout(&second).lines().next().map(|l| l.replace("b.fat", "a.fat")).as_deref());
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    // 12 classes of 12 examples, 3x3 maps of f64 plus two indices each.
    assert_eq!(fs::read(&c1).unwrap().len(), 20 + 144 * (8 + 9 * 8));
    let pgm = fs::read(maps.join("0005_0011.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
    assert_eq!(pgm.len(), 11 + 9);
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 144);
}

#[test]
fn attend_temperature_profiles() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 1);
    let cache = dir.path().join("c.fat");
    for (flags, shown) in [
        (vec!["--profile", "cub"], "T = 100"),
        (vec!["--profile", "mini-original"], "T = 2.4"),
        (vec!["--profile", "cub", "--temp", "7.5"], "T = 7.5"),
    ] {
        let mut args = vec!["attend", "--manifest", s(&manifest), "--head", s(&head), "--out", s(&cache)];
        args.extend(flags);
        let out = run(&args);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).contains(shown), "{}", stdout(&out));
    }
    let out = run(&["attend", "--manifest", s(&manifest), "--head", s(&head), "--out", s(&cache), "--temp", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn attend_empty_manifest_gives_empty_cache() {
    let dir = TempDir::new().unwrap();
    let (_, head) = synth(dir.path(), 1);
    let manifest = dir.path().join("empty.toml");
    fs::write(&manifest, "").unwrap();
    let cache = dir.path().join("e.fat");
    let out = run(&["attend", "--manifest", s(&manifest), "--head", s(&head), "--out", s(&cache)]);
    assert_eq!(code(&out), 0);
    let bytes = fs::read(&cache).unwrap();
    assert_eq!(&bytes[..4], b"FAT1");
    assert_eq!(&bytes[16..20], &[0, 0, 0, 0]);
}

#[test]
fn base_train_with_no_shots_saves_identity() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = synth(dir.path(), 2);
    let art = dir.path().join("art.json");
    let out = run(&["base-train", "--manifest", s(&manifest), "--k", "0", "--out", s(&art)]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&art).unwrap()).unwrap();
    let matrix: Vec<f64> = serde_json::from_value(json["adapter"]["matrix"].clone()).unwrap();
    assert_eq!(matrix.len(), 256);
    for (i, v) in matrix.iter().enumerate() {
        assert_eq!(*v, if i % 17 == 0 { 1.0 } else { 0.0 });
    }
    assert_eq!(json["head"]["tau"], 10.0);
    assert_eq!(json["losses"].as_array().unwrap().len(), 0);
}

#[test]
fn base_train_is_deterministic_and_loss_trends_down() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = synth(dir.path(), 2);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let args = |out: &Path| {
        run(&[
            "base-train", "--manifest", s(&manifest), "--k", "all", "--lr", "0.05", "--steps", "60",
            "--batch-size", "16", "--seed", "9", "--out", s(out),
        ])
    };
    let (ra, rb) = (args(&a), args(&b));
    assert_eq!(code(&ra), 0, "{}", String::from_utf8_lossy(&ra.stderr));
    assert_eq!(code(&rb), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    let losses: Vec<f64> = serde_json::from_value(json["losses"].clone()).unwrap();
    assert_eq!(losses.len(), 60);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn base_train_divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = synth(dir.path(), 2);
    let out = run(&[
        "base-train", "--manifest", s(&manifest), "--k", "3", "--lr", "1e200", "--steps", "5",
        "--out", s(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

fn eval_args<'a>(manifest: &'a Path, head: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "eval", "--manifest", s(manifest), "--head", s(head), "--tasks", "40", "--queries", "5",
        "--seed", "3",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn eval_prints_a_grid_in_table_format() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 5);
    let rows = dir.path().join("rows.jsonl");
    let out = run(&eval_args(&manifest, &head, &[
        "--kprime", "1,3", "--attention", "on,off", "--adapt", "off,on", "--lr", "1e-3",
        "--steps", "5", "--out", s(&rows),
    ]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[5], "±", "{line}");
        for number in [fields[4], fields[6]] {
            assert_eq!(number.split_once('.').unwrap().1.len(), 2, "{line}");
        }
    }
    let jsonl = fs::read_to_string(&rows).unwrap();
    assert_eq!(jsonl.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    for key in ["k", "kprime", "attention", "adaptation", "mean", "ci", "n_tasks", "seed"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn eval_output_is_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 6);
    let base = eval_args(&manifest, &head, &["--attention", "on,off", "--adapt", "on", "--lr", "1e-3", "--steps", "4"]);
    let one = run(&[base.clone(), vec!["--threads", "1"]].concat());
    let again = run(&[base.clone(), vec!["--threads", "1"]].concat());
    let four = run(&[base, vec!["--threads", "4"]].concat());
    assert_eq!(code(&one), 0);
    assert_eq!(one.stdout, again.stdout);
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn eval_with_artifacts_matches_inline_training() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 7);
    let art = dir.path().join("art.json");
    let trained = run(&[
        "base-train", "--manifest", s(&manifest), "--k", "4", "--lr", "0.02", "--steps", "15",
        "--batch-size", "8", "--seed", "3", "--out", s(&art),
    ]);
    assert_eq!(code(&trained), 0);
    let from_file = run(&eval_args(&manifest, &head, &["--artifacts", s(&art)]));
    let inline = run(&eval_args(&manifest, &head, &[
        "--k", "4", "--base-lr", "0.02", "--base-steps", "15", "--batch-size", "8",
    ]));
    assert_eq!(code(&from_file), 0, "{}", String::from_utf8_lossy(&from_file.stderr));
    assert_eq!(from_file.stdout, inline.stdout);
}

#[test]
fn eval_task_failure_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let (manifest, head) = synth(dir.path(), 8);
    let out = run(&eval_args(&manifest, &head, &["--kprime", "8"]));
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("task 0") && err.contains("insufficient data"), "{err}");
    let out = run(&eval_args(&manifest, &head, &["--ways", "7"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_validates_before_reading_or_writing() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.toml");
    let rows = dir.path().join("rows.jsonl");
    let head = dir.path().join("missing.fhd");
    for extra in [
        vec!["--tasks", "1"],
        vec!["--steps", "61"],
        vec!["--kprime", "0"],
        vec!["--lr", "-1"],
        vec!["--tau", "0"],
        vec!["--ways", "1"],
        vec!["--k", "2", "--artifacts", "a.json"],
    ] {
        let out = run(&[eval_args(&missing, &head, &["--out", s(&rows)]), extra.clone()].concat());
        assert_eq!(code(&out), 1, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!rows.exists());
    }
    let out = run(&["eval", "--manifest", s(&missing)]);
    assert_eq!(code(&out), 1, "attention on without a head");
    let out = run(&["eval", "--manifest", s(&missing), "--attention", "off"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_reports_and_detects_perturbation() {
    let ok = run(&["gradcheck", "--instances", "12"]);
    assert_eq!(code(&ok), 0);
    let text = stdout(&ok);
    assert!(text.contains("max relative error"));
    assert!(text.trim_end().ends_with("PASS"));
    let bad = run(&["gradcheck", "--instances", "3", "--perturb", "1e-2"]);
    assert_eq!(code(&bad), 3);
    assert!(stdout(&bad).trim_end().ends_with("FAIL"));
    assert_eq!(code(&run(&["gradcheck", "--locations", "3"])), 1);
}
