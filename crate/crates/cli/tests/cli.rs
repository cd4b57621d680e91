use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn avem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avem")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = avem(args, cwd);
    assert!(out.status.success(), "avem {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every stage in `dir` with small settings.
fn pipeline(dir: &Path) {
    fs::write(dir.join("train.toml"), "max_steps = 6\ncheckpoint_every = 3\nbatch_size = 4\n").unwrap();
    ok(&["bench-build", "--synthetic", "24", "--seed", "5", "--out", "bench", "--record-fixtures", "fx"], dir);
    ok(&["pref-build", "--captions", "bench/captions.jsonl", "--store", "bench/store.jsonl", "--out", "pref", "--seed", "5"], dir);
    ok(
        &["train", "--config", "train.toml", "--records", "pref/records.jsonl", "--store", "pref/store.jsonl", "--out", "run", "--eval-every", "3"],
        dir,
    );
    ok(&["eval", "--items", "bench/items.jsonl", "--store", "bench/store.jsonl", "--checkpoint", "run/final.json", "--out", "eval"], dir);
    ok(&["analyze", "--checkpoint", "run/final.json", "--items", "bench/items.jsonl", "--store", "bench/store.jsonl", "--out", "analysis"], dir);
    let stats = ok(&["stats", "--items", "bench/items.jsonl", "--manifest", "bench/manifest.jsonl", "--json", "stats/stats.json"], dir);
    fs::write(dir.join("stats/table.txt"), stats.stdout).unwrap();
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for f in ["bench/items.jsonl", "pref/records.jsonl", "run/final.json", "run/checkpoint-000003.json", "eval/report.json", "analysis/attention.svg", "analysis/shift.json"] {
        assert!(sa.contains_key(Path::new(f)), "{f} missing");
    }
}

#[test]
fn replaying_fixtures_reproduces_the_build() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["bench-build", "--synthetic", "16", "--seed", "2", "--out", "live", "--record-fixtures", "fx"], d);
    ok(&["bench-build", "--synthetic", "16", "--seed", "2", "--out", "replay", "--fixtures", "fx"], d);
    assert_eq!(fs::read(d.join("live/stats.json")).unwrap(), fs::read(d.join("replay/stats.json")).unwrap());
    // Provenance names the client that answered; everything else must match.
    let read = |p: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                for step in v["provenance"].as_array_mut().unwrap() {
                    step.as_object_mut().unwrap().remove("annotator");
                }
                v
            })
            .collect()
    };
    for f in ["live/items.jsonl", "live/captions.jsonl"] {
        assert_eq!(read(f), read(&f.replace("live", "replay")), "{f}");
    }
}

#[test]
fn resume_continues_the_history_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["bench-build", "--synthetic", "24", "--out", "bench"], d);
    ok(&["pref-build", "--captions", "bench/captions.jsonl", "--store", "bench/store.jsonl", "--out", "pref"], d);
    fs::write(d.join("full.toml"), "max_steps = 8\ncheckpoint_every = 4\nbatch_size = 4\ngrad_accum_steps = 2\n").unwrap();
    fs::write(d.join("half.toml"), "max_steps = 4\ncheckpoint_every = 4\nbatch_size = 4\ngrad_accum_steps = 2\n").unwrap();
    let train = |cfg: &str, out: &str, resume: Option<&str>| {
        let mut args = vec!["train", "--config", cfg, "--records", "pref/records.jsonl", "--store", "pref/store.jsonl", "--out", out, "--eval-every", "2"];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        ok(&args, d);
    };
    train("full.toml", "full", None);
    train("half.toml", "half", None);
    train("full.toml", "resumed", Some("half/checkpoint-000004.json"));
    for f in ["history.jsonl", "evals.jsonl", "checkpoint-000008.json"] {
        assert_eq!(fs::read(d.join("full").join(f)).unwrap(), fs::read(d.join("resumed").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stats_prints_the_hand_tallied_table() {
    let dir = tempfile::tempdir().unwrap();
    let items = data("items10.jsonl");
    let out = ok(&["stats", "--items", items.to_str().unwrap()], dir.path());
    let expected = "\
Task                               # QA  # vid.  Rand. Acc.
Reasoning Basic / Audio               3       3         25%
Reasoning Basic / Visual              2       2         25%
Modality Agreement                    1       1         50%
Reasoning Stress Test / Audio         2       1         50%
Reasoning Stress Test / Visual        2       2         50%
Total                                10       4
";
    assert_eq!(String::from_utf8(out.stdout).unwrap(), expected);
}

#[test]
fn help_documents_every_eval_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["eval", "--help"], dir.path());
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in ["--seed", "--config", "--dry-run", "--fixtures", "--items", "--predictions", "--checkpoint", "--store", "--model", "--out"] {
        assert!(help.contains(flag), "{flag} not documented");
    }
    for sub in ["bench-build", "pref-build", "train", "analyze", "stats"] {
        ok(&[sub, "--help"], dir.path());
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["bench-build", "--synthetic", "12", "--out", "bench"], d);
    ok(&["pref-build", "--captions", "bench/captions.jsonl", "--store", "bench/store.jsonl", "--out", "pref"], d);
    let before = snapshot(d);
    ok(&["train", "--dry-run", "--records", "pref/records.jsonl", "--store", "pref/store.jsonl", "--out", "run"], d);
    ok(&["bench-build", "--dry-run", "--synthetic", "12", "--out", "bench2"], d);
    ok(&["pref-build", "--dry-run", "--captions", "bench/captions.jsonl", "--store", "bench/store.jsonl", "--out", "pref2"], d);
    ok(&["stats", "--dry-run", "--items", "bench/items.jsonl", "--json", "s.json"], d);
    assert_eq!(snapshot(d), before);
}

#[test]
fn inputs_are_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["bench-build", "--synthetic", "12", "--out", "bench"], d);
    let before = snapshot(&d.join("bench"));
    ok(&["pref-build", "--captions", "bench/captions.jsonl", "--store", "bench/store.jsonl", "--out", "pref"], d);
    ok(&["stats", "--items", "bench/items.jsonl"], d);
    assert_eq!(snapshot(&d.join("bench")), before);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| avem(args, d).status.code();
    assert_eq!(code(&["stats", "--items", "missing.jsonl"]), Some(1));
    assert_eq!(code(&["stats", "--items", "x.jsonl", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));

    fs::write(d.join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    let out = avem(&["stats", "--items", "bad.jsonl"], d);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.jsonl:1"), "diagnostic lacks path and line: {err}");

    fs::write(d.join("c.toml"), "max_steps = 3\nlearning_rat = 0.1\n").unwrap();
    fs::write(d.join("r.jsonl"), "").unwrap();
    let out = avem(&["train", "--config", "c.toml", "--records", "r.jsonl", "--store", "r.jsonl", "--out", "o"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.toml:2"));

    fs::write(d.join("neg.toml"), "learning_rate = -1.0\n").unwrap();
    assert_eq!(code(&["train", "--config", "neg.toml", "--records", "r.jsonl", "--store", "r.jsonl", "--out", "o"]), Some(1));
    assert!(!d.join("o").exists());
}
