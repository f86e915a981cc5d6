use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cascade_core::store;
use cascade_core::synth::mine_genuine_pairs;

fn cascade(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cascade(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

/// Training data, a projection and an evaluation gallery with distractors.
fn pipeline(dir: &Path) {
    ok(dir, &["gen", "--ids", "40", "--samples", "5", "--dim", "48", "--name", "train", "--out-dir", "out"]);
    ok(dir, &["train-lda", "--data", "out/train.cdst", "--d-out", "32", "--out-dir", "out"]);
    ok(dir, &[
        "gen", "--ids", "30", "--samples", "3", "--dim", "48", "--seed", "2", "--name", "eval",
        "--projection", "out/projection.lda", "--distractors", "100", "--out-dir", "out",
    ]);
    ok(dir, &[
        "gen", "--ids", "40", "--samples", "4", "--dim", "48", "--seed", "3", "--name", "held", "--out-dir", "out",
    ]);
    ok(dir, &[
        "learn", "--data", "out/held.cdst", "--projection", "out/projection.lda", "--sn", "4", "--out-dir", "out",
    ]);
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let gallery = store::read_templates(dir.join("out/eval.gallery.ctpl")).unwrap();
    let probes = store::read_templates(dir.join("out/eval.probes.ctpl")).unwrap();
    assert_eq!(gallery.len(), 130);
    assert_eq!(probes.len(), 60);
    assert!(dir.join("out/eval.gallery.ctpl.meta").exists());

    let ranked = ok(dir, &[
        "identify", "--model", "out/model.txt", "--gallery", "out/eval.gallery.ctpl",
        "--probes", "out/eval.probes.ctpl", "--top-k", "3", "--format", "table",
    ]);
    let mut lines = ranked.lines();
    assert_eq!(
        lines.next().unwrap(),
        "probe\tprobe_id\trank\tgallery_index\tgallery_id\tscore\tstages_passed"
    );
    assert_eq!(lines.count(), 60 * 3);

    let report = ok(dir, &[
        "bench", "--model", "out/model.txt", "--gallery", "out/eval.gallery.ctpl",
        "--probes", "out/eval.probes.ctpl", "--repeats", "1", "--truncation", "true", "--out-dir", "out",
    ]);
    assert_eq!(field(&report, "gallery_size"), "130");
    assert_eq!(field(&report, "work_reconciles"), "true");
    assert!(dir.join("out/bench.tsv").exists());
    assert!(dir.join("out/truncation.tsv").exists());

    let cut = ok(dir, &[
        "truncate", "--model", "out/model.txt", "--keep-stages", "2",
        "--templates", "out/eval.gallery.ctpl", "out/eval.probes.ctpl", "--out-dir", "out",
    ]);
    assert_eq!(field(&cut, "dim"), "8");
    let (model, _) = store::read_model(dir.join("out/model.k2.txt")).unwrap();
    assert_eq!(model.plan().boundaries(), &[4, 8]);
    let short = store::read_templates(dir.join("out/eval.probes.k2.ctpl")).unwrap();
    assert_eq!(short.len(), 60);
    assert!(short.iter().all(|t| t.dim() == 8));
}

#[test]
fn outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "train.cdst", "train.cdst.meta", "projection.lda", "eval.gallery.ctpl", "eval.probes.ctpl",
        "model.txt", "learn.config.toml",
    ] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn probe_finds_itself_with_thresholds_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    std::fs::write(
        dir.join("open.txt"),
        "format = cascade-model\nversion = 1\nd = 32\nsn = 1\nboundaries = 32\nthresholds = -2\ntarget_vrs = 1\ntrain_count = 0\n",
    )
    .unwrap();
    let probes = store::read_templates(dir.join("out/eval.probes.ctpl")).unwrap();
    let out = ok(dir, &[
        "identify", "--model", "open.txt", "--gallery", "out/eval.probes.ctpl",
        "--probes", "out/eval.probes.ctpl", "--top-k", "1", "--format", "table",
    ]);
    for (line, (i, probe)) in out.lines().skip(1).zip(probes.iter().enumerate()) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1], probe.id());
        assert_eq!(cols[4], probe.id());
        // Two probes share each id; the earlier one wins ties, so the index
        // is the probe itself unless an identical template precedes it.
        assert!(cols[3].parse::<usize>().unwrap() <= i);
    }
}

#[test]
fn full_rate_model_keeps_every_training_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    ok(dir, &[
        "learn", "--data", "out/held.cdst", "--projection", "out/projection.lda", "--sn", "4",
        "--vr-base", "1.0", "--out-dir", "full",
    ]);
    let (model, meta) = store::read_model(dir.join("full/model.txt")).unwrap();
    assert_eq!(meta["config.vr_base"], "1.0");
    assert!(meta.contains_key("input.data.sha256"));
    let data = store::read_dataset(dir.join("out/held.cdst")).unwrap();
    let (projection, _) = store::read_projection(dir.join("out/projection.lda")).unwrap();
    let pairs = mine_genuine_pairs(&data, &projection, usize::MAX).unwrap();
    assert_eq!(pairs.len(), model.train_count());
    for p in &pairs {
        assert!(!model.evaluate_pair(p).unwrap().rejected());
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("c.toml"), "seed = 4\nids = 7\n[gen]\nsamples = 3\ndim = 12\n").unwrap();
    let out = ok(dir, &["--config", "c.toml", "gen", "--ids", "9"]);
    assert_eq!(field(&out, "identities"), "9");
    assert_eq!(field(&out, "samples"), "27");
    assert_eq!(field(&out, "dim"), "12");
    assert_eq!(field(&out, "seed"), "4");
    let echoed = std::fs::read_to_string(dir.join("gen.config.toml")).unwrap();
    assert!(echoed.contains("ids = 9"));
    assert!(echoed.contains("samples = 3"));
    assert!(echoed.contains("sigma = 0.1"));
}

fn error_of(out: &Output) -> (i32, String) {
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn failures_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let args = |gallery: &str| -> Vec<String> {
        ["identify", "--model", "out/model.txt", "--gallery", gallery, "--probes", "out/eval.probes.ctpl"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let run = |gallery: &str| {
        let a = args(gallery);
        cascade(dir, &a.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let bytes = std::fs::read(dir.join("out/eval.gallery.ctpl")).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    std::fs::write(dir.join("magic.ctpl"), &bad).unwrap();
    let (code, err) = error_of(&run("magic.ctpl"));
    assert_eq!(code, 3);
    assert!(err.starts_with("error[format]"), "{err}");

    std::fs::write(dir.join("short.ctpl"), &bytes[..bytes.len() - 10]).unwrap();
    let (code, err) = error_of(&run("short.ctpl"));
    assert_eq!(code, 4);
    assert!(err.starts_with("error[size]"), "{err}");

    let (code, err) = error_of(&run("missing.ctpl"));
    assert_eq!(code, 9);
    assert!(err.starts_with("error[io]"), "{err}");

    ok(dir, &["gen", "--ids", "3", "--samples", "2", "--dim", "5", "--name", "tiny", "--out-dir", "t"]);
    let projection = dir.join("out/projection.lda");
    let (code, err) = error_of(&cascade(dir, &[
        "gen", "--ids", "3", "--samples", "2", "--dim", "5", "--projection",
        projection.to_str().unwrap(), "--out-dir", "t",
    ]));
    assert_eq!(code, 6);
    assert!(err.starts_with("error[dimension]"), "{err}");

    let (code, _) = error_of(&cascade(dir, &["gen", "--no-such-flag"]));
    assert_eq!(code, 2);
    let (code, err) = error_of(&cascade(dir, &["learn", "--sn", "3"]));
    assert_eq!(code, 2);
    assert!(err.contains("--data"), "{err}");
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/bench_small.txt")
}

/// Report lines that do not depend on timing or on where outputs go.
fn stable_fields(report: &str) -> String {
    report
        .lines()
        .filter(|l| {
            !(l.starts_with("total_time")
                || l.starts_with("time_per_query")
                || l.starts_with("speedup")
                || l.starts_with("config_digest"))
        })
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn small_fixture_matches_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["bench", "--fixture", "small", "--repeats", "1", "--seed", "1", "--out-dir", "o"]);
    let got = stable_fields(&out);
    if std::env::var_os("CASCADE_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &got).unwrap();
    }
    let want = std::fs::read_to_string(golden_path()).expect("golden report present");
    assert_eq!(got, want);
}
