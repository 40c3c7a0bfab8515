//! End-to-end tests of the binary: every workflow runs through real
//! argument parsing, real files, and real exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drau() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drau"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

/// Generate a small dataset into `dir` and return its path as a string.
fn gen_small(dir: &Path, scenes: usize, seed: u64) -> Output {
    run(drau()
        .arg("gen-data")
        .arg("--out")
        .arg(dir)
        .args(["--scenes", &scenes.to_string(), "--seed", &seed.to_string()]))
}

#[test]
fn every_command_echoes_version_seed_and_config_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen_small(dir.path(), 2, 7);
    assert_ok(&out);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("version: "));
    assert_eq!(lines.next().unwrap(), "seed: 7");
    let config = lines.next().unwrap();
    assert!(config.starts_with("config: gen-data "), "{config}");
    assert!(config.contains("scenes=2"), "{config}");
}

#[test]
fn gen_data_same_seed_writes_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(a.path(), 20, 7));
    assert_ok(&gen_small(b.path(), 20, 7));
    for name in ["train.jsonl", "val.jsonl", "vocab.tsv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    let x = fs::read(a.path().join("train.jsonl")).unwrap();
    assert!(!x.is_empty());
}

#[test]
fn gen_data_zero_scenes_succeeds_with_empty_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen_small(dir.path(), 0, 0);
    assert_ok(&out);
    assert_eq!(fs::read(dir.path().join("train.jsonl")).unwrap(), b"");
    assert!(dir.path().join("vocab.tsv").exists());
}

#[test]
fn unknown_flags_print_usage_and_fail() {
    let out = run(drau().args(["train", "--nope", "1"]));
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn train_writes_checkpoint_and_trace_and_eval_reads_them() {
    let data = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 6, 3));
    let out = run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out_dir.path())
        .args([
            "--variant",
            "simple-conv",
            "--iters",
            "3",
            "--batch",
            "2",
            "--eval-interval",
            "2",
            "--seed",
            "1",
        ]));
    assert_ok(&out);
    let trace = fs::read_to_string(out_dir.path().join("trace.tsv")).unwrap();
    assert!(trace.starts_with("# step\tloss\tval_accuracy"));
    assert_eq!(trace.lines().count(), 4, "{trace}");

    let eval = run(drau()
        .arg("eval")
        .arg("--checkpoint")
        .arg(out_dir.path().join("model.ckpt"))
        .arg("--data")
        .arg(data.path().join("val.jsonl"))
        .arg("--vocab")
        .arg(data.path().join("vocab.tsv")));
    assert_ok(&eval);
    assert!(stdout(&eval).contains("overall"), "{}", stdout(&eval));
}

#[test]
fn train_zero_iters_writes_an_init_only_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 4, 2));
    let out = run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out_dir.path())
        .args(["--variant", "simple-rvau", "--iters", "0", "--batch", "2"]));
    assert_ok(&out);
    assert!(out_dir.path().join("model.ckpt").exists());
    let trace = fs::read_to_string(out_dir.path().join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 1, "only the header expected: {trace}");
}

#[test]
fn same_seed_gives_identical_trace_files() {
    let data = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 6, 3));
    let mut traces = Vec::new();
    for _ in 0..2 {
        let out_dir = tempfile::tempdir().unwrap();
        let out = run(drau()
            .arg("train")
            .arg("--data")
            .arg(data.path())
            .arg("--out")
            .arg(out_dir.path())
            .args(["--variant", "drau", "--iters", "3", "--batch", "2", "--seed", "5"]));
        assert_ok(&out);
        traces.push(fs::read(out_dir.path().join("trace.tsv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn config_file_fills_gaps_and_flags_override_it() {
    let data = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 4, 2));
    let cfg = data.path().join("run.cfg");
    fs::write(&cfg, "iters = 2\nbatch = 2\nvariant = simple-conv\n").unwrap();

    let out_dir = tempfile::tempdir().unwrap();
    let out = run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out_dir.path())
        .arg("--config")
        .arg(&cfg));
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains(" iters=2 "), "{text}");
    assert!(text.contains("variant=simple-conv"), "{text}");

    let out_dir2 = tempfile::tempdir().unwrap();
    let out = run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out_dir2.path())
        .arg("--config")
        .arg(&cfg)
        .args(["--iters", "1"]));
    assert_ok(&out);
    assert!(stdout(&out).contains(" iters=1 "), "{}", stdout(&out));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let data = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 4, 2));
    let cfg = data.path().join("run.cfg");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(out_dir.path())
        .arg("--config")
        .arg(&cfg)
        .args(["--iters", "0", "--batch", "2"]));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("unknown key bogus"), "{}", stderr(&out));
}

#[test]
fn environment_seed_applies_when_no_flag_or_file_sets_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(drau()
        .arg("gen-data")
        .arg("--out")
        .arg(dir.path())
        .args(["--scenes", "1"])
        .env("DRAU_SEED", "99"));
    assert_ok(&out);
    assert!(stdout(&out).contains("seed: 99"), "{}", stdout(&out));

    // A flag still wins over the environment.
    let out = run(drau()
        .arg("gen-data")
        .arg("--out")
        .arg(dir.path())
        .args(["--scenes", "1", "--seed", "4"])
        .env("DRAU_SEED", "99"));
    assert_ok(&out);
    assert!(stdout(&out).contains("seed: 4"), "{}", stdout(&out));
}

#[test]
fn ablate_with_one_seed_reports_zero_spread() {
    let data = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 6, 3));
    let out = run(drau()
        .arg("ablate")
        .arg("--data")
        .arg(data.path())
        .args([
            "--variants",
            "simple-conv,simple-rvau",
            "--seeds",
            "1",
            "--iters",
            "2",
            "--batch",
            "2",
            "--eval-interval",
            "2",
        ]));
    assert_ok(&out);
    let text = stdout(&out);
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("simple-conv\t") || l.starts_with("simple-rvau\t"))
        .collect();
    assert_eq!(rows.len(), 2, "{text}");
    for row in rows {
        assert!(row.contains("\u{b1}0.0000"), "expected zero std in {row}");
    }
}

#[test]
fn attn_exports_maps_for_one_sample() {
    let data = tempfile::tempdir().unwrap();
    let run_dir = tempfile::tempdir().unwrap();
    let maps = tempfile::tempdir().unwrap();
    assert_ok(&gen_small(data.path(), 4, 6));
    assert_ok(&run(drau()
        .arg("train")
        .arg("--data")
        .arg(data.path())
        .arg("--out")
        .arg(run_dir.path())
        .args(["--variant", "drau", "--iters", "1", "--batch", "2"])));
    let out = run(drau()
        .arg("attn")
        .arg("--checkpoint")
        .arg(run_dir.path().join("model.ckpt"))
        .arg("--data")
        .arg(data.path().join("val.jsonl"))
        .arg("--vocab")
        .arg(data.path().join("vocab.tsv"))
        .args(["--sample", "0"])
        .arg("--out")
        .arg(maps.path()));
    assert_ok(&out);
    assert!(maps.path().join("vis_glimpse_0.pgm").exists());
    assert!(maps.path().join("vis_glimpse_1.pgm").exists());
    assert!(maps.path().join("txt_glimpse_0.txt").exists());
    assert!(maps.path().join("answer.txt").exists());
    assert!(stdout(&out).contains("predicted: "), "{}", stdout(&out));
}

#[test]
fn eval_with_missing_checkpoint_fails_with_a_named_path() {
    let out = run(drau()
        .arg("eval")
        .arg("--checkpoint")
        .arg("/nonexistent/model.ckpt")
        .arg("--data")
        .arg("/nonexistent/val.jsonl")
        .arg("--vocab")
        .arg("/nonexistent/vocab.tsv"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("model.ckpt"), "{}", stderr(&out));
}

#[test]
fn gradcheck_on_fresh_init_exits_zero() {
    let out = run(drau().arg("gradcheck"));
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("all ") && text.contains("cases passed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}
