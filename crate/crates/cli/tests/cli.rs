//! End-to-end tests of the binary: command dispatch, exit codes, file
//! outputs, and the config echo contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn oracle_happy_path_writes_dump_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["oracle", "--out", "o", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let dump = std::fs::read_to_string(dir.path().join("o/oracle_dump.txt")).unwrap();
    assert!(dump.starts_with("# oracle dump v1\n"));
    assert!(dump.contains("j_star "));
    let echo = std::fs::read_to_string(dir.path().join("o/config.echo.toml")).unwrap();
    assert!(echo.contains("lambda = 1.0"), "default echoed: {echo}");
    assert!(echo.contains("seed = 7"), "override echoed");
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_command_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["launch-rockets"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_one_naming_fields() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "[train]\nbatch_size = 0\nsteps = 0\n",
    )
    .unwrap();
    let out = run(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("train.batch_size"), "{err}");
    assert!(err.contains("train.steps"), "{err}");
}

#[test]
fn empty_config_file_means_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.toml"), "").unwrap();
    std::fs::write(
        dir.path().join("small.toml"),
        "[train]\nsteps = 50\neval_every = 10\n",
    )
    .unwrap();
    let out = run(
        &["train", "--config", "small.toml", "--out", "t", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let records = std::fs::read_to_string(dir.path().join("t/run.records")).unwrap();
    assert!(records.starts_with("# run records v1\n"));
    assert!(records.contains("checkpoint=policy.ckpt"));
    assert!(dir.path().join("t/policy.ckpt").exists());
    let echo = std::fs::read_to_string(dir.path().join("t/config.echo.toml")).unwrap();
    assert!(echo.contains("loss = \"var-exact\""));
    assert!(echo.contains("batch_mode = \"full-enum\""), "auto resolved: {echo}");
}

#[test]
fn dpo_without_dataset_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dpo.toml"), "[train]\nloss = \"dpo\"\n").unwrap();
    let out = run(&["train", "--config", "dpo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("data.dataset"));
}

#[test]
fn dpo_with_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("prefs.csv"),
        "# prompt,chosen,rejected\n0,1,2\n1,3,0\n2,5,4\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("dpo.toml"),
        "[train]\nloss = \"dpo\"\nsteps = 100\neval_every = 20\n[data]\ndataset = \"prefs.csv\"\n",
    )
    .unwrap();
    let out = run(
        &["train", "--config", "dpo.toml", "--out", "d", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.path().join("d/run.records").exists());
}

#[test]
fn dataset_parse_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("prefs.csv"), "0,1,2\n0,3,3\n").unwrap();
    std::fs::write(
        dir.path().join("dpo.toml"),
        "[train]\nloss = \"dpo\"\n[data]\ndataset = \"prefs.csv\"\n",
    )
    .unwrap();
    let out = run(&["train", "--config", "dpo.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn wsft_custom_divergence_demo_runs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("batch.csv"), "0,1\n0,2\n0,3\n0,0\n").unwrap();
    std::fs::write(
        dir.path().join("neg.toml"),
        "[instance]\nn_prompts = 1\nn_responses = 4\nref_kind = \"uniform\"\n\
         [reward]\nkind = \"constant\"\n\
         [train]\nloss = \"wsft-custom\"\nlr = 1.0\nsteps = 3000\neval_every = 500\ndivergence_demo = true\n\
         [data]\nbatch = \"batch.csv\"\nweights = [1.0, 1.0, 1.0, -1.0]\n",
    )
    .unwrap();
    let out = run(
        &["train", "--config", "neg.toml", "--out", "w", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let records = std::fs::read_to_string(dir.path().join("w/run.records")).unwrap();
    let last_loss: f64 = records
        .lines()
        .rfind(|l| !l.starts_with('#') && !l.starts_with("step,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(last_loss < -100.0, "loss ran away downward: {last_loss}");
}

#[test]
fn gradcheck_passes_at_default_tolerance_and_fails_at_absurd_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("gc.toml"),
        "[gradcheck]\ncoords = 16\nseeds = 2\n",
    )
    .unwrap();
    let out = run(
        &["gradcheck", "--config", "gc.toml", "--out", "g", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let csv = std::fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6, "header plus five loss kinds");

    std::fs::write(
        dir.path().join("tight.toml"),
        "[gradcheck]\ncoords = 16\nseeds = 1\ntolerance = 1e-30\n",
    )
    .unwrap();
    let out = run(
        &["gradcheck", "--config", "tight.toml", "--out", "g2", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn demo_clip_exits_zero_and_writes_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["demo-clip", "--out", "c", "--quiet"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let csv =
        std::fs::read_to_string(dir.path().join("c/clip-distinction/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains("rlol,"));
    assert!(csv.contains("var,"));
}

#[test]
fn sweeps_write_summaries_records_and_optional_plots() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("sweep.toml"),
        "[experiment]\nseeds = 2\nbatch_sizes = [2]\nsteps = 50\nplots = true\n",
    )
    .unwrap();
    let out = run(
        &["ablate-b", "--config", "sweep.toml", "--out", "a", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let base = dir.path().join("a/consistency");
    assert!(base.join("summary.csv").exists());
    assert!(base.join("summary.txt").exists());
    assert!(base.join("final_kl_opt_policy.svg").exists());
    assert!(base.join("var-exact/0.records").exists());
    assert!(base.join("var-inbatch-b2/1.records").exists());

    std::fs::write(
        dir.path().join("est.toml"),
        "[instance]\nn_responses = 16\n[experiment]\nestimator_seeds = 10\nbatch_sizes = [2, 16]\n",
    )
    .unwrap();
    let out = run(
        &["estimator-study", "--config", "est.toml", "--out", "e", "--quiet"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.path().join("e/estimator-study/summary.csv").exists());
    // No plots requested: only tables.
    assert!(!dir.path().join("e/estimator-study/ratio_mean.svg").exists());
}

#[test]
fn estimator_summaries_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("est.toml"),
        "[experiment]\nestimator_seeds = 8\nbatch_sizes = [2, 4]\n[run]\nseed = 5\n",
    )
    .unwrap();
    for out_name in ["r1", "r2"] {
        let out = run(
            &["estimator-study", "--config", "est.toml", "--out", out_name, "--quiet"],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    }
    for rel in ["estimator-study/summary.csv", "estimator-study/summary.txt"] {
        let a = std::fs::read(dir.path().join("r1").join(rel)).unwrap();
        let b = std::fs::read(dir.path().join("r2").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between reruns");
    }
}

#[test]
fn quiet_suppresses_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let loud = run(&["oracle", "--out", "l"], dir.path());
    assert!(!loud.stdout.is_empty());
    let quiet = run(&["oracle", "--out", "q", "--quiet"], dir.path());
    assert!(quiet.stdout.is_empty());
}
