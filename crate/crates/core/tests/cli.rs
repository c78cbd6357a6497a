//! Black-box checks of the `stt` binary: exit codes, usage reporting, seed
//! precedence, and one pass through every subcommand on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run_with(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stt"));
    cmd.args(args).current_dir(dir);
    match seed_env {
        Some(seed) => cmd.env("STT_SEED", seed),
        None => cmd.env_remove("STT_SEED"),
    };
    cmd.output().expect("binary launches")
}

fn stt(dir: &Path, args: &[&str]) -> Output {
    run_with(dir, args, None)
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stt(dir, args);
    assert_eq!(
        code(&out),
        0,
        "`stt {}` failed:\n{}\n{}",
        args.join(" "),
        stdout(&out),
        stderr(&out)
    );
    stdout(&out)
}

const TINY_SYNTH: &str = "\
synth.categories = 2
synth.instances_per_category = 1
synth.frames_per_instance = 2
synth.grid = 4
synth.tactile_grid = 2
synth.visual_grid = 3
synth.channels = 3
synth.scenes = 2
synth.interactive_scenes = 1
synth.out_domain_per_category = 1
";

#[test]
fn bad_invocations_exit_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &[][..],
        &["frobnicate"][..],
        &["synth", "--bogus", "1"][..],
        &["synth", "--seed"][..],
        &["localize"][..],
    ] {
        let out = stt(dir.path(), args);
        assert_eq!(code(&out), 1, "`stt {}` should be rejected", args.join(" "));
        assert!(
            stderr(&out).contains("usage:"),
            "`stt {}` printed no usage:\n{}",
            args.join(" "),
            stderr(&out)
        );
    }

    // Malformed values are plain validation failures, no usage dump.
    let out = stt(dir.path(), &["synth", "--seed", "not-a-number"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("unsigned integer"), "{}", stderr(&out));
}

#[test]
fn validation_errors_exit_1_runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    // Nothing trained yet: a clean precondition failure.
    let out = stt(dir.path(), &["eval"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("train first"), "{}", stderr(&out));

    // Missing files surface as I/O failures.
    let out = stt(dir.path(), &["train", "--config", "missing.cfg"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // An unreachable tolerance makes the gradient check itself fail.
    let out = stt(dir.path(), &["gradcheck", "--tol", "1e-30"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stdout(&out).contains("fd check"), "{}", stdout(&out));
}

#[test]
fn seed_flag_beats_env_beats_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), format!("seed = 3\n{TINY_SYNTH}")).unwrap();

    let synth = |data: &str, seed_flag: Option<&str>, env: Option<&str>| {
        let mut args = vec!["synth", "--config", "tiny.cfg", "--data.dir", data];
        if let Some(s) = seed_flag {
            args.extend(["--seed", s]);
        }
        let out = run_with(dir.path(), &args, env);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(dir.path().join(data).join("features/t-0-0-0.vtft")).unwrap()
    };

    let flag9 = synth("d-flag9", Some("9"), None);
    let env5 = synth("d-env5", None, Some("5"));
    let flag5 = synth("d-flag5", Some("5"), None);
    let flag9_env5 = synth("d-both", Some("9"), Some("5"));
    let file3 = synth("d-file3", None, None);

    assert_eq!(env5, flag5, "STT_SEED should override the config file");
    assert_eq!(flag9_env5, flag9, "--seed should override STT_SEED");
    assert_ne!(file3, flag5, "config-file seed should differ from seed 5");
    assert_ne!(flag9, flag5, "different seeds should differ");
}

#[test]
fn every_subcommand_runs_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "\
seed = 12
data.dir = data
out = run
optim.batch_size = 6
train.steps_per_epoch = 4
schedule.stage1_epochs = 2
schedule.stage2_epochs = 1
schedule.frozen_epochs = 1
encoder.backbone_dim = 6
encoder.shared_dim = 6
synth.categories = 4
synth.instances_per_category = 2
synth.frames_per_instance = 3
synth.grid = 6
synth.tactile_grid = 2
synth.visual_grid = 4
synth.channels = 6
synth.scenes = 2
synth.interactive_scenes = 2
synth.out_domain_per_category = 1
",
    )
    .unwrap();
    fn with_cfg<'a>(args: &[&'a str]) -> Vec<&'a str> {
        [args, &["--config", "run.cfg"]].concat()
    }

    // The `--categories` shorthand maps onto synth.categories.
    ok(dir.path(), &with_cfg(&["synth", "--categories", "4"]));
    assert!(dir.path().join("data/train.manifest").exists());

    let listing = ok(dir.path(), &with_cfg(&["extract-instances", "--manifest", "data/train.manifest"]));
    assert!(listing.contains("instance_id="), "{listing}");

    ok(
        dir.path(),
        &with_cfg(&[
            "split",
            "--manifest",
            "data/train.manifest",
            "--train-out",
            "sp/tr.manifest",
            "--test-out",
            "sp/te.manifest",
        ]),
    );
    assert!(dir.path().join("sp/tr.manifest").exists());
    assert!(dir.path().join("sp/te.manifest").exists());

    fs::write(dir.path().join("copy-a.bin"), b"same bytes").unwrap();
    fs::write(dir.path().join("copy-b.bin"), b"same bytes").unwrap();
    fs::write(dir.path().join("other.bin"), b"different").unwrap();
    fs::write(dir.path().join("files.txt"), "copy-a.bin\ncopy-b.bin\nother.bin\n").unwrap();
    let deduped = ok(dir.path(), &with_cfg(&["dedup", "--list", "files.txt"]));
    assert!(deduped.contains("kept=") && deduped.contains("dropped="), "{deduped}");

    fs::write(
        dir.path().join("embeddings.txt"),
        "id=keepme\tvalues=1.0,0.1,0.0\nid=dropme\tvalues=0.0,1.0,0.2\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("prompts.txt"),
        "role=positive\ttext=rough brick\tvalues=1.0,0.0,0.0\n\
         role=negative\ttext=smooth plaster\tvalues=0.0,1.0,0.0\n",
    )
    .unwrap();
    let filtered = ok(
        dir.path(),
        &with_cfg(&["filter", "--embeddings", "embeddings.txt", "--prompts", "prompts.txt"]),
    );
    assert!(filtered.contains("retained=keepme"), "{filtered}");
    assert!(filtered.contains("rejected=dropme"), "{filtered}");

    let queries = ok(
        dir.path(),
        &with_cfg(&["queries", "--category", "brick", "--objects", "wall", "--places", "kitchen"]),
    );
    assert!(queries.contains("brick wall in a kitchen"), "{queries}");

    let pairs = ok(dir.path(), &with_cfg(&["pairs", "--epoch", "0", "--batch", "0"]));
    assert!(pairs.contains("kind="), "{pairs}");

    let trained = ok(dir.path(), &with_cfg(&["train"]));
    assert!(trained.contains("epoch"), "{trained}");
    assert!(dir.path().join("run/loss.log").exists());
    assert!(dir.path().join("run/ckpt-2.bin").exists());

    let prototypes = ok(dir.path(), &with_cfg(&["prototypes"]));
    assert!(!prototypes.trim().is_empty());

    let eval = ok(dir.path(), &with_cfg(&["eval"]));
    assert!(eval.contains("miou="), "{eval}");
    let report = fs::read_to_string(dir.path().join("run/report-eval.txt")).unwrap();
    assert!(report.contains("kind=overall"), "{report}");

    ok(dir.path(), &with_cfg(&["eval-interactive"]));
    assert!(dir.path().join("run/report-interactive.txt").exists());

    ok(dir.path(), &with_cfg(&["robustness"]));
    let robustness = fs::read_to_string(dir.path().join("run/report-robustness.txt")).unwrap();
    assert!(robustness.contains("position=start"), "{robustness}");

    ok(
        dir.path(),
        &with_cfg(&["localize", "--image", "data/features/scene-0.vtft", "--tactile", "data/features/t-0-0-0.vtft"]),
    );
    for artifact in ["run/heatmap.pgm", "run/heatmap.ppm", "run/heatmap.meta"] {
        assert!(dir.path().join(artifact).exists(), "{artifact} missing");
    }

    let checked = ok(dir.path(), &with_cfg(&["gradcheck", "--pairs", "2"]));
    assert!(checked.contains("pass"), "{checked}");
}
