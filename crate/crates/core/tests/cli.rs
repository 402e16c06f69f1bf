use std::path::Path;
use std::process::Command;

fn detachlab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_detachlab"));
    c.env_remove("DETACHLAB_OUT");
    c
}

fn code(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn train_writes_stream_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let status = code(detachlab().args(["train", "--seed", "2", "--steps", "6", "--out", out]));
    assert_eq!(status, 0);
    let run = dir.path().join("train/train.S2.D0.seed2.jsonl");
    let text = std::fs::read_to_string(&run).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(dir.path().join("train/run_info.json").exists());

    let svg = dir.path().join("loss.svg");
    let status = code(
        detachlab()
            .args(["plot", run.to_str().unwrap(), "--fields", "loss", "--out"])
            .arg(&svg),
    );
    assert_eq!(status, 0);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn overrides_and_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let status = code(detachlab().env("DETACHLAB_OUT", dir.path()).args([
        "train",
        "--seed",
        "0",
        "--steps",
        "3",
        "--set",
        "fusion.stride=4",
        "--set",
        "suite=\"ovr\"",
    ]));
    assert_eq!(status, 0);
    assert!(Path::new(&dir.path().join("ovr/ovr.S4.D0.seed0.jsonl")).exists());
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        code(detachlab().args([
            "train",
            "--steps",
            "2",
            "--out",
            out,
            "--set",
            "fusion.stride=0"
        ])),
        2
    );
    assert_eq!(
        code(detachlab().args(["train", "--out", out, "--set", "nokeyvalue"])),
        2
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        code(
            detachlab()
                .args(["train", "--out", out, "--config"])
                .arg(&bad)
        ),
        2
    );
    assert_eq!(
        code(detachlab().args(["lrsweep", "--out", out, "--lrs", "0.001"])),
        2
    );
}

#[test]
fn missing_input_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let status = code(
        detachlab()
            .args(["plot", "/nonexistent/x.jsonl", "--out"])
            .arg(dir.path().join("x.svg")),
    );
    assert_eq!(status, 4);
}
