use std::path::Path;
use std::process::{Command, Output};

fn predlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("PREDLAB_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--patch",
    "8x8",
    "--channels",
    "2",
    "--res-blocks",
    "1",
    "--lr",
    "1e-3",
];

fn tiny_train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    predlab(dir, &args)
}

#[test]
fn params_reports_published_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = predlab(dir.path(), &["params", "--model", "clstm"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1037121");
    let all = stdout(&predlab(dir.path(), &["params"]));
    assert!(
        all.contains("crnn 702849") && all.contains("fcnn 38376193"),
        "{all}"
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = predlab(
        dir.path(),
        &["train", "--model", "fcnn", "--mode", "stateful"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        predlab(dir.path(), &["train", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(
        predlab(dir.path(), &["gen", "--dims", "64"]).status.code(),
        Some(2)
    );
    let o = predlab(
        dir.path(),
        &["train", "--mode", "stateless", "--seq-len", "1"],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stateful_frame_budget_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let o = tiny_train(
            dir.path(),
            &[
                "--mode",
                "stateful",
                "--frames",
                "768",
                "--seed",
                "7",
                "--log-every",
                "96",
                "--out",
                out,
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = stdout(&o);
        text.lines()
            .find(|l| l.starts_with("done:"))
            .unwrap()
            .split(" checkpoint=")
            .next()
            .unwrap()
            .to_string()
    };
    let a = run("a");
    let b = run("b");
    assert!(a.starts_with("done: updates=192 frames=768"), "{a}");
    assert_eq!(a, b);
    let ckpt = |d: &str| std::fs::read(dir.path().join(d).join("final.ckpt")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));
    let log = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn default_learning_rates_are_printed() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny_train(dir.path(), &["--steps", "1"]);
    let text = stdout(&o);
    assert!(o.status.success());
    assert!(text.contains("config lr=1e-3"), "{text}");
    let o = predlab(
        dir.path(),
        &[
            "train",
            "--steps",
            "1",
            "--patch",
            "8x8",
            "--channels",
            "2",
            "--res-blocks",
            "0",
        ],
    );
    assert!(stdout(&o).contains("config lr=1e-5"));
    let o = predlab(
        dir.path(),
        &[
            "train",
            "--model",
            "fcnn",
            "--steps",
            "1",
            "--batch",
            "2",
            "--patch",
            "8x8",
            "--channels",
            "2",
            "--res-blocks",
            "0",
            "--dataset-size",
            "4",
            "--motion-threshold",
            "0",
            "--out",
            "f",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.contains("config lr=1e-4") && text.contains("config mode=fcnn"),
        "{text}"
    );
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "# sweep\nlr = 2e-3\nbatch=3\nseed=11\nsteps=1\n",
    )
    .unwrap();
    let o = predlab(
        dir.path(),
        &[
            "train",
            "--config",
            "run.cfg",
            "--batch",
            "2",
            "--patch",
            "8x8",
            "--channels",
            "2",
            "--res-blocks",
            "0",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for want in [
        "config lr=2e-3",
        "config batch=2",
        "config seed=11",
        "config seq_len=96",
    ] {
        assert!(text.contains(want), "{want} missing in {text}");
    }
    std::fs::write(dir.path().join("bad.cfg"), "learning_rate=1\n").unwrap();
    assert_eq!(
        predlab(dir.path(), &["train", "--config", "bad.cfg"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--steps", "1"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_predlab"))
        .args(&args)
        .current_dir(dir.path())
        .env("PREDLAB_SEED", "42")
        .output()
        .unwrap();
    assert!(stdout(&o).contains("config seed=42"));
    let o = Command::new(env!("CARGO_BIN_EXE_predlab"))
        .args(["gen", "--len", "2", "--dims", "8x8"])
        .current_dir(dir.path())
        .env("PREDLAB_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("translate-42.y4m").is_file());
}

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.y4m", "b.y4m"] {
        let o = predlab(
            dir.path(),
            &[
                "gen",
                "--kind",
                "translate",
                "--dims",
                "64x64",
                "--len",
                "120",
                "--seed",
                "1",
                "--out",
                out,
            ],
        );
        assert!(o.status.success());
    }
    let a = std::fs::read(dir.path().join("a.y4m")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.y4m")).unwrap());
    assert!(a.starts_with(b"YUV4MPEG2 W64 H64"));
    assert!(dir.path().join("a.y4m.manifest.json").is_file());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = predlab(dir.path(), &["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().last().unwrap().ends_with("PASS"));
}

#[test]
fn eval_writes_report_matching_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(predlab(
        d,
        &["gen", "--dims", "16x16", "--len", "12", "--out", "clip.y4m"]
    )
    .status
    .success());
    assert!(tiny_train(
        d,
        &[
            "--steps",
            "4",
            "--log-every",
            "2",
            "--data",
            "clip.y4m",
            "--seq-len",
            "6",
            "--out",
            "run"
        ]
    )
    .status
    .success());
    let o = predlab(
        d,
        &[
            "eval",
            "--checkpoint",
            "run/final.ckpt",
            "--data",
            "clip.y4m",
            "--out",
            "rep",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(d.join("rep/summary.txt")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("rep/manifest.json")).unwrap())
            .unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(
        summary.contains(&format!("config_hash={hash}")),
        "{summary}"
    );
    assert_eq!(manifest["command"], "eval");
    for f in [
        "clip_y4m__crnn.csv",
        "clip_y4m__copy-last-frame.csv",
        "clip_y4m.svg",
        "training_curve.svg",
    ] {
        assert!(d.join("rep").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("rep/clip_y4m__crnn.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().split(',').next(), Some("2"));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("junk.y4m"), b"YUV4MPEG2 W4 H4\nFRAME\nxx").unwrap();
    assert_eq!(
        predlab(
            d,
            &["eval", "--checkpoint", "missing.ckpt", "--data", "junk.y4m"]
        )
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        tiny_train(d, &["--steps", "1", "--data", "junk.y4m"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn divergence_exits_4_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = predlab(
        dir.path(),
        &[
            "train",
            "--steps",
            "50",
            "--patch",
            "8x8",
            "--channels",
            "2",
            "--res-blocks",
            "0",
            "--lr",
            "1e200",
            "--out",
            "r",
        ],
    );
    assert_eq!(o.status.code(), Some(4));
    assert!(dir.path().join("r/latest.ckpt").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["exit_code"], 4);
}

#[test]
fn help_names_default_origins() {
    let dir = tempfile::tempdir().unwrap();
    let help = stdout(&predlab(dir.path(), &["train", "--help"]));
    assert!(help.contains("1e-5 CRNN/CLSTM, 1e-4 FCNN; published"));
    assert!(help.contains("--plateau-patience") && help.contains("6000"));
    let top = stdout(&predlab(dir.path(), &["--help"]));
    for cmd in ["train", "eval", "bench", "gen", "params", "gradcheck"] {
        assert!(top.contains(cmd));
    }
}
