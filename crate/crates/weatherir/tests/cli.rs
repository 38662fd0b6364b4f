use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn weatherir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weatherir"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = weatherir(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: &str =
    "model = smoke\ncrop_size = 32\nsteps_per_epoch = 3\nstage1_epochs = 2\nstage2_epochs = 1\nlr = 0.001\n";

/// A 2-kind corpus and a tiny training configuration.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--out",
            "corpus",
            "--set",
            "synth.size=32",
            "--set",
            "synth.per_kind=3",
            "--set",
            "synth.clean_count=3",
            "--set",
            "synth.kinds=haze,snow",
        ],
    );
    dir
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--config",
        "tiny.txt",
        "--manifest",
        "corpus/manifest.csv",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(out)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&weatherir(d, &["frobnicate"])), 2);
    assert_eq!(code(&weatherir(d, &["train"])), 2);
    assert_eq!(code(&weatherir(d, &["synth", "--seed", "x"])), 2);
    assert_eq!(code(&weatherir(d, &["synth", "--set", "bogus=1"])), 2);
    assert_eq!(code(&weatherir(d, &["synth", "--set", "lr=-1"])), 2);
    assert_eq!(code(&weatherir(d, &["synth", "--set", "noequals"])), 2);
    assert_eq!(
        code(&weatherir(d, &["ablate", "--manifest", "m.csv", "--regime", "sgd"])),
        2
    );
    assert_eq!(code(&weatherir(d, &["--help"])), 0);
}

#[test]
fn data_and_missing_file_errors() {
    let dir = workspace();
    let d = dir.path();
    let ckpt = train(d, "run", &[]).join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    assert_eq!(code(&weatherir(d, &["train", "--manifest", "nope.csv"])), 5);
    assert_eq!(
        code(&weatherir(
            d,
            &["train", "--manifest", "corpus/manifest.csv", "--config", "nope.txt"]
        )),
        5
    );
    assert_eq!(
        code(&weatherir(
            d,
            &["restore", "--checkpoint", "nope.ckpt", "--input", "corpus/clean"]
        )),
        5
    );

    std::fs::write(d.join("corpus/empty.csv"), "degraded,clean,kind,severity,seed\n").unwrap();
    assert_eq!(
        code(&weatherir(
            d,
            &["eval", "--checkpoint", ckpt, "--manifest", "corpus/empty.csv"]
        )),
        3
    );
    std::fs::write(
        d.join("corpus/fog.csv"),
        "degraded,clean,kind,severity,seed\nclean/0000.png,clean/0000.png,fog,0.5,1\n",
    )
    .unwrap();
    assert_eq!(code(&weatherir(d, &["train", "--manifest", "corpus/fog.csv"])), 3);
    std::fs::write(d.join("garbage.ckpt"), b"definitely not a checkpoint").unwrap();
    assert_eq!(
        code(&weatherir(
            d,
            &[
                "eval",
                "--checkpoint",
                "garbage.ckpt",
                "--manifest",
                "corpus/manifest.csv"
            ]
        )),
        3
    );
    std::fs::write(d.join("bad.png"), b"not a png").unwrap();
    assert_eq!(
        code(&weatherir(d, &["restore", "--checkpoint", ckpt, "--input", "bad.png"])),
        3
    );
}

#[test]
fn checkpoint_version_mismatch_exits_6() {
    let dir = workspace();
    let d = dir.path();
    let mut bytes = read(train(d, "run", &[]).join("final.ckpt"));
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(d.join("old.ckpt"), bytes).unwrap();
    let o = weatherir(
        d,
        &["eval", "--checkpoint", "old.ckpt", "--manifest", "corpus/manifest.csv"],
    );
    assert_eq!(code(&o), 6);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 7"));
}

#[test]
fn divergence_exits_4_and_dumps_the_batch() {
    let dir = workspace();
    let d = dir.path();
    let o = weatherir(
        d,
        &[
            "train",
            "--config",
            "tiny.txt",
            "--manifest",
            "corpus/manifest.csv",
            "--out",
            "run",
            "--set",
            "lr=1e30",
        ],
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let dump = d.join("run/nan_batch");
    let meta: serde_json::Value = serde_json::from_slice(&read(dump.join("batch.json"))).unwrap();
    assert!(meta["error"].as_str().unwrap().contains("non-finite"));
    assert!(dump.join("anchor0_degraded.png").is_file());
    assert!(!d.join("run/final.ckpt").exists());
}

#[test]
fn synth_rerun_reproduces_manifest() {
    let dir = workspace();
    let d = dir.path();
    let args = [
        "synth",
        "--set",
        "synth.size=32",
        "--set",
        "synth.per_kind=3",
        "--set",
        "synth.clean_count=3",
        "--set",
        "synth.kinds=haze,snow",
    ];
    let stdout = ok(d, &[&args[..], &["--out", "again"]].concat());
    assert!(stdout.starts_with("wrote 6 rows"));
    assert_eq!(read(d.join("again/manifest.csv")), read(d.join("corpus/manifest.csv")));
    assert_eq!(
        read(d.join("again/degraded/snow_00004.png")),
        read(d.join("corpus/degraded/snow_00004.png"))
    );
    let other = ok(d, &[&args[..], &["--seed", "9", "--out", "other"]].concat());
    assert_ne!(other, stdout);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = workspace();
    let d = dir.path();
    let a = train(d, "a", &[]);
    let b = train(d, "b", &[]);
    assert_eq!(read(a.join("train_log.jsonl")), read(b.join("train_log.jsonl")));
    assert_eq!(read(a.join("final.ckpt")), read(b.join("final.ckpt")));
    let log = String::from_utf8(read(a.join("train_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 9);
    assert!(read(a.join("config.txt")).starts_with(b"model"));

    // resume after stage 1 and finish stage 2 elsewhere
    let stage1 = a.join("stage1.ckpt");
    let c = train(d, "c", &["--resume", stage1.to_str().unwrap()]);
    assert_eq!(read(c.join("final.ckpt")), read(a.join("final.ckpt")));
    let tail: Vec<_> = log.lines().skip(6).collect();
    let resumed = String::from_utf8(read(c.join("train_log.jsonl"))).unwrap();
    assert_eq!(resumed.lines().collect::<Vec<_>>(), tail);

    let seeded = train(d, "s", &["--seed", "3"]);
    assert_ne!(read(seeded.join("train_log.jsonl")), read(a.join("train_log.jsonl")));
}

#[test]
fn eval_restore_and_modulate_outputs() {
    let dir = workspace();
    let d = dir.path();
    let run = train(d, "run", &[]);
    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let first = ok(
        d,
        &[
            "eval",
            "--checkpoint",
            ckpt,
            "--manifest",
            "corpus/manifest.csv",
            "--out",
            "ev",
        ],
    );
    let again = ok(
        d,
        &[
            "eval",
            "--checkpoint",
            ckpt,
            "--manifest",
            "corpus/manifest.csv",
            "--out",
            "ev2",
        ],
    );
    assert_eq!(first, again);
    assert_eq!(read(d.join("ev/eval.json")), read(d.join("ev2/eval.json")));
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("ev/eval.json"))).unwrap();
    assert_eq!(report["overall"]["count"], 6);
    assert_eq!(report["per_kind"].as_array().unwrap().len(), 2);

    ok(
        d,
        &[
            "restore",
            "--checkpoint",
            ckpt,
            "--input",
            "corpus/degraded",
            "--iters",
            "2",
            "--out",
            "rs",
        ],
    );
    let names: Vec<_> = std::fs::read_dir(d.join("rs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 12);
    assert!(names.iter().any(|n| n == "haze_00000.png"));
    assert!(names.iter().any(|n| n == "haze_00000_iter1.png"));
    let out = image::open(d.join("rs/snow_00003.png")).unwrap();
    assert_eq!((out.width(), out.height()), (32, 32));
    assert_eq!(
        code(&weatherir(
            d,
            &[
                "restore",
                "--checkpoint",
                ckpt,
                "--input",
                "corpus/clean",
                "--iters",
                "0"
            ]
        )),
        2
    );

    let input = "corpus/degraded/haze_00001.png";
    let stdout = ok(
        d,
        &[
            "modulate",
            "--checkpoint",
            ckpt,
            "--input",
            input,
            "--alphas=-1,0,1",
            "--out",
            "md",
        ],
    );
    assert_eq!(stdout.lines().count(), 3);
    let sheet = image::open(d.join("md/sheet.png")).unwrap();
    assert_eq!((sheet.width(), sheet.height()), (96, 32));
    let meta: serde_json::Value = serde_json::from_slice(&read(d.join("md/modulation.json"))).unwrap();
    assert_eq!(meta.as_array().unwrap().len(), 3);
    assert_eq!(meta[0]["alpha"], -1.0);

    // alpha 0 panel equals a plain restoration
    ok(
        d,
        &["restore", "--checkpoint", ckpt, "--input", input, "--out", "single"],
    );
    let panel = image::open(d.join("md/sheet.png")).unwrap().to_rgb8();
    let single = image::open(d.join("single/haze_00001.png")).unwrap().to_rgb8();
    for y in 0..32 {
        for x in 0..32 {
            assert_eq!(panel.get_pixel(32 + x, y), single.get_pixel(x, y));
        }
    }
}

#[test]
fn ablate_report_is_reproducible() {
    let dir = workspace();
    let d = dir.path();
    let args = |out: &'static str| {
        [
            "ablate",
            "--config",
            "tiny.txt",
            "--manifest",
            "corpus/manifest.csv",
            "--regime",
            "none,direct,mrl,mqrl",
            "--out",
            out,
        ]
    };
    let first = ok(d, &args("ab1"));
    let second = ok(d, &args("ab2"));
    assert_eq!(first, second);
    let bytes = read(d.join("ab1/ablation.json"));
    assert_eq!(bytes, read(d.join("ab2/ablation.json")));
    let report: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let regimes = report["regimes"].as_array().unwrap();
    assert_eq!(regimes.len(), 4);
    let mut hashes: Vec<_> = regimes
        .iter()
        .map(|r| r["checkpoint_sha256"].as_str().unwrap())
        .collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 4);
    for r in regimes {
        let name = r["regime"].as_str().unwrap();
        assert!(d.join("ab1").join(name).join("final.ckpt").is_file());
    }
    // without a severity loss the ranking terms of the log stay zero
    let log = String::from_utf8(read(d.join("ab1/none/train_log.jsonl"))).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["severity"], 0.0);
    }
}
