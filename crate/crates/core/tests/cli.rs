use std::path::Path;
use std::process::{Command, Output};

fn slot_ground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slot-ground"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--preset",
    "desk",
    "--set",
    "pretrain_steps=4",
    "--set",
    "n_train=8",
    "--set",
    "n_eval=4",
    "--set",
    "batch_size=4",
];

#[test]
fn bad_configuration_exits_with_two_and_names_the_key() {
    let o = slot_ground(&["gen-data", "--set", "synth.n_tokens=15", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("synth.n_tokens"), "{}", stderr(&o));

    let o = slot_ground(&["gen-data", "--set", "lamda=0.2", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"));

    let o = slot_ground(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--checkpoint"));

    let o = slot_ground(&["train", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("preset"));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = slot_ground(&["eval", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_command_passes() {
    let o = slot_ground(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_then_mmd_on_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, ood) in [(&a, false), (&b, true)] {
        let mut args = vec!["gen-data", "--preset", "desk", "--n", "6", "--out", out.to_str().unwrap()];
        if ood {
            args.push("--ood");
        }
        let o = slot_ground(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    let files = |d: &Path| -> Vec<String> {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "svtf"))
            .map(|p| p.to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 6);
    let mut args = vec!["diag-mmd", "--a"];
    args.extend(fa.iter().map(String::as_str));
    args.push("--b");
    args.extend(fb.iter().map(String::as_str));
    let o = slot_ground(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["estimate"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_then_every_checkpoint_command() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", run.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = slot_ground(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("checkpoint.ckpt");
    let ck = ckpt.to_str().unwrap();
    for f in ["config.json", "pretrain.jsonl", "train.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let eval_dir = dir.path().join("eval");
    let o = slot_ground(&["eval", "--checkpoint", ck, "--split", "ood", "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 4);
    let preds = std::fs::read_to_string(eval_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);

    for extra in [
        vec!["diag-mmd", "--checkpoint", ck, "--n", "6"],
        vec!["diag-perturb", "--checkpoint", ck, "--mode", "random", "--n", "4"],
        vec!["diag-simrank", "--checkpoint", ck, "--n", "10"],
    ] {
        let o = slot_ground(&extra);
        assert!(o.status.success(), "{:?}: {}", extra, stderr(&o));
        assert!(!o.stdout.is_empty(), "{extra:?}");
    }

    let slots = dir.path().join("slots");
    let o = slot_ground(&["export-slots", "--checkpoint", ck, "--n", "2", "--out", slots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = std::fs::read_dir(&slots)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgm, 2 * 20);
}
