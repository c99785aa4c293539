use std::path::Path;
use std::process::{Command, Output};

fn sttran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sttran"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let manifest = data.join("manifest.txt");
    ok(&sttran(&["synth", "--out", s(&data), "--videos", "6", "--test-videos", "3", "--frames", "3"]));
    assert!(manifest.exists());

    let text = ok(&sttran(&[
        "train", "--data", s(&manifest), "--out", s(&run), "--set", "steps=12", "--set", "checkpoint_every=6",
    ]));
    assert!(text.contains("trained 12 steps"), "{text}");
    let ck = run.join("checkpoint.sttc");
    assert!(ck.exists() && run.join("run.json").exists() && run.join("config.txt").exists());

    let eval = ["eval", "--data", s(&manifest), "--checkpoint", s(&ck), "--mode", "predcls", "--json"];
    let a = ok(&sttran(&eval));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v.is_object());
    // same checkpoint, same bytes, with or without rayon
    assert_eq!(a, ok(&sttran(&eval)));
    let mut seq = eval.to_vec();
    seq.push("--sequential");
    assert_eq!(a, ok(&sttran(&seq)));

    let table = ok(&sttran(&["eval", "--data", s(&manifest), "--checkpoint", s(&ck), "--mode", "predcls", "--sweep"]));
    assert!(!table.is_empty());

    let first = std::fs::read_to_string(data.join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let video = first["video"].as_str().unwrap();
    let lines = ok(&sttran(&[
        "predict", "--data", s(&manifest), "--checkpoint", s(&ck), "--video", video, "--k", "5",
    ]));
    assert!(!lines.is_empty());
    for line in lines.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    let resumed = dir.path().join("resumed");
    let text = ok(&sttran(&[
        "train", "--data", s(&manifest), "--out", s(&resumed), "--checkpoint", s(&ck), "--set", "steps=14",
    ]));
    assert!(text.contains("trained 2 steps"), "{text}");
    let changed = sttran(&[
        "train", "--data", s(&manifest), "--out", s(&resumed), "--checkpoint", s(&ck), "--set", "ffn_dim=8",
    ]);
    assert_eq!(changed.status.code(), Some(1));
}

#[test]
fn perturbed_copy_is_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let shuffled = dir.path().join("shuffled");
    ok(&sttran(&["synth", "--out", s(&data), "--videos", "3", "--test-videos", "1", "--frames", "4"]));
    let text = ok(&sttran(&[
        "perturb", "--data", s(&data.join("manifest.txt")), "--out", s(&shuffled), "--kind", "reverse", "--fraction", "1",
    ]));
    assert!(text.starts_with("perturbed 3 of 3"), "{text}");
    assert!(shuffled.join("manifest.txt").exists());
}

#[test]
fn validation_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let code = |o: Output| o.status.code();
    assert_eq!(code(sttran(&["synth", "--out", s(dir.path()), "--set", "bogus_key=1"])), Some(1));
    assert_eq!(code(sttran(&["synth", "--out", s(dir.path()), "--set", "steps"])), Some(1));
    assert_eq!(code(sttran(&["eval", "--data", s(&missing), "--checkpoint", s(&missing)])), Some(1));
    assert_eq!(code(sttran(&["no-such-command"])), Some(1));
}

#[test]
fn corrupted_gradcheck_exits_with_three() {
    let out = sttran(&["gradcheck", "--corrupt", "--frames", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed 0"));
}
