use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chromalink")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed_makes_data_and_training_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let common = ["--preset", "tiny", "--resize", "32x24", "--seed", "5"];
    for name in ["a", "b"] {
        let data = p(&format!("data_{name}"));
        ok(&[&common[..], &["synth-data", "--out", &data, "--clips", "2", "--clip-len", "3"]].concat());
        ok(&[&common[..], &["train", "--frames", &data, "--out", &p(&format!("run_{name}")), "--steps", "2"]].concat());
    }
    assert_eq!(tree(&tmp.path().join("data_a")), tree(&tmp.path().join("data_b")));
    assert_eq!(
        fs::read(tmp.path().join("run_a/final.ckpt")).unwrap(),
        fs::read(tmp.path().join("run_b/final.ckpt")).unwrap()
    );

    let data_c = p("data_c");
    ok(&["--preset", "tiny", "--resize", "32x24", "--seed", "6", "synth-data", "--out", &data_c, "--clips", "2", "--clip-len", "3"]);
    assert_ne!(tree(&tmp.path().join("data_a")), tree(&tmp.path().join("data_c")));
}

#[test]
fn bad_input_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope").display().to_string();
    for args in [
        vec!["colorize", "--frames", &missing, "--reference", &missing, "--out", &missing],
        vec!["--resize", "96by64", "synth-data", "--out", &missing],
        vec!["--preset", "huge", "synth-data", "--out", &missing],
        vec!["--set", "block_size", "synth-data", "--out", &missing],
        vec!["eval", "--frames", &missing],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        let last = err.trim().lines().last().unwrap_or_default();
        assert!(last.starts_with("error:"), "{args:?}: {err}");
        assert!(last.matches("(os error").count() <= 1, "cause repeated: {last}");
    }
}
