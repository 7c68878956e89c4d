use std::path::Path;
use std::process::{Command, Output};

use phdiff::checkpoint::save_state;
use phdiff::datagen::load_rgb;
use phdiff::evaluation::read_scores;
use phdiff::{ModelConfig, ModelState, Profile, Tensor};

fn phdiff(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phdiff"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("PHDIFF_THREADS", "1")
        .output()
        .expect("spawn phdiff")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = phdiff(dir.path(), &["datagen", "--n", "2", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn strength_outside_unit_interval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = phdiff(dir.path(), &["--strength", "1.5", "eval", "--records", "r.csv"]);
    assert!(!o.status.success());
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("r.csv"), "item_a,item_b,winner\na,a,a\n").unwrap();
    let o = phdiff(dir.path(), &["eval", "--records", "r.csv"]);
    assert!(!o.status.success());
    let line = stderr(&o).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["error"], "records");
    assert!(v["message"].as_str().unwrap().contains("itself"));
}

#[test]
fn symmetric_records_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("item_a,item_b,winner\n");
    for _ in 0..10 {
        csv.push_str("x,y,x\nx,y,y\n");
    }
    std::fs::write(dir.path().join("r.csv"), csv).unwrap();
    let o = phdiff(dir.path(), &["eval", "--records", "r.csv", "--out", "s.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = read_scores(&dir.path().join("s.csv")).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|(_, s)| *s == 0.0), "{scores:?}");
}

#[test]
fn datagen_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = phdiff(dir.path(), &["--profile", "tiny", "--seed", "9", "datagen", "--n", "3", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 3 + 1);
    for n in &names {
        let a = std::fs::read(dir.path().join("a").join(n)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn zero_strength_returns_the_composite() {
    let dir = tempfile::tempdir().unwrap();
    let o = phdiff(dir.path(), &["--profile", "tiny", "datagen", "--n", "1", "--out", "d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let state = ModelState::<f32>::new(ModelConfig::for_profile(Profile::Tiny, 0)).unwrap();
    save_state(&state, &dir.path().join("m.phdf")).unwrap();
    let o = phdiff(
        dir.path(),
        &[
            "--strength", "0", "harmonize", "--checkpoint", "m.phdf", "--composite", "d/00000_composite.png", "--mask",
            "d/00000_mask.png", "--out", "h.png",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("steps=0"));
    let a: Tensor<f32> = load_rgb(&dir.path().join("h.png")).unwrap();
    let b: Tensor<f32> = load_rgb(&dir.path().join("d/00000_composite.png")).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn config_file_supplies_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ok.conf"), "# run settings\nprofile = tiny\nseed = 4\n").unwrap();
    let o = phdiff(dir.path(), &["--config", "ok.conf", "datagen", "--n", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("size=32"));
    std::fs::write(dir.path().join("bad.conf"), "profil = tiny\n").unwrap();
    let o = phdiff(dir.path(), &["--config", "bad.conf", "datagen", "--n", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("profil"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = phdiff(dir.path(), &["gradcheck", "--probes", "4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("pass=true"));
}
