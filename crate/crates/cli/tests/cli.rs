use std::path::Path;
use std::process::{Command, Output};

fn mfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to launch mfl")
}

fn printed_config(sub: &str, dir: &Path) -> serde_json::Value {
    let out = mfl(&[sub, "--print-config"], dir);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn print_config_has_all_sections() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "train",
        "grad-check",
        "chaos-study",
        "euler-study",
        "contraction-study",
        "gibbs-check",
        "generalization-study",
    ] {
        let v = printed_config(sub, dir.path());
        for key in ["model", "grid", "trainer"] {
            assert!(v.get(key).is_some(), "{sub}: missing {key}");
        }
        assert_eq!(v["study"].is_null(), sub == "train", "{sub}");
    }
}

#[test]
fn train_writes_history_cloud_and_dat_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = printed_config("train", dir.path());
    cfg["trainer"]["n_iters"] = 20.into();
    cfg["trainer"]["record_every"] = 5.into();
    std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();

    let out = mfl(
        &["train", "--config", "cfg.json", "--out", "run", "--seed", "3"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("iter,s,J,Jsigma,grad_norm,second_moment"));
    assert_eq!(lines.count(), 5);
    let cloud = std::fs::read_to_string(run.join("cloud.csv")).unwrap();
    assert_eq!(cloud.lines().next(), Some("particle,node,coord,value"));
    let dat = std::fs::read_to_string(run.join("J.dat")).unwrap();
    assert!(dat
        .lines()
        .filter(|l| !l.starts_with('#'))
        .all(|l| l.split_whitespace().count() == 2));
    assert!(run.join("cloud.bin").exists());
    assert!(run.join("summary.json").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = printed_config("train", dir.path());
    cfg["trainer"]["learning_rate"] = 0.1.into();
    std::fs::write(dir.path().join("bad.json"), cfg.to_string()).unwrap();
    let out = mfl(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn mismatched_study_section_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = printed_config("contraction-study", dir.path());
    std::fs::write(dir.path().join("c.json"), cfg.to_string()).unwrap();
    let out = mfl(&["gibbs-check", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn grad_check_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = printed_config("grad-check", dir.path());
    cfg["study"]["n_instances"] = 4.into();
    std::fs::write(dir.path().join("g.json"), cfg.to_string()).unwrap();
    for (name, threads) in [("a", "1"), ("b", "2")] {
        let out = mfl(
            &["grad-check", "--config", "g.json", "--out", name, "--threads", threads],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("overall: PASS"));
    }
    let mut compared = 0;
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") {
            let other = dir.path().join("b").join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(other).unwrap());
            compared += 1;
        }
    }
    assert!(compared > 0);
}
