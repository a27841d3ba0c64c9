use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nilm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nilm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nilm(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn household(cwd: &Path) {
    ok(&["synth", "--seed", "1", "--duration", "5400", "--out-dir", "h"], cwd);
}

#[test]
fn manifest_stages_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    household(dir.path());
    ok(&["run-all", "--in", "h/aggregate.csv", "--out-dir", "out"], dir.path());
    let manifest = fs::read_to_string(dir.path().join("out/manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("stage,seconds"));
    let stages: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    let golden = include_str!("golden/manifest_stages.txt");
    assert_eq!(stages, golden.lines().collect::<Vec<_>>());
    for line in manifest.lines().skip(1) {
        let secs: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(secs >= 0.0);
    }
}

#[test]
fn missing_input_is_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = nilm(&["run-all", "--in", "absent.csv", "--out-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
    for args in [
        &["filter", "--in", "absent.csv", "--out", "f.csv"][..],
        &["events", "--in", "absent.csv"],
        &["label", "--map", "absent.pmap", "--db", "absent/db.txt"],
        &["mckp", "--capacity", "10", "--instance", "absent.csv"],
    ] {
        assert_eq!(nilm(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nilm(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(nilm(&["events"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("c.toml"), "[filter]\nmedian_window = 4\n").unwrap();
    fs::write(dir.path().join("x.csv"), "0,1\n1,1\n").unwrap();
    let out = nilm(&["run-all", "--config", "c.toml", "--in", "x.csv", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_1_with_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "0,100\n1,-5\n").unwrap();
    let out = nilm(&["run-all", "--in", "bad.csv", "--out-dir", "out"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("out/manifest.csv").exists());
    let info = fs::read_to_string(dir.path().join("out/run_info.toml")).unwrap();
    assert!(info.contains("complete = false"));
}

#[test]
fn staged_commands_agree_with_run_all() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    household(cwd);
    ok(&["run-all", "--in", "h/aggregate.csv", "--out-dir", "all", "--truth-dir", "h/truth"], cwd);

    ok(&["filter", "--in", "h/aggregate.csv", "--out", "f.csv"], cwd);
    let events = ok(&["events", "--in", "f.csv", "--threshold", "60"], cwd);
    assert!(events.starts_with("index,delta,kind\n"));
    assert_eq!(events, fs::read_to_string(cwd.join("all/events.csv")).unwrap());
    ok(&["disagg", "--in", "f.csv", "--out-dir", "r", "--dump-db", "db.txt"], cwd);
    assert_eq!(fs::read(cwd.join("db.txt")).unwrap(), fs::read(cwd.join("r/db.txt")).unwrap());
    let map = concat!(env!("CARGO_MANIFEST_DIR"), "/../../maps/na.pmap");
    let labels = ok(&["label", "--map", map, "--region", "NA", "--db", "r/db.txt"], cwd);
    assert!(labels.contains("Clothes Dryer,blue"));
    assert_eq!(
        fs::read(cwd.join("r/merged/db.txt")).unwrap(),
        fs::read(cwd.join("all/merged/db.txt")).unwrap()
    );
    let report = ok(
        &["eval", "--truth-dir", "h/truth", "--result-dir", "r/merged", "--aggregate", "h/aggregate.csv"],
        cwd,
    );
    assert_eq!(report, fs::read_to_string(cwd.join("all/report.csv")).unwrap());
    assert!(cwd.join("r/merged/plot.csv").exists());
}

#[test]
fn reruns_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    household(cwd);
    ok(&["run-all", "--in", "h/aggregate.csv", "--out-dir", "a"], cwd);
    ok(&["run-all", "--in", "h/aggregate.csv", "--out-dir", "b"], cwd);
    for entry in fs::read_dir(cwd.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "manifest.csv" || cwd.join("a").join(&name).is_dir() {
            continue;
        }
        assert_eq!(
            fs::read(cwd.join("a").join(&name)).unwrap(),
            fs::read(cwd.join("b").join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn mckp_solves_instance_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("i.csv"), "appliance_id,weight,profit\n1,500,100\n").unwrap();
    let out = ok(&["mckp", "--capacity", "600", "--instance", "i.csv", "--check"], dir.path());
    assert!(out.contains("1,500\n"));
    assert!(out.contains("# profit=83.333"));
}
