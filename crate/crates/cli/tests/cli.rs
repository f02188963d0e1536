use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shortcut-probe"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).arg("--quiet").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small synthetic splits plus a fast config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, seed) in [("train", "1"), ("probe", "2"), ("selection", "3"), ("test", "4")] {
        let out = format!("{name}.scpb");
        let o = run(dir.path(), &["synth", "--dim", "8", "--counts", "90,10,10,90", "--seed", seed, "--out", &out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    fs::write(
        dir.path().join("run.conf"),
        "train_data = train.scpb\nprobe_data = probe.scpb\nselection_data = selection.scpb\n\
         test_data = test.scpb\nk = 1\ne1 = 2\ne2 = 2\nbatches_per_epoch = 10\neta = 0.03\n",
    )
    .unwrap();
    dir
}

#[test]
fn missing_input_fails_at_load() {
    let dir = workspace();
    let o = run(dir.path(), &["pipeline", "--config", "run.conf", "--set", "probe_data=absent.scpb"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage load"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = workspace();
    for args in [
        vec!["probe", "--set", "nonsense=1"],
        vec!["probe", "--set", "k=x"],
        vec!["probe", "--config", "run.conf", "--set", "k=1", "--set", "k=2"],
        vec!["probe", "--config", "no_such.conf"],
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains("stage config"));
    }
}

#[test]
fn pipeline_then_eval_reports_worst_group() {
    let dir = workspace();
    let o = run(dir.path(), &["pipeline", "--config", "run.conf", "--set", "out_dir=out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["detector.scpd", "head.scph", "run_report.txt", "metrics.txt"] {
        assert!(dir.path().join("out").join(f).is_file(), "missing {f}");
    }
    let o = run(dir.path(), &["eval", "--head", "out/head.scph", "--data", "test.scpb"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("worst_group_accuracy\t")).map(str::to_owned);
    let value: f64 = line.expect("worst-group line").split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));

    let report = fs::read_to_string(dir.path().join("out/run_report.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("detector\t0\t")));
    assert!(report.lines().any(|l| l.starts_with("mitigation\t2\t")));
    assert!(report.lines().any(|l| l.starts_with("best_epoch\t")));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = workspace();
    for out in ["a", "b"] {
        let o = run(dir.path(), &["pipeline", "--config", "run.conf", "--seed", "9", "--set", &format!("out_dir={out}")]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["detector.scpd", "head.scph"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn half_ratio_probe_covers_every_sample() {
    let dir = workspace();
    let o = run(dir.path(), &["probe", "--config", "run.conf", "--set", "r=0.5", "--set", "out_dir=p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total: usize = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<usize> = l.split('\t').map(|c| c.parse().unwrap()).collect();
            // cor + mis counts each sample of the class exactly once
            cols[1] + cols[3]
        })
        .sum();
    assert_eq!(total, 200);
}

#[test]
fn stages_run_separately() {
    let dir = workspace();
    let o = run(dir.path(), &["detect", "--config", "run.conf", "--set", "out_dir=s1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &["mitigate", "--config", "run.conf", "--set", "out_dir=s2", "--set", "detector_in=s1/detector.scpd", "--set", "lambda=0"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("s2/head.scph").is_file());

    let o = run(dir.path(), &["interpret", "--detector", "s1/detector.scpd", "--data", "probe.scpb", "--top-k", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = run(dir.path(), &["mitigate", "--config", "run.conf"]);
    assert_eq!(o.status.code(), Some(2), "detector_in is required");
}

#[test]
fn theory_check_prints_one_row_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["theory-check", "--instances", "4", "--n", "3", "--d", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("id\tN\tD\tgamma_lhs\tgamma_rhs"));
    assert_eq!(out.lines().count(), 5);
    assert!(out.lines().skip(1).all(|l| l.ends_with("\ttrue")));

    let o = run(dir.path(), &["theory-check", "--n", "4", "--d", "4"]);
    assert_eq!(o.status.code(), Some(2));
}
