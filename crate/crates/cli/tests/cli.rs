use std::path::Path;
use std::process::{Command, Output};

fn kneealign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kneealign"))
        .args(args)
        .env("KA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = kneealign(&["synth", "--n", "4", "--seed", "1", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a).len(), 4 * 2 + 2);
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let report = dir.path().join("report");
    assert!(kneealign(&["synth", "--n", "6", "--seed", "3", "--out", s(&data)]).status.success());
    let o = kneealign(&["evaluate", "--data", s(&data), "--auto", s(&data), "--out", s(&report), "--svg"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(report.join("localization.csv")).unwrap();
    assert!(csv.contains("automated,rp2p,0.000000,0.000000,0.000000,6"), "{csv}");
    let agreement = std::fs::read_to_string(report.join("agreement.csv")).unwrap();
    for line in agreement.lines().skip(1) {
        let icc: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(icc, 1.0, "{line}");
    }
    assert!(report.join("bland_altman_fts.svg").exists());
    assert!(report.join("bland_altman_fnts.svg").exists());
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "global.epochs = 2\nnot_a_key = 1\n").unwrap();
    let o = kneealign(&["--config", s(&cfg), "synth", "--n", "1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error kind=validation type=Config"), "{err}");
    assert!(!dir.path().join("x").exists());

    let o = kneealign(&["measure", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn end_to_end_plumbing() {
    let dir = tempfile::tempdir().unwrap();
    let (data, models, auto) = (dir.path().join("data"), dir.path().join("models"), dir.path().join("auto"));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "global.epochs = 1\nlocal.epochs = 1\nlocal.width = 4\n").unwrap();
    let c = s(&cfg);
    assert!(kneealign(&["synth", "--n", "3", "--seed", "2", "--out", s(&data)]).status.success());
    for stage in ["global", "local"] {
        let o = kneealign(&["--config", c, "train", "--data", s(&data), "--stage", stage, "--out", s(&models)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(models.join(format!("{stage}.kaw")).exists());
        assert!(models.join(format!("{stage}.kaw.cfg")).exists());
        let loss = std::fs::read_to_string(models.join(format!("{stage}_loss.csv"))).unwrap();
        assert_eq!(loss.lines().count(), 2);
    }
    let o = kneealign(&["--config", c, "localize", "--data", s(&data), "--models", s(&models), "--out", s(&auto)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(auto.join("points")).unwrap().count(), 3);
    let o = kneealign(&["measure", "--data", s(&data), "--auto", s(&auto), "--out", s(&auto)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = std::fs::read_to_string(auto.join("measurements.csv")).unwrap();
    assert!(m.starts_with("id,side,atfa_fts_deg,atfa_fnts_deg,flags\n"));
    assert_eq!(m.lines().count(), 4);
    let o = kneealign(&["evaluate", "--data", s(&data), "--auto", s(&auto), "--out", s(&dir.path().join("eval"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes() {
    let o = kneealign(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("hourglass+AG wing loss"));
    assert!(!text.contains("FAIL"));
}
