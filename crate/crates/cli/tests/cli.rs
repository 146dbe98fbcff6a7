use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hierloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierloc")).args(args).output().expect("binary runs")
}

fn run_config(dir: &Path, text: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, text).unwrap();
    let out = dir.join(out);
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    hierloc(&args)
}

fn strip_clock(report: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(report).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_s");
    v
}

#[test]
fn lists_twelve_experiments_in_stable_order() {
    let a = hierloc(&["list-experiments"]);
    assert!(a.status.success());
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().all(|l| l.split_whitespace().count() >= 3));
    assert!(text.starts_with("wegner-mc"));
    assert_eq!(text, String::from_utf8(hierloc(&["list-experiments"]).stdout).unwrap());
}

#[test]
fn wegner_smoke_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config(dir.path(), "experiment = wegner-mc\ntrials = 5000\n", "out", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let v = strip_clock(&report);
    assert_eq!(v["experiment"], "wegner-mc");
    assert_eq!(v["params"]["trials"], 5000);
    assert_eq!(v["params"]["radius"], 5);
}

#[test]
fn same_seed_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = "experiment = decay-profile\ntrials = 3\n";
    let a = run_config(dir.path(), text, "a", &["--seed", "11", "--threads", "1"]);
    let b = run_config(dir.path(), text, "b", &["--seed", "11", "--threads", "3"]);
    assert!(a.status.code().is_some() && a.status.code() == b.status.code());
    let ra = fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let rb = fs::read_to_string(dir.path().join("b/report.json")).unwrap();
    assert_eq!(strip_clock(&ra), strip_clock(&rb));
    let ca = fs::read(dir.path().join("a/decay_fits.csv")).unwrap();
    assert_eq!(ca, fs::read(dir.path().join("b/decay_fits.csv")).unwrap());
    let c = run_config(dir.path(), text, "c", &["--seed", "12"]);
    assert!(c.status.code().is_some());
    let rc = fs::read_to_string(dir.path().join("c/report.json")).unwrap();
    assert_ne!(strip_clock(&ra), strip_clock(&rc));
}

#[test]
fn curves_use_seventeen_digits_and_headers() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config(dir.path(), "experiment = msd\ntrials = 2\nn_times = 5\nt_max = 4\n", "out", &[]);
    assert!(o.status.code().is_some());
    let csv = fs::read_to_string(dir.path().join("out/msd.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,r2_clean,r2_disordered_0");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for field in rows[1].split(',') {
        let mantissa = field.split('e').next().unwrap().replace(['-', '.'], "");
        assert_eq!(mantissa.len(), 17, "{field}");
        let x: f64 = field.parse().unwrap();
        assert_eq!(format!("{x:.16e}"), field);
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config(dir.path(), "experiment = wegner-mc\nwidth = 3\n", "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
    let o = run_config(dir.path(), "experiment = wegner-mc\ntrials = 0\n", "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_config(dir.path(), "experiment = no-such\n", "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("absent.cfg");
    let o = hierloc(&["run", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failed_assertion_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // Demanding a decay rate far beyond what the barrier allows must fail.
    let o = run_config(dir.path(), "experiment = decay-profile\ntrials = 2\nrate_factor = 50\n", "out", &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.cfg");
    fs::write(&cfg, "experiment = toolbox\ntrials = 50\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hierloc"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("HIERLOC_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_hierloc"))
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("HIERLOC_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
