use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tierkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tierkv"))
        .args(args)
        .env_remove("TIERKV_CONFIG")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(tierkv(&["--help"]).status.code(), Some(0));
    assert_eq!(tierkv(&["--version"]).status.code(), Some(0));
    assert_eq!(tierkv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tierkv(&["gen", "--keys", "ten", "--out", "x"]).status.code(), Some(1));
    assert_eq!(tierkv(&["replay", "--trace", "t", "--pacing", "slow"]).status.code(), Some(1));
    let missing = tierkv(&["mrc", "--trace", "/nonexistent/trace", "--out", "/dev/null"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(stderr(&missing).lines().filter(|l| l.starts_with("error:")).count(), 1);
}

#[test]
fn unknown_config_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "# comment\ncache.capacity_bytes = 1024\ncache.colour = blue\n").unwrap();
    let out = tierkv(&["serve", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("line 3") && err.contains("cache.colour"), "{err}");
}

#[test]
fn config_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.conf");
    fs::write(&cfg, "sync.policy = sideways\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tierkv"))
        .args(["serve"])
        .env("TIERKV_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let o = tierkv(&["gen", "--keys", "500", "--ops", "3000", "--seed", seed, "--out", s(&p)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(p).unwrap()
    };
    let a = run("a", "42");
    assert_eq!(a, run("b", "42"));
    assert_ne!(a, run("c", "43"));
    assert!(a.starts_with(b"#tierkv-trace v1\n"));
}

#[test]
fn break_even_prints_seconds() {
    let out = tierkv(&["break-even", "--cpqps-slow", "1e-5", "--cpgb-fast", "0.05", "--record-size", "1024"]);
    assert!(out.status.success());
    let secs: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((secs - 209.7152).abs() < 1e-3, "{secs}");
    let bad = tierkv(&["break-even", "--cpqps-slow", "0", "--cpgb-fast", "0.05", "--record-size", "1024"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn mrc_and_sweep_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (load, run) = (dir.path().join("load"), dir.path().join("run"));
    let o = tierkv(&[
        "gen", "--keys", "400", "--ops", "4000", "--load-out", s(&load), "--run-out", s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mrc = dir.path().join("mrc.csv");
    assert!(tierkv(&["mrc", "--trace", s(&run), "--out", s(&mrc), "--sizes", "1,10,100,1000"]).status.success());
    let text = fs::read_to_string(&mrc).unwrap();
    let ratios: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]), "{text}");

    let sweep = dir.path().join("sweep.csv");
    let o = tierkv(&[
        "sweep-cr", "--load", s(&load), "--run", s(&run), "--ratios", "0.1,0.5,1.0", "--out", s(&sweep),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().next(), Some("cr,mr,pc,sc,total"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn eval_single_config_wins() {
    let dir = tempfile::tempdir().unwrap();
    let (load, run) = (dir.path().join("load"), dir.path().join("run"));
    assert!(tierkv(&[
        "gen", "--keys", "300", "--ops", "2000", "--load-out", s(&load), "--run-out", s(&run),
    ])
    .status
    .success());
    let cfg = dir.path().join("configs");
    fs::write(&cfg, "[only]\npolicy = memory-only\ninstance.cost = 2\n").unwrap();
    let report = dir.path().join("report.csv");
    let o = tierkv(&[
        "eval", "--configs", s(&cfg), "--load", s(&load), "--run", s(&run), "--out", s(&report),
        "--warmup-ms", "20", "--window-ms", "100", "--max-concurrency", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].starts_with("config_id,"));
    assert!(lines[1].starts_with("only,") && lines[1].ends_with(",1"), "{text}");
}

#[test]
fn replay_in_process_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t");
    assert!(tierkv(&["gen", "--keys", "100", "--ops", "500", "--out", s(&trace)]).status.success());
    let cfg = dir.path().join("c");
    fs::write(&cfg, "cache.capacity_bytes = 1048576\nexec.mode = multi\nexec.threads_max = 2\n").unwrap();
    let report = dir.path().join("r.csv");
    let o = tierkv(&[
        "replay", "--trace", s(&trace), "--config", s(&cfg), "--clients", "3", "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "600");
    assert_eq!(row[4], "0");
}
