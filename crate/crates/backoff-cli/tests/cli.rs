use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_backoff-lab"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!("{body}\n[output]\ndir = {:?}\n", dir.join("out").display().to_string());
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> (i32, String) {
    let out = bin().args(args).arg("--config").arg(config).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

const SIM: &str = r#"
name = "sim"
lambda = 0.5
horizon = 300
replicas = 2
base_seed = 42

[sequence]
family = "binary_exponential"

[process]
kind = "backoff"

[observers]
window = 50
sets = [{ name = "low", bins = [1, 2, 3] }]
"#;

#[test]
fn classify_aloha_has_one_row_per_bin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"c\"\nlambda = 0.1\n[sequence]\nfamily = \"constant\"\np = 0.5\n[process]\nkind = \"backoff\"\n[classify]\nj_max = 100\n",
    );
    assert_eq!(run(&["classify"], &cfg).0, 0);
    let text = std::fs::read_to_string(dir.path().join("out/classify.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "j,class,prop1,prop2,prop3,wtilde,upsilon,log_weight");
    assert_eq!(lines.len(), 101);
    assert!(lines[5].starts_with("5,strongly_exposed,false,false,false,"));
}

#[test]
fn trace_reproduces_the_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"t\"\nlambda = 0.5\nhorizon = 3\n[sequence]\nfamily = \"explicit\"\nprobs = [1.0, 0.5]\n[process]\nkind = \"backoff\"\n[trace]\nrecurrence = \"f\"\nj = 1\n",
    );
    assert_eq!(run(&["trace"], &cfg).0, 0);
    let text = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    let ys: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ys, vec![0.0, 0.5, 0.75, 0.875]);
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let cfg = write_config(d.path(), SIM);
        assert_eq!(run(&["simulate"], &cfg).0, 0);
    }
    for f in ["summary.csv", "failures.csv"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let summary = std::fs::read_to_string(a.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("replica,seed,window_start,backlog_mean,noise_low,escapes_cum,empty_visits,max_bin\n"));
    assert_eq!(summary.lines().count(), 1 + 2 * 6);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(manifest["wall_time_secs"].is_f64());
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    let echoed = backoff_cli::config::parse_config(manifest["config"].as_str().unwrap()).unwrap();
    assert_eq!(echoed.base_seed, 42);
}

#[test]
fn seed_and_format_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIM);
    let out = bin()
        .args(["simulate", "--seed", "7", "--format", "jsonl", "--out"])
        .arg(dir.path().join("alt"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("alt/summary.jsonl")).unwrap();
    assert!(text.lines().next().unwrap().starts_with("{\"replica\":0,\"seed\":7,"));
}

#[test]
fn failing_replicas_leave_the_rest_intact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "name = \"f\"\nlambda = 0.9\nhorizon = 12\nreplicas = 6\nbase_seed = 1\n[sequence]\nfamily = \"explicit\"\nprobs = [1.0, 0.5, 0.5]\n[process]\nkind = \"backoff\"\n[observers]\nwindow = 2\n",
    );
    assert_eq!(run(&["simulate"], &cfg).0, 2);
    let failures = std::fs::read_to_string(dir.path().join("out/failures.csv")).unwrap();
    let failed: Vec<u64> = failures.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(!failed.is_empty() && failed.len() < 6);
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let mut ok: Vec<u64> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    ok.dedup();
    assert_eq!(ok.len() + failed.len(), 6);
    assert!(ok.iter().all(|r| !failed.contains(r)));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SIM.replace("lambda = 0.5", "lambda = 1.5").replace("replicas = 2", "replicas = 0"));
    let (code, err) = run(&["simulate"], &cfg);
    assert_eq!(code, 1);
    assert!(err.contains("birth rate out of range") && err.contains("replicas"));
    let (code, _) = run(&["classify"], &write_config(dir.path(), SIM));
    assert_eq!(code, 1);
}

#[test]
fn hls_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let body = "name = \"h\"\nlambda = 0.2\nbase_seed = 5\n[sequence]\nfamily = \"explicit\"\nprobs = [1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9]\n[process]\nkind = \"backoff\"\n[hls_check]\nsamples = 3000\nlimit = 17\n";
    let cfg = write_config(dir.path(), body);
    assert_eq!(run(&["hls-check", "--synthetic-constants"], &cfg).0, 0);
    let mutated = write_config(dir.path(), &format!("{body}variant = \"skip_r2_zeroing\"\n"));
    assert_eq!(run(&["hls-check", "--synthetic-constants"], &mutated).0, 3);
}

#[test]
fn couple_and_veb_run_clean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &(SIM.replace("replicas = 2", "replicas = 3") + "[couple]\nlower = \"backoff\"\nlower_lambda = 0.2\n"),
    );
    assert_eq!(run(&["couple"], &cfg).0, 0);
    let text = std::fs::read_to_string(dir.path().join("out/couple.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    let veb = write_config(
        dir.path(),
        "name = \"v\"\nlambda = 0.005\nhorizon = 300\nreplicas = 1\n[sequence]\nfamily = \"binary_exponential\"\n[process]\nkind = \"veb\"\nj0 = 3\nlimit = 30\n",
    );
    assert_eq!(run(&["veb", "--synthetic-constants", "--format", "jsonl"], &veb).0, 0);
    let log = std::fs::read_to_string(dir.path().join("out/veb.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["record"], "summary");
    assert_eq!(last["i2_violations"], 0);
}

#[test]
fn plotdata_joins_analytic_and_empirical() {
    let dir = tempfile::tempdir().unwrap();
    let body = "name = \"j\"\nlambda = 0.5\nhorizon = 20\nreplicas = 50\n[sequence]\nfamily = \"explicit\"\nprobs = [1.0, 0.5, 0.5, 0.25]\n[process]\nkind = \"j_jammed\"\nj = 3\n[observers]\nbin_means = 3\n[trace]\nrecurrence = \"f\"\nj = 3\n";
    let cfg = write_config(dir.path(), body);
    assert_eq!(run(&["trace"], &cfg).0, 0);
    assert_eq!(run(&["simulate"], &cfg).0, 0);
    let out = dir.path().join("out");
    let status = bin()
        .args(["plotdata", "--series", "f_2,b_2", "--input"])
        .arg(out.join("trace.csv"))
        .arg("--input")
        .arg(out.join("bin_means.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 21);
    let bad = bin()
        .args(["plotdata", "--series", "nope", "--input"])
        .arg(out.join("trace.csv"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(1));
}
