use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn dcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcbf")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: &str = r#"
[experiment]
trace_len = 1003
seeds = [0, 1]
speeds_kmh = [5.0]
tx_power_dbm = [0.0, 10.0, 20.0]
methods = ["outdated", "kf", "mlp", "dcbf_mlp"]

[predictor]
mlp_hidden = [8]

[training]
epochs = 3

[filter]
samples = 100
"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let o = dcbf(&["evaluate", "--config", "/no/such/dir/exp.toml", "--method", "outdated", "--power", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/dir/exp.toml"));
}

#[test]
fn malformed_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[experiment]\nseeds = \"zero\"\n").unwrap();
    let o = dcbf(&["report", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(p.to_str().unwrap()));
}

#[test]
fn evaluate_prints_a_single_value() {
    let o = dcbf(&["evaluate", "--method", "dcbf_mlp", "--power", "10", "--seed", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].trim().parse::<f64>().unwrap().is_finite());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn sweep_report_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();

    let o = dcbf(&["sweep", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("results.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "speed_kmh,tx_power_dbm,method,seed,nmse_db,runtime_s");
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 2 * 3 * 4);

    // Rerunning reproduces everything but the timing column.
    let first: Vec<Vec<String>> = rows.iter().map(|r| r[..5].to_vec()).collect();
    let o = dcbf(&["sweep", "--config", &cfg, "--out", out, "--sequential"]);
    assert!(o.status.success());
    let again: Vec<Vec<String>> = csv_rows(&csv).iter().map(|r| r[..5].to_vec()).collect();
    assert_eq!(first, again);

    // Report: one line per (method, power), aggregates recomputed here.
    let o = dcbf(&["report", "--config", &cfg, "--out", out]);
    assert!(o.status.success());
    let report = stdout(&o);
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "speed_kmh,method,tx_power_dbm,n,mean_nmse_db,std_nmse_db");
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r[2].clone(), r[1].parse::<f64>().unwrap().to_bits()))
            .or_default()
            .push(r[4].parse().unwrap());
    }
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), groups.len());
    for line in body {
        let f: Vec<&str> = line.split(',').collect();
        let vals = &groups[&(f[1].to_string(), f[2].parse::<f64>().unwrap().to_bits())];
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_eq!(f[3].parse::<usize>().unwrap(), vals.len());
        assert!((f[4].parse::<f64>().unwrap() - mean).abs() <= 1e-9, "{line}");
        assert!((f[5].parse::<f64>().unwrap() - std).abs() <= 1e-9, "{line}");
    }

    // The checkpoint shared by mlp and dcbf_mlp is the one a standalone
    // training run produces, and loading it reproduces both sweep cells.
    let stem = "mlp_speed5_seed1";
    let ckpt = dir.path().join("artifacts").join(format!("{stem}.ckpt"));
    let solo = tempfile::tempdir().unwrap();
    let o = dcbf(&["train", "--config", &cfg, "--out", solo.path().to_str().unwrap(), "--arch", "mlp", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(solo.path().join(format!("{stem}.ckpt"))).unwrap()
    );
    for method in ["mlp", "dcbf_mlp"] {
        let o = dcbf(&[
            "evaluate",
            "--config",
            &cfg,
            "--out",
            out,
            "--seed",
            "1",
            "--method",
            method,
            "--power",
            "20",
            "--checkpoint",
            &format!("artifacts/{stem}.ckpt"),
            "--offsets",
            &format!("artifacts/{stem}.offsets"),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let got: f64 = stdout(&o).trim().parse().unwrap();
        let want: f64 = rows
            .iter()
            .find(|r| r[2] == method && r[3] == "1" && r[1].parse::<f64>().unwrap() == 20.0)
            .unwrap()[4]
            .parse()
            .unwrap();
        assert_eq!(got, want, "{method}");
    }
}

#[test]
fn generate_then_evaluate_from_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().to_str().unwrap();
    let o = dcbf(&["generate", "--config", &cfg, "--out", out, "--seed", "3"]);
    assert!(o.status.success());
    assert!(dir.path().join("trace_speed5_seed3.txt").exists());
    let from_file = dcbf(&[
        "evaluate", "--config", &cfg, "--out", out, "--seed", "3", "--method", "kf", "--power", "0",
        "--trace", "trace_speed5_seed3.txt",
    ]);
    let direct = dcbf(&["evaluate", "--config", &cfg, "--out", out, "--seed", "3", "--method", "kf", "--power", "0"]);
    assert!(from_file.status.success() && direct.status.success());
    assert_eq!(stdout(&from_file), stdout(&direct));
}

#[test]
fn report_on_missing_csv_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcbf(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("results.csv"));
}
