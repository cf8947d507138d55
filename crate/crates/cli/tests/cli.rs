use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rbmlmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbmlmc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(p).unwrap()
}

fn first_line(s: &str) -> String {
    format!("{}\n", s.lines().next().unwrap_or(""))
}

#[test]
fn levels_csv_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = rbmlmc(&[
            "levels", "--model", "ou", "--scheme", "euler", "--driver", "classic", "--lmax", "4",
            "--reps", "2000", "--seed", "7", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(first_line(&text), golden("levels_header.csv"));
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    for (l, line) in text.lines().skip(1).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], l.to_string());
        assert_eq!(cells[7], (1u64 << l).to_string());
        assert_eq!(cells[8], "0");
        // shortest round-trip decimals
        for c in &cells[1..] {
            let v: f64 = c.parse().unwrap();
            assert_eq!(&v.to_string(), c);
        }
    }
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_rbmlmc"))
            .env("RBMLMC_THREADS", threads)
            .args(["levels", "--model", "gbm", "--driver", "bit-lc", "--lmax", "3", "--reps", "5000"])
            .output()
            .unwrap()
    };
    let one = run("1");
    let three = run("3");
    assert!(one.status.success());
    assert_eq!(one.stdout, three.stdout);
    let bad = run("many");
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn levels_json_fields() {
    let o = rbmlmc(&[
        "levels", "--model", "cir", "--scheme", "milstein", "--driver", "bit-lc", "--levels", "2,3",
        "--reps", "500", "--format", "json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort_unstable();
    assert_eq!(keys, ["config", "rows", "total_wall_seconds"]);
    let row = v["rows"][0].as_object().unwrap();
    let mut fields: Vec<&str> = row.keys().map(String::as_str).collect();
    let header = golden("levels_header.csv");
    let mut want: Vec<&str> = header.trim().split(',').collect();
    fields.sort_unstable();
    want.sort_unstable();
    assert_eq!(fields, want);
    assert_eq!(v["rows"][1]["cost_bits"], 30.0);
    assert_eq!(v["config"]["scheme"], "milstein");
    assert_eq!(v["config"]["driver"], "bit-lc");
    assert_eq!(v["config"]["levels"], serde_json::json!([2, 3]));
}

#[test]
fn fixed_level_drivers_in_level_tables() {
    let o = rbmlmc(&["levels", "--model", "gbm", "--driver", "bit-iid", "--lmax", "3", "--reps", "100"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rbmlmc(&[
        "levels", "--model", "gbm", "--driver", "bit-iid", "--max-level", "4", "--lmax", "3", "--reps", "100",
    ]);
    assert!(o.status.success());
    let o = rbmlmc(&[
        "levels", "--model", "gbm", "--driver", "bit-bern", "--max-level", "2", "--lmax", "3", "--reps", "100",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rmse_grid_and_fit_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rmse.csv");
    let o = rbmlmc(&[
        "rmse", "--model", "ou", "--driver", "classic", "--eps", "0.2:0.1:2log", "--reps", "100",
        "--seed", "3", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(first_line(&text), golden("rmse_header.csv"));
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("0.2,"));
    assert!(text.lines().nth(2).unwrap().starts_with("0.1,"));

    let synthetic = dir.path().join("curve.csv");
    let mut csv = golden("rmse_header.csv");
    for e in [1e-2f64, 5e-3, 2e-3, 1e-3] {
        let cost = 2.0 * e.powi(-2) * (-e.ln()).powf(1.5);
        csv.push_str(&format!("{e},{e},{e},{e},{cost},{cost},0,5,0,100\n"));
    }
    fs::write(&synthetic, csv).unwrap();
    let o = rbmlmc(&["fit", "--model", "ou", "--input", synthetic.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(first_line(&text), golden("fit_header.csv"));
    let cells: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cells[0] - 2.0).abs() < 0.02 && (cells[1] - 1.5).abs() < 1e-9, "{cells:?}");

    let o = rbmlmc(&["fit", "--model", "ou", "--input", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "two points cannot be fitted");
}

#[test]
fn eps_grid_from_flags() {
    let o = rbmlmc(&[
        "rmse", "--model", "gbm", "--driver", "bit-lc", "--eps", "1e-1:5e-2:3log", "--reps", "100",
        "--format", "json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert_eq!(v["config"]["eps"][0], 0.1);
    assert_eq!(v["config"]["eps"][2], 0.05);
    assert!(v["rows"][0]["cost_bits"].as_f64().unwrap() > 0.0);
    assert_eq!(v["rows"][0]["cost_numbers"], 0.0);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["levels", "--model", "ou", "--bogus"][..],
        &["levels", "--model", "heston"],
        &["levels", "--model", "gbm", "--scheme", "milstein"],
        &["levels", "--model", "ou", "--driver", "sobol"],
        &["levels", "--model", "ou", "--format", "xml"],
        &["levels", "--model", "ou", "--reps", "1"],
        &["rmse", "--model", "ou", "--eps", "1:2"],
        &["rmse", "--model", "ou", "--reps", "10"],
        &["rmse", "--model", "ou", "--driver", "bit-iid", "--max-level", "4", "--reps", "100"],
        &["frobnicate"],
    ] {
        let o = rbmlmc(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn selftest_passes() {
    let o = rbmlmc(&["selftest"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
