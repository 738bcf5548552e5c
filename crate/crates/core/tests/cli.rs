use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meanmatch"))
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(lambda_scale: f64) -> Value {
    json!({
        "rho": 0.04,
        "T": 1.0,
        "sideA": {"lambda": 20.0 * lambda_scale, "r_slope": 0.013, "h_slope": 0.6,
                  "density": {"family": "pareto_lognormal", "params": {"alpha": 1.8644, "nu": 6.5492, "tau": 0.44209}}},
        "sideB": {"lambda": 26.0 * lambda_scale, "r_slope": 0.05, "h_slope": 1.1,
                  "density": {"family": "generalized_pareto", "params": {"beta": 8.6348, "mu": 459.4388, "sigma": 835.2216}}},
        "grid": {"xmax": 7000.0, "nA": 40, "nB": 40, "nT": 100},
        "seed": 3,
        "simulate": {"agents_per_side": 2000, "replicates": 2, "bins": 5}
    })
}

fn no_match_config() -> Value {
    let mut c = small_config(1.0);
    for side in ["sideA", "sideB"] {
        c[side]["h_slope"] = json!(2.0);
        c[side]["r_slope"] = json!(0.08);
    }
    c
}

fn write_config(dir: &Path, name: &str, config: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn calibrate_shipped_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal");
    let o = run(&[
        "calibrate",
        "--data",
        data("earnings_quantiles.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pln: Value =
        serde_json::from_str(&fs::read_to_string(out.join("calibration_pareto_lognormal.json")).unwrap()).unwrap();
    let gp: Value =
        serde_json::from_str(&fs::read_to_string(out.join("calibration_generalized_pareto.json")).unwrap()).unwrap();
    let r = pln["rrmse"].as_f64().unwrap();
    assert!((0.0045..=0.0060).contains(&r), "{r}");
    assert_eq!(pln["family"], "pareto_lognormal");
    assert!(gp["rrmse"].as_f64().unwrap() < 0.004);
    assert!(stdout(&o).contains("pareto_lognormal"));

    let only = tmp.path().join("gp");
    let o = run(&[
        "calibrate",
        "--family",
        "gp",
        "--data",
        data("earnings_quantiles.csv").to_str().unwrap(),
        "--out",
        only.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&o), 0);
    let names: Vec<String> = fs::read_dir(&only)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["calibration_generalized_pareto.json"]);
}

#[test]
fn calibrate_empty_csv_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "prob,value\n").unwrap();
    let o = run(&[
        "calibrate",
        "--data",
        empty.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn solve_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(0.2));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m = manifest(&a);
    assert_eq!(m["converged"], true);
    assert_eq!(m["tool"], "meanmatch");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for name in [
        "V_A.csv",
        "V_B.csv",
        "f_A.csv",
        "f_B.csv",
        "residuals.csv",
        "config.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let trace = fs::read_to_string(a.join("residuals.csv")).unwrap();
    assert!(trace.starts_with("iter,E,E_VA,E_VB,E_fA,E_fB\n"));
    assert_eq!(trace.lines().count() as u64, m["iterations"].as_u64().unwrap() + 1);
    assert_eq!(m["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn solve_iteration_cap_exits_three_with_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(0.2);
    c["solver"] = json!({"max_iters": 1});
    let cfg = write_config(tmp.path(), "c.json", &c);
    let out = tmp.path().join("o");
    let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 3);
    assert_eq!(manifest(&out)["converged"], false);
    assert!(out.join("V_A.csv").exists());
}

#[test]
fn solve_without_meetings_converges_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(0.0);
    c["solver"] = json!({"sweep_mode": "gauss_seidel_in_time"});
    let cfg = write_config(tmp.path(), "c.json", &c);
    let out = tmp.path().join("o");
    let o = run(&["solve", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(code(&o), 0);
    assert!(manifest(&out)["iterations"].as_u64().unwrap() <= 3);
}

#[test]
fn config_errors_name_the_pointer() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(1.0);
    c["rho"] = json!(-1.0);
    let cfg = write_config(tmp.path(), "c.json", &c);
    let o = run(&["solve", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/rho"));
    let mut c = small_config(1.0);
    c["grid"]["nX"] = json!(3);
    let cfg = write_config(tmp.path(), "d.json", &c);
    let o = run(&["solve", "--config", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/grid/nX"));
    let o = run(&["solve", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn shipped_config_round_trips() {
    let text = fs::read_to_string(data("labor_market.json")).unwrap();
    let c = meanmatch::config::RunConfig::from_json_str(&text).unwrap();
    let canon = c.canonical_json();
    assert_eq!(
        meanmatch::config::RunConfig::from_json_str(&canon)
            .unwrap()
            .canonical_json(),
        canon
    );
    assert_eq!(c.market(), meanmatch::market::MarketParams::labor_market());
}

#[test]
fn check_reports_constants_and_conditions() {
    let o = run(&["check", "--config", data("labor_market.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let k_line = text.lines().find(|l| l.starts_with("k ")).unwrap();
    let vals: Vec<f64> = k_line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
    assert!(
        (vals[0] - 4.9923e-4).abs() < 1e-7 && (vals[1] - 2.4950e-3).abs() < 1e-7,
        "{k_line}"
    );
    assert!(text.contains("no-match = false"));
    assert!(text.contains("nonempty = false"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "n.json", &no_match_config());
    let o = run(&["check", "--config", &cfg]);
    assert!(stdout(&o).contains("no-match = true"));
}

#[test]
fn audit_flags_corrupted_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(0.2));
    let run_dir = tmp.path().join("run");
    assert_eq!(
        code(&run(&[
            "solve",
            "--config",
            &cfg,
            "--out",
            run_dir.to_str().unwrap(),
            "--quiet"
        ])),
        0
    );
    let audit_out = tmp.path().join("audit");
    let o = run(&[
        "check",
        "--audit",
        run_dir.to_str().unwrap(),
        "--out",
        audit_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    // negative density in one cell
    let path = run_dir.join("f_A.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[5].split(',').map(String::from).collect();
    cells[10] = "-1e-3".into();
    lines[5] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = run(&[
        "check",
        "--audit",
        run_dir.to_str().unwrap(),
        "--out",
        audit_out.to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    assert!(stdout(&o).contains("density_bounds[A]"));

    let o = run(&["check", "--audit", tmp.path().join("missing").to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}

#[test]
fn simulate_no_match_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "n.json", &no_match_config());
    let run_dir = tmp.path().join("run");
    assert_eq!(
        code(&run(&[
            "solve",
            "--config",
            &cfg,
            "--out",
            run_dir.to_str().unwrap(),
            "--quiet"
        ])),
        0
    );
    let sim = tmp.path().join("sim");
    let o = run(&[
        "simulate",
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
        "--events",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("matches 0"));
    let report: Value = serde_json::from_str(&fs::read_to_string(sim.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report["max_abs_dev_f"], 0.0);
    let events = fs::read_to_string(sim.join("events.csv")).unwrap();
    assert!(events.lines().skip(1).all(|l| l.ends_with(",failed_threshold")));
    assert!(sim.join("manifest.json").exists());

    let o = run(&[
        "simulate",
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
        "--agents",
        "0",
    ]);
    assert_eq!(code(&o), 1);
    let o = run(&["simulate", "--run", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn diagnose_exports_figure_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(0.2));
    let run_dir = tmp.path().join("run");
    assert_eq!(
        code(&run(&[
            "solve",
            "--config",
            &cfg,
            "--out",
            run_dir.to_str().unwrap(),
            "--quiet"
        ])),
        0
    );
    let out = tmp.path().join("fig");
    let o = run(&[
        "diagnose",
        "--run",
        run_dir.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hash = manifest(&run_dir)["config_hash"].as_str().unwrap().to_string();
    let f = fs::read_to_string(out.join("F.csv")).unwrap();
    assert_eq!(
        f.lines().next().unwrap(),
        format!(
            "# generated-by meanmatch {} config-hash {hash}",
            env!("CARGO_PKG_VERSION")
        )
    );
    for name in [
        "VA_slices.csv",
        "ratio.csv",
        "gA_bands.csv",
        "gB_bands.csv",
        "manifest.json",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn thread_cap_is_validated() {
    let o = bin()
        .env("MEANMATCH_THREADS", "zero")
        .args(["check", "--config", data("labor_market.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let o = bin()
        .env("MEANMATCH_THREADS", "1")
        .args([
            "check",
            "--config",
            data("labor_market.json").to_str().unwrap(),
            "--quiet",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}
