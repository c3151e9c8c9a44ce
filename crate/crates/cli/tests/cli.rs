//! End-to-end runs of the `confscale` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confscale::adjust::{tprs_outcome_path, NestedBasis};
use confscale::selection::select;
use confscale::{Cohort, Grid, Rule};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_confscale"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn header(p: &Path) -> String {
    read(p).lines().next().unwrap().to_string()
}

/// Deterministic pseudo-noise in [-0.5, 0.5).
fn noise(i: usize) -> f64 {
    let h = (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17) ^ 0x2545_f491_4f6c_dd1d;
    (h % 1_000_000) as f64 / 1_000_000.0 - 0.5
}

struct Data {
    dir: tempfile::TempDir,
}

impl Data {
    /// 20 x 20 unit-square grid, every cell observed once. The outcome is
    /// `beta * x + confounding * f + noise` with `f` a smooth surface.
    fn new(beta: f64, confounding: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::unit_square(20, 20).unwrap();
        let mut exposure = String::from("u,v,value\n");
        let mut cohort = String::from("id,u,v,x,y\n");
        for s in 0..grid.cells() {
            let [u, v] = grid.coords(s);
            let f = (2.0 * u).sin() + v * v;
            let x = 0.8 * f + (9.0 * u).sin() * (7.0 * v).cos() + 0.5 * noise(s);
            let y = beta * x + confounding * f + 0.1 * noise(s + 1000);
            exposure.push_str(&format!("{u},{v},{x}\n"));
            cohort.push_str(&format!("{s},{u},{v},{x},{y}\n"));
        }
        fs::write(dir.path().join("exposure.csv"), exposure).unwrap();
        fs::write(dir.path().join("cohort.csv"), cohort).unwrap();
        Self { dir }
    }

    fn file(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn unconfounded_tprs_path_recovers_effect() {
    let d = Data::new(2.0, 0.0);
    let out = d.out("run");
    let o = run(&["adjust", "--cohort", &d.file("cohort.csv"), "--grid", "20x20", "--basis", "tprs", "--df-grid", "3:12,20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&out.join("estimates.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "basis,m,k_hat,beta,se,ci_lo,ci_hi");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 11);
    for r in &rows {
        assert_eq!(r[0], "tprs");
        let beta: f64 = r[3].parse().unwrap();
        assert!((beta - 2.0).abs() < 0.02, "m {} beta {beta}", r[1]);
        assert!(r[2] == "undefined" || r[2].parse::<f64>().is_ok());
    }
    let cfg: serde_json::Value = serde_json::from_str(&read(&out.join("config.json"))).unwrap();
    assert_eq!(cfg["invocation"]["command"]["adjust"]["basis"], "tprs");
}

#[test]
fn rule_selection_matches_library() {
    let d = Data::new(1.0, 1.5);
    let out = d.out("sel");
    let o = run(&["adjust", "--cohort", &d.file("cohort.csv"), "--grid", "20x20", "--basis", "tprs", "--df-grid", "3:15", "--rule", "bic-ne", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let chosen: serde_json::Value = serde_json::from_str(&read(&out.join("selection.json"))).unwrap();
    assert!(chosen["estimate"]["k_hat"].is_f64());

    let grid = Grid::unit_square(20, 20).unwrap();
    let cohort = Cohort::read_csv(fs::File::open(d.file("cohort.csv")).unwrap(), &grid).unwrap();
    let dfs: Vec<usize> = (3..=15).collect();
    let basis = NestedBasis::tprs_for_cells(&grid, cohort.location_index(), 15).unwrap();
    let lib = select(&tprs_outcome_path(&cohort, &basis, &dfs).unwrap(), Rule::BicNe, None).unwrap();
    assert_eq!(chosen["tuning"].as_f64().unwrap(), lib.tuning);
    assert!((chosen["estimate"]["beta_hat"].as_f64().unwrap() - lib.estimate.beta_hat).abs() < 1e-12);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("bic-ne") && stdout.contains("k_hat"));

    // Every applicable rule on the stored path.
    let table = d.out("table");
    let o = run(&["select", "--path", out.join("path.json").to_str().unwrap(), "--out", table.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&table.join("selection.csv"));
    assert_eq!(text.lines().next().unwrap(), "rule,basis,m,k_hat,beta,se,ci_lo,ci_hi,no_knee");
    let rules: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rules, ["aic", "bic", "aic-ne", "bic-ne", "mse", "knee"]);
    assert_eq!(header(&table.join("criteria.csv")), "rule,m,value");
}

#[test]
fn filter_paths_run_end_to_end() {
    let d = Data::new(1.0, 1.0);
    for (basis, extra) in [("fourier", ["--cutoff-grid", "1:4"]), ("wavelet", ["--level-grid", "0:2"])] {
        let out = d.out(basis);
        let o = run(&[
            "adjust", "--cohort", &d.file("cohort.csv"), "--exposure", &d.file("exposure.csv"), "--grid", "20x20",
            "--basis", basis, extra[0], extra[1], "--rule", "aic", "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{basis}: {}", stderr(&o));
        let rows = read(&out.join("estimates.csv")).lines().count() - 1;
        assert_eq!(rows, if basis == "fourier" { 4 } else { 3 });
    }
}

#[test]
fn malformed_inputs_exit_with_two() {
    let d = Data::new(1.0, 0.0);
    let bad = d.out("bad.csv");
    fs::write(&bad, "id,u,v,y\n0,0.1,0.1,1.0\n").unwrap();
    let o = run(&["adjust", "--cohort", bad.to_str().unwrap(), "--grid", "20x20", "--basis", "tprs", "--out", d.out("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`x`"), "{}", stderr(&o));

    fs::write(&bad, "id,u,v,x,y\n0,0.1,0.1,1.0,2\n1,0.2,0.3,abc,1\n").unwrap();
    let o = run(&["adjust", "--cohort", bad.to_str().unwrap(), "--grid", "20x20", "--basis", "tprs", "--out", d.out("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = run(&["adjust", "--cohort", &d.file("cohort.csv"), "--grid", "20x20", "--basis", "tprs", "--level", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["adjust", "--cohort", &d.file("cohort.csv"), "--grid", "20x20", "--basis", "fourier", "--out", d.out("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--exposure"));
    let o = run(&["bandwidth", "--grid", "12", "--basis", "wavelet"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["simulate", "--sigma-eps", "-1", "--out", d.out("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exposure_in_basis_span_exits_with_three() {
    let d = Data::new(1.0, 0.0);
    let grid = Grid::unit_square(20, 20).unwrap();
    let mut text = String::from("id,u,v,x,y\n");
    for s in 0..grid.cells() {
        let [u, v] = grid.coords(s);
        text.push_str(&format!("{s},{u},{v},{},{}\n", 1.0 + 2.0 * u - v, noise(s)));
    }
    let p = d.out("affine.csv");
    fs::write(&p, text).unwrap();
    let o = run(&["adjust", "--cohort", p.to_str().unwrap(), "--grid", "20x20", "--basis", "tprs", "--df", "5", "--out", d.out("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn bandwidth_rows(args: &[&str], out: &Path) -> Vec<(String, String)> {
    let mut full = vec!["bandwidth"];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--out", out.to_str().unwrap()]);
    let o = run(&full);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&out.join("bandwidth.csv"));
    assert_eq!(text.lines().next().unwrap(), "basis,m,k_hat");
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].to_string())
        })
        .collect()
}

#[test]
fn bandwidth_tables() {
    let dir = tempfile::tempdir().unwrap();
    let rows = bandwidth_rows(&["--grid", "1024x1024", "--basis", "wavelet", "--level-grid", "0:9"], &dir.path().join("w"));
    assert_eq!(rows.len(), 10);
    for (l, (m, k)) in rows.iter().enumerate() {
        assert_eq!(m, &l.to_string());
        assert_eq!(k.parse::<f64>().unwrap(), (-(l as f64)).exp2());
    }

    let rows = bandwidth_rows(&["--grid", "128x128", "--basis", "fourier", "--cutoff-grid", "1,2,6"], &dir.path().join("f"));
    assert_eq!(rows[0].1, "undefined");
    assert_eq!(rows[1].1, "undefined");
    assert!(rows[2].1.parse::<f64>().unwrap() > 0.0);

    let rows = bandwidth_rows(&["--grid", "128x128", "--basis", "tprs", "--df-grid", "5,10,20,50,100"], &dir.path().join("t"));
    let k: Vec<f64> = rows.iter().map(|r| r.1.parse().unwrap()).collect();
    assert!(k.windows(2).all(|w| w[1] < w[0]), "{k:?}");
}

#[test]
fn desk_simulation_is_biased_by_construction_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let args = ["simulate", "--confounder", "f1", "--basis", "unadjusted", "--seed", "7", "--out", out.to_str().unwrap()];
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let names = ["summary.csv", "replications.csv", "config.json"];
    let first: Vec<String> = names.iter().map(|n| read(&out.join(n))).collect();
    assert_eq!(
        first[0].lines().next().unwrap(),
        "confounder,method,tuning,reps,mean,bias,sd,mean_se,mse,coverage,type1_error"
    );
    assert_eq!(first[1].lines().next().unwrap(), "rep,method,tuning,beta,se,ci_lo,ci_hi,chosen");
    let row: Vec<&str> = first[0].lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[0], row[1], row[3]), ("f1", "unadjusted", "200"));
    let mean: f64 = row[4].parse().unwrap();
    assert!((mean - 1.2).abs() < 0.03, "mean {mean}");
    assert_eq!(row[10], "");

    assert!(run(&args).status.success());
    for (n, before) in names.iter().zip(&first) {
        assert_eq!(&read(&out.join(n)), before, "{n} changed between runs");
    }
}

#[test]
fn zero_effect_reports_type_one_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("null");
    let o = run(&[
        "simulate", "--beta", "0", "--grid", "32x32", "--n", "300", "--replications", "20", "--basis", "unadjusted,fourier",
        "--cutoff-grid", "1:6", "--rule", "aic,knee", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&out.join("summary.csv"));
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 1 + 6 + 2);
    for r in &rows {
        let t1: f64 = r[10].parse().unwrap();
        assert!((0.0..=1.0).contains(&t1));
    }
    assert!(rows.iter().any(|r| r[2] == "rule:knee"));
}
