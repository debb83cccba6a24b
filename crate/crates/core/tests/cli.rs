use std::path::Path;
use std::process::{Command, Output};

fn projcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projcomp"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROJCOMP_OUT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report_dir(o: &Output) -> std::path::PathBuf {
    let s = stdout(o);
    let line = s.lines().find_map(|l| l.strip_prefix("report: ")).expect("report path");
    Path::new(line).parent().unwrap().to_path_buf()
}

#[test]
fn clutter_run_prints_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let o = projcomp(tmp.path(), &["run", "exp_clutter", "--n", "10", "--q", "0.5", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("PASS") && s.contains("chi2=0.1 "), "{s}");
    let dir = tmp.path().join(report_dir(&o));
    let csv = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
}

#[test]
fn list_shows_every_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["run", "list"][..], &["list"][..]] {
        let o = projcomp(tmp.path(), args);
        assert_eq!(o.status.code(), Some(0));
        let s = stdout(&o);
        for name in ["exp_factorized", "exp_counterexample", "exp_bayes_binary", "exp_clutter", "exp_relaxed_fc", "exp_heuristic"] {
            assert!(s.contains(name));
        }
        assert!(s.contains("--n-samples"));
    }
}

#[test]
fn bad_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["run", "exp_missing"][..],
        &["run", "exp_clutter", "--bogus", "1"],
        &["run", "exp_clutter", "--n", "ten"],
        &["run", "exp_clutter", "stray"],
        &["frobnicate"],
    ] {
        let o = projcomp(tmp.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
    assert!(!tmp.path().join("runs").exists(), "nothing may run before validation");
}

#[test]
fn failed_verdict_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = projcomp(tmp.path(), &["run", "exp_relaxed_fc", "--eta-grid", "[1.5,2.0]", "--families", "30"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn counterexample_metrics_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["run", "exp_counterexample", "--a", "1", "--tau", "0.02", "--seed", "7"];
    let a = projcomp(tmp.path(), &[&args[..], &["--out", "a"]].concat());
    let b = projcomp(tmp.path(), &[&args[..], &["--out", "b"]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let ma = std::fs::read(tmp.path().join(report_dir(&a)).join("metrics.csv")).unwrap();
    let mb = std::fs::read(tmp.path().join(report_dir(&b)).join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.cfg"), "# sweep\nq = 0.25\nn = 6\nn-max = 8\n").unwrap();
    let o = projcomp(tmp.path(), &["run", "exp_clutter", "--config", "c.cfg", "--n", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(report_dir(&o)).join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["params"]["q"], 0.25);
    assert_eq!(report["params"]["n"], 5);
    assert_eq!(report["params"]["n_max"], 8);
    assert!(report_dir(&o).starts_with("runs"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_projcomp"))
        .args(["run", "exp_clutter", "--n", "5", "--n-max", "6"])
        .current_dir(tmp.path())
        .env("PROJCOMP_OUT", "from_env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(report_dir(&o).starts_with("from_env"));
}

#[test]
fn plot_renders_points_and_bins() {
    let tmp = tempfile::tempdir().unwrap();
    let o = projcomp(
        tmp.path(),
        &["run", "exp_factorized", "--n-samples", "300", "--steps", "16", "--out", "o"],
    );
    assert!(o.status.code().is_some());
    let dir = tmp.path().join(report_dir(&o));
    let p = projcomp(tmp.path(), &["plot", dir.to_str().unwrap(), "--coords", "1,3", "--bins", "17"]);
    assert_eq!(p.status.code(), Some(0), "{}", String::from_utf8_lossy(&p.stderr));
    let scatter = std::fs::read_to_string(dir.join("samples_scatter_1_3.svg")).unwrap();
    assert_eq!(scatter.matches("<circle").count(), 300);
    let hist = std::fs::read_to_string(dir.join("samples_hist_3.svg")).unwrap();
    assert_eq!(hist.matches("class=\"bar\"").count(), 17);

    let missing = projcomp(tmp.path(), &["plot", dir.to_str().unwrap(), "--file", "absent.csv"]);
    assert_ne!(missing.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.csv"));

    std::fs::write(dir.join("samples_empty.csv"), "x0,x1\n").unwrap();
    let empty = projcomp(tmp.path(), &["plot", dir.to_str().unwrap(), "--file", "samples_empty.csv"]);
    assert_ne!(empty.status.code(), Some(0));
}
