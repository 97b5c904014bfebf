use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use arraycal::io;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_arraycal"));
    cmd.env_remove("ARRAYCAL_OUT_DIR");
    cmd
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_scenario(dir: &Path, steps: usize) -> PathBuf {
    let text = format!(
        r#"
dt = 1.0
c = 343.0
seed = 5

[[arrays]]
position = [0.0, 0.0, 0.0]
euler = [0.0, 0.0, 0.0]
tau = 0.0
delta = 0.0

[[arrays]]
position = [2.0, 0.5, 0.3]
euler = [0.3, 0.8, 1.9]
tau = 0.02
delta = 1e-5

[[arrays]]
position = [-1.0, 2.0, 0.8]
euler = [2.2, 1.1, 0.4]
tau = 0.04
delta = -2e-5

[trajectory]
kind = "observable"
steps = {steps}
"#
    );
    let p = dir.join(format!("small_{steps}.toml"));
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn identical_seeds_give_identical_files() {
    let tmp = TempDir::new().unwrap();
    let sc = bundled("fig2_a");
    let sc = sc.to_str().unwrap();
    for run_dir in ["a", "b"] {
        let out = tmp.path().join(run_dir);
        assert_eq!(code(&run(&["simulate", "--scenario", sc], &out)), 0);
        assert_eq!(code(&run(&["rank-trace", "--scenario", sc], &out)), 0);
        assert_eq!(code(&run(&["check", "--scenario", sc], &out)), 0);
        assert_eq!(code(&run(&["crlb", "--scenario", sc], &out)), 0);
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8, "{names:?}");
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between runs");
    }
}

#[test]
fn seed_override_changes_measurements() {
    let tmp = TempDir::new().unwrap();
    let sc = bundled("fig2_a");
    let sc = sc.to_str().unwrap();
    run(&["simulate", "--scenario", sc], &tmp.path().join("a"));
    run(
        &["simulate", "--scenario", sc, "--seed", "7"],
        &tmp.path().join("b"),
    );
    let a = fs::read(tmp.path().join("a/measurements.toml")).unwrap();
    let b = fs::read(tmp.path().join("b/measurements.toml")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn malformed_scenario_exits_1_with_a_field_error() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = fs::read_to_string(bundled("fig2_a"))
        .unwrap()
        .replace("euler = [0.2, 0.4, 1.1]", "euler = [0.2, 0.4]");
    fs::write(&bad, text).unwrap();
    let o = run(&["check", "--scenario", bad.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("euler"), "{err}");

    let o = run(&["check", "--scenario", "/no/such/file.toml"], tmp.path());
    assert_eq!(code(&o), 1);
    let o = run(&["no-such-command"], tmp.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn four_steps_are_reported_as_too_few() {
    let tmp = TempDir::new().unwrap();
    let sc = small_scenario(tmp.path(), 4);
    let o = run(&["check", "--scenario", sc.to_str().unwrap()], tmp.path());
    assert_eq!(code(&o), 0);
    let report = fs::read_to_string(tmp.path().join("check_report.txt")).unwrap();
    assert!(report.contains("NOT OBSERVABLE"), "{report}");
    assert!(report.contains("too-few-steps"), "{report}");
    let verdict: toml::Value = fs::read_to_string(tmp.path().join("verdict.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(verdict["observable"].as_bool(), Some(false));
}

#[test]
fn crlb_covariance_has_one_row_per_unknown() {
    let tmp = TempDir::new().unwrap();
    let o = run(
        &[
            "crlb",
            "--scenario",
            bundled("fig2_a").to_str().unwrap(),
            "--dump-fim",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cov = io::parse_matrix_csv(
        &fs::read_to_string(tmp.path().join("covariance.csv")).unwrap(),
        "cov",
    )
    .unwrap();
    assert_eq!(cov.shape(), (116, 116));
    let fim = io::parse_matrix_csv(
        &fs::read_to_string(tmp.path().join("fim.csv")).unwrap(),
        "fim",
    )
    .unwrap();
    assert_eq!(fim.shape(), (116, 116));
    for i in 0..116 {
        assert!(cov[(i, i)] > 0.0);
    }
}

#[test]
fn crlb_on_a_degenerate_path_writes_the_null_space() {
    let tmp = TempDir::new().unwrap();
    let o = run(
        &[
            "crlb",
            "--scenario",
            bundled("fig3_collinear").to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!tmp.path().join("covariance.csv").exists());
    let null = io::parse_matrix_csv(
        &fs::read_to_string(tmp.path().join("null_space.csv")).unwrap(),
        "null",
    )
    .unwrap();
    assert_eq!(null.nrows(), 116);
    assert_eq!(null.ncols(), 10);
}

#[test]
fn noise_free_calibration_recovers_the_truth() {
    let tmp = TempDir::new().unwrap();
    let sc = bundled("fig2_a");
    let sc = sc.to_str().unwrap();
    let o = run(&["simulate", "--scenario", sc, "--noise-free"], tmp.path());
    assert_eq!(code(&o), 0);
    let meas = tmp.path().join("measurements.toml");
    let o = run(
        &[
            "calibrate",
            "--scenario",
            sc,
            "--measurements",
            meas.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let file = io::load_scenario(Path::new(sc)).unwrap();
    let truth = arraycal::jacobian::StateVector::from_scenario(&file.scenario);
    let est = io::load_state(&tmp.path().join("estimate.toml")).unwrap();
    let err = arraycal::calibrate::state_difference(&est, &truth).amax();
    assert!(err < 1e-6, "max parameter error {err}");
    assert!(tmp.path().join("convergence.csv").exists());
    assert!(tmp.path().join("calibrate_manifest.toml").exists());
}

#[test]
fn existing_outputs_need_force() {
    let tmp = TempDir::new().unwrap();
    let sc = bundled("fig2_a");
    let sc = sc.to_str().unwrap();
    assert_eq!(code(&run(&["rank-trace", "--scenario", sc], tmp.path())), 0);
    assert_eq!(code(&run(&["rank-trace", "--scenario", sc], tmp.path())), 1);
    assert_eq!(
        code(&run(
            &["rank-trace", "--scenario", sc, "--force"],
            tmp.path()
        )),
        0
    );
}

#[test]
fn repro_fig_writes_one_trace_per_scenario() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["repro-fig", "fig4"], tmp.path());
    assert_eq!(code(&o), 0);
    for name in ["fig4_collinear_array2", "fig4_gimbal"] {
        let text = fs::read_to_string(tmp.path().join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 21, "{name}");
    }
}
