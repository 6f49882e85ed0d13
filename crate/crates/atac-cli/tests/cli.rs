//! End-to-end checks of the command-line surface: artifact layout, report
//! contents, config validation flags, and rerun determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_atacsim"))
}

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn out_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("atacsim-cli-test-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn report_value(report: &str, key: &str) -> f64 {
    for line in report.lines() {
        for field in line.split_whitespace() {
            if let Some(v) = field.strip_prefix(&format!("{key}=")) {
                return v.parse().unwrap_or_else(|e| panic!("{key}: {e}"));
            }
        }
    }
    panic!("missing {key} in report:\n{report}");
}

#[test]
fn scan_reports_the_narrow_crossing_splitting() {
    let out = out_dir("scan-e");
    let status = bin()
        .args(["--manifold", &fixture("fig1_path.cfg"), "--out", out.to_str().unwrap()])
        .args(["scan", "--crossing", "E", "--at-b0"])
        .status()
        .unwrap();
    assert!(status.success());
    let report = read(&out.join("peak_report.txt"));
    let peak = report_value(&report, "peak_freq_mhz");
    assert!((peak - 2.36).abs() < 0.01, "peak {peak}");
    assert!(out.join("scan.csv").exists());
    assert!(out.join("run_manifest.txt").exists());
    let csv = read(&out.join("scan.csv"));
    assert!(csv.starts_with("# config_hash="));
    assert!(csv.lines().nth(2).unwrap().starts_with("freq_mhz,transfer"));
}

#[test]
fn zero_amplitude_transfer_reports_zero_efficiency() {
    let out = out_dir("sim-zero");
    let status = bin()
        .args(["--manifold", &fixture("crossing_a.cfg"), "--out", out.to_str().unwrap()])
        .args(["simulate", "--crossing", "A", "--brf", "0"])
        .status()
        .unwrap();
    assert!(status.success());
    let report = read(&out.join("transfer_report.txt"));
    assert!(report_value(&report, "efficiency") < 1e-3);
    // Trace carries the full column contract.
    let trace = read(&out.join("trace.csv"));
    assert!(trace
        .lines()
        .nth(2)
        .unwrap()
        .starts_with("time_us,b_gauss,pop_b1,pop_b2,pop_upper_dressed,pop_lower_dressed,norm"));
}

#[test]
fn plan_emits_eleven_actions_and_a_schedule() {
    let out = out_dir("plan");
    let status = bin()
        .args(["--manifold", &fixture("fig1_path.cfg"), "--out", out.to_str().unwrap()])
        .args(["plan", "--from", "feshbach", "--to", "nu5"])
        .status()
        .unwrap();
    assert!(status.success());
    let plan = read(&out.join("plan.txt"));
    assert!(plan.contains("actions (11 total):"));
    assert!(plan.contains("diabatic-jump"));
    assert!(plan.contains("survival_estimate:"));
    let schedule = read(&out.join("schedule.csv"));
    assert!(schedule
        .lines()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .starts_with("time_ms,B_gauss,rf_amplitude_g,rf_freq_mhz"));
}

#[test]
fn unknown_config_keys_fail_strict_and_pass_lax() {
    let dir = out_dir("lax");
    let cfg = dir.join("odd.cfg");
    let text = std::fs::read_to_string(fixture("crossing_a.cfg")).unwrap();
    std::fs::write(&cfg, format!("mystery_knob = 3\n{text}")).unwrap();

    let strict = bin()
        .args(["--manifold", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .args(["scan", "--crossing", "A", "--at-b0"])
        .output()
        .unwrap();
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stderr).contains("mystery_knob"));

    let lax = bin()
        .args(["--manifold", cfg.to_str().unwrap(), "--lax", "--out", dir.to_str().unwrap()])
        .args(["scan", "--crossing", "A", "--at-b0"])
        .output()
        .unwrap();
    assert!(lax.status.success());
    assert!(String::from_utf8_lossy(&lax.stdout).contains("mystery_knob"));
}

#[test]
fn fit_hyperbola_round_trips_external_points() {
    let dir = out_dir("hyp");
    let input = dir.join("points.csv");
    let mut text = String::from("b_gauss,splitting_mhz\n");
    for k in 0..12 {
        let b: f64 = 1001.4 - 2.0 + 0.35 * k as f64;
        let y = (13.3321f64.powi(2) + (2.8 * (b - 1001.4)).powi(2)).sqrt();
        text.push_str(&format!("{b},{y}\n"));
    }
    std::fs::write(&input, text).unwrap();
    let status = bin()
        .args(["--out", dir.to_str().unwrap()])
        .args(["fit-hyperbola", "--input", input.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let report = read(&dir.join("hyperbola_report.txt"));
    assert!((report_value(&report, "delta_min_mhz") - 13.3321).abs() < 1e-5);
    assert!((report_value(&report, "b0_gauss") - 1001.4).abs() < 1e-4);
    let dat = read(&dir.join("splitting_vs_field.dat"));
    assert!(dat.contains("b_gauss,splitting_mhz,hyperbola_fit_mhz"));
}

#[test]
fn unknown_crossing_id_fails_with_a_named_error() {
    let out = out_dir("badid");
    let output = bin()
        .args(["--manifold", &fixture("crossing_a.cfg"), "--out", out.to_str().unwrap()])
        .args(["scan", "--crossing", "Z", "--at-b0"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("Z"));
}

#[test]
fn seeded_reruns_are_byte_identical() {
    let (a, b) = (out_dir("det-a"), out_dir("det-b"));
    for out in [&a, &b] {
        let status = bin()
            .args(["--manifold", &fixture("crossing_a.cfg"), "--out", out.to_str().unwrap()])
            .args(["--seed", "42"])
            .args(["ramsey", "--crossing", "A", "--noise", "--detuning-khz", "6"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        std::fs::read(a.join("fringe.csv")).unwrap(),
        std::fs::read(b.join("fringe.csv")).unwrap(),
        "same seed must give byte-identical fringe data"
    );
    assert_eq!(
        std::fs::read(a.join("fringe_report.txt")).unwrap(),
        std::fs::read(b.join("fringe_report.txt")).unwrap()
    );

    let c = out_dir("det-c");
    let status = bin()
        .args(["--manifold", &fixture("crossing_a.cfg"), "--out", c.to_str().unwrap()])
        .args(["--seed", "43"])
        .args(["ramsey", "--crossing", "A", "--noise", "--detuning-khz", "6"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(
        std::fs::read(a.join("fringe.csv")).unwrap(),
        std::fs::read(c.join("fringe.csv")).unwrap(),
        "different seeds must change the sampled noise"
    );
}

#[test]
fn lz_fit_emits_amplitude_curve_with_model_column() {
    let out = out_dir("lzfit");
    let status = bin()
        .args(["--manifold", &fixture("crossing_a.cfg"), "--out", out.to_str().unwrap()])
        .args(["lz-fit", "--crossing", "A", "--points", "6", "--brf-max", "0.12", "--rwa"])
        .status()
        .unwrap();
    assert!(status.success());
    let dat = read(&out.join("efficiency_vs_brf.dat"));
    assert!(dat.contains("brf_g,efficiency_sim,efficiency_lz_fit"));
    let report = read(&out.join("lz_fit_report.txt"));
    let moment = report_value(&report, "moment_mhz_per_g");
    assert!(moment > 0.5 && moment < 3.0, "moment {moment}");
}
