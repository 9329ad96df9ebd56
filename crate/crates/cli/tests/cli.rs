//! End-to-end contracts of the driver: artifact content, preset behavior,
//! environment overrides, and binary exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use gfom_cli::config::{ConfigDraft, ExperimentConfig};
use gfom_cli::experiment::{run_experiment, run_sweep};
use gfom::wasserstein::ar_alpha_sq;

fn config_with(preset: &str, out: &Path, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut d = ConfigDraft::new();
    d.apply_preset(preset).unwrap();
    d.set("seed", "42");
    d.set("out", out.display().to_string());
    for (k, v) in overrides {
        d.set(k, *v);
    }
    d.finalize().unwrap()
}

/// Minimal CSV reader for the assertions below; no quoting is ever emitted.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name} in {header:?}"))
}

#[test]
fn linear_ar_distance_table_matches_the_geometric_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "linear-ar",
        dir.path(),
        &[("n", "90"), ("trials", "4"), ("psi_replicates", "40")],
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest.failures.is_empty());

    let (header, rows) = read_csv(&dir.path().join("wasserstein.csv"));
    assert_eq!(rows.len(), cfg.t_max);
    let step_col = column(&header, "step");
    let alpha_col = column(&header, "alpha_sq");
    let expected_col = column(&header, "expected_alpha_sq");
    for row in &rows {
        let step: usize = row[step_col].parse().unwrap();
        let alpha_sq: f64 = row[alpha_col].parse().unwrap();
        let echoed: f64 = row[expected_col].parse().unwrap();
        let expected = ar_alpha_sq(0.5, step);
        assert!(
            (alpha_sq - expected).abs() <= 1e-12,
            "step {step}: alpha_sq {alpha_sq} vs {expected}"
        );
        assert!((echoed - expected).abs() <= 1e-12);
        assert_eq!(row[column(&header, "trial")], "-1");
        assert_eq!(row[column(&header, "seed")], "42");
        assert_eq!(row[column(&header, "n")], "90");
        assert_eq!(row[column(&header, "t_max")], "4");
    }
}

#[test]
fn mismatched_covariance_scales_hit_the_exact_mismatch_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "mismatch-sweep",
        dir.path(),
        &[
            ("n", "120"),
            ("trials", "4"),
            ("psi_replicates", "40"),
            ("sigma_scale", "0.5,1.0,2.0"),
        ],
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert_eq!(manifest.blocks.len(), 3);
    for block in &manifest.blocks {
        let expected = (block.n as f64).sqrt() * (1.0 / block.sigma_scale - 1.0).abs();
        assert!(
            (block.psi2 - expected).abs() <= 1e-8 * expected.max(1.0),
            "scale {}: psi2 {} vs {}",
            block.sigma_scale,
            block.psi2,
            expected
        );
        assert!(
            block.psi1.abs() <= 1e-10,
            "mean side must stay matched, got psi1 = {}",
            block.psi1
        );
    }
}

#[test]
fn per_trial_rows_carry_identity_and_bound_ingredients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "tail-check",
        dir.path(),
        &[("n", "70"), ("trials", "6"), ("psi_replicates", "40")],
    );
    run_experiment(&cfg).unwrap();

    let (header, rows) = read_csv(&dir.path().join("coupling_errors.csv"));
    assert_eq!(rows.len(), 6);
    let residual_col = column(&header, "identity_residual");
    let status_col = column(&header, "status");
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[column(&header, "trial")], i.to_string());
        assert_eq!(row[status_col], "ok");
        let residual: f64 = row[residual_col].parse().unwrap();
        assert!(residual <= 1e-8, "trial {i}: residual {residual}");
    }

    let (eheader, erows) = read_csv(&dir.path().join("exceedance.csv"));
    assert_eq!(erows.len(), cfg.r_grid.len());
    for row in &erows {
        assert_eq!(row[column(&eheader, "trial")], "-1");
        assert_eq!(row[column(&eheader, "consistent")], "1");
    }
}

#[test]
fn tanh_chain_runs_through_the_driver_at_small_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "matched-amp-tanh",
        dir.path(),
        &[
            ("n", "40,60"),
            ("trials", "3"),
            ("se_replicates", "150"),
            ("psi_replicates", "40"),
        ],
    );
    let manifest = run_experiment(&cfg).unwrap();
    assert!(manifest.failures.is_empty());
    assert_eq!(manifest.blocks.len(), 2);
    for block in &manifest.blocks {
        assert!(block.median_total_error.unwrap().is_finite());
        assert!(block.max_identity_residual.unwrap() <= 1e-8);
    }
    assert_eq!(manifest.trial_seeds.len(), 6);
}

#[test]
fn oracle_preset_writes_a_passing_check_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "oracle-suite",
        dir.path(),
        &[("n", "60"), ("trials", "10"), ("se_replicates", "200")],
    );
    let manifest = run_experiment(&cfg).unwrap();
    let oracle = manifest.oracle.as_ref().unwrap();
    assert_eq!(oracle.failed, 0, "checks failed: {:?}", oracle.checks);

    let (header, rows) = read_csv(&dir.path().join("oracle_checks.csv"));
    assert_eq!(rows.len(), oracle.passed);
    let passed_col = column(&header, "passed");
    for row in &rows {
        assert_eq!(row[passed_col], "1");
        assert_eq!(row[column(&header, "trial")], "-1");
    }
}

#[test]
fn sweep_writes_one_subdirectory_per_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(
        "linear-ar",
        dir.path(),
        &[("n", "70,90"), ("trials", "3"), ("psi_replicates", "40")],
    );
    let manifests = run_sweep(&cfg).unwrap();
    assert_eq!(manifests.len(), 2);
    for n in [70, 90] {
        let sub = dir.path().join(format!("n{n:05}"));
        assert!(sub.join("coupling_errors.csv").is_file());
        assert!(sub.join("manifest.json").is_file());
    }
}

#[test]
fn binary_verify_passes_and_fault_injection_fails() {
    let exe = env!("CARGO_BIN_EXE_gfom");
    let ok = Command::new(exe)
        .args(["verify", "--seed", "3"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "verify failed:\n{stdout}");
    assert!(stdout.contains("checks passed"), "{stdout}");

    let bad = Command::new(exe)
        .args(["verify", "--seed", "3", "--fault-inject"])
        .output()
        .unwrap();
    let bad_stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(!bad.status.success(), "corrupted run must exit nonzero");
    assert!(bad_stdout.contains("FAIL coupling-identity"), "{bad_stdout}");
}

#[test]
fn binary_run_honors_config_file_and_environment_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.cfg");
    fs::write(
        &config_path,
        "preset = linear-ar\nseed = 5\nn = 60\ntrials = 2\npsi_replicates = 40\n",
    )
    .unwrap();
    let out_dir = dir.path().join("artifacts");

    let run = Command::new(env!("CARGO_BIN_EXE_gfom"))
        .args(["run", "--config"])
        .arg(&config_path)
        .env("GFOM_OUT", &out_dir)
        .env("GFOM_THREADS", "1")
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(out_dir.join("manifest.json").is_file());
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"threads\": \"1\""));
}

#[test]
fn binary_rejects_bad_configs_with_field_level_messages() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("broken.cfg");
    fs::write(&config_path, "seed = 5\nn = 3\nt_max = 6\n").unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_gfom"))
        .args(["run", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(!run.status.success());
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert!(stderr.contains("n:"), "stderr: {stderr}");

    let unknown = Command::new(env!("CARGO_BIN_EXE_gfom"))
        .args(["run", "--preset", "linear-ar", "--seed", "1"])
        .arg("--config")
        .arg({
            let p = dir.path().join("unknown.cfg");
            fs::write(&p, "wobble = 2\n").unwrap();
            p
        })
        .output()
        .unwrap();
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("wobble"));
}
