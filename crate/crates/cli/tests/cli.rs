use std::path::Path;
use std::process::Command;

fn vfl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vfl"))
}

const SMALL: &str = "
[model]
t_final = 0.01
dt = 0.0025
grid_m = 32

[study]
n_list = 16, 32
ensembles = 2
samples = 4
k_stat = 8
force = mesh
mesh = 32
phi_list = cos_x1

[run]
master_seed = 11
snapshot_stride = 2
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("scenario.cfg");
    std::fs::write(&path, SMALL).unwrap();
    path
}

#[test]
fn mean_field_writes_snapshots_noise_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let status = vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .arg("mean-field")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("w_path.vflw").exists());
    assert!(out.join("mean_field/monitors.csv").exists());
    assert!(out.join("mean_field/v_000000.vflf").exists());
    assert!(out.join("manifest.json").exists());
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"command\": \"mean-field\""));
    assert!(manifest.contains("scenario_hash"));
}

#[test]
fn replay_reproduces_mean_field_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    assert!(vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .arg("mean-field")
        .status()
        .unwrap()
        .success());
    let replay_out = dir.path().join("replayed");
    let status = vfl()
        .args(["--out-dir", replay_out.to_str().unwrap()])
        .arg("replay")
        .arg(out.join("manifest.json"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(status.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("match: w_path.vflw"));
    assert!(!stdout.contains("MISMATCH"));
}

#[test]
fn particles_conditional_on_persisted_w_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mf_out = dir.path().join("mf");
    assert!(vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", mf_out.to_str().unwrap()])
        .arg("mean-field")
        .status()
        .unwrap()
        .success());
    let p_out = dir.path().join("p");
    let status = vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", p_out.to_str().unwrap()])
        .args(["particles", "--n", "16", "--ensemble", "1", "--w-path"])
        .arg(mf_out.join("w_path.vflw"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(p_out.join("particles/traj_e0001.vflp").exists());
    assert!(p_out.join("particles/series_e0001.csv").exists());
}

#[test]
fn fluct_limit_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let status = vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .arg("fluct-limit")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("fluct/eta_final_e0000.vflf").exists());
    assert!(out.join("fluct/series_e0000.csv").exists());
}

#[test]
fn study_and_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    // interaction off on a uniform density: the coupling gate passes trivially
    // only via real decay, so just check the artifacts and exit contract here
    let status = vfl()
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
        .args(["study", "clt0"])
        .args(["--study.n_list=256", "--study.samples=120"])
        .status()
        .unwrap();
    let code = status.code().unwrap();
    assert!(code == 0 || code == 2, "unexpected exit code {code}");
    assert!(out.join("result_table.csv").exists());
    assert!(out.join("summary.json").exists());
    let report = vfl()
        .args(["--out-dir", out.to_str().unwrap()])
        .arg("report")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("study clt0"));
}

#[test]
fn config_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[study]\nn_list = 512, 256\n").unwrap();
    let status = vfl()
        .args(["--config", cfg.to_str().unwrap()])
        .arg("mean-field")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    // unknown study kind is also a configuration error
    let status = vfl().args(["study", "bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn seed_flag_overrides_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, seed) in [(&out_a, "11"), (&out_b, "12")] {
        assert!(vfl()
            .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
            .args(["--seed", seed])
            .arg("mean-field")
            .status()
            .unwrap()
            .success());
    }
    let a = std::fs::read(out_a.join("w_path.vflw")).unwrap();
    let b = std::fs::read(out_b.join("w_path.vflw")).unwrap();
    assert_ne!(a, b);
}
