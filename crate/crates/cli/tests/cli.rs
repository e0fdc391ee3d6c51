use std::fs;
use std::path::Path;
use std::process::Command;

fn lab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lab"));
    c.env_remove("OUTPUT_DIR").env_remove("THREADS");
    c
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.conf");
    fs::write(&p, text).unwrap();
    p
}

const SHE: &str = "[experiment]\nkind = she\nreplicas = 10\n[model]\nbeta = 0.1\n[schedule]\ntimes = 0.5\n";

#[test]
fn run_then_verify_then_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SHE);
    let out = dir.path().join("out");
    let st = lab().args(["she", "--config"]).arg(&conf).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    let manifest = out.join("manifest.json");
    assert_eq!(lab().args(["verify", "--manifest"]).arg(&manifest).status().unwrap().code(), Some(0));
    fs::write(out.join("she_summary.json"), "{}").unwrap();
    assert_eq!(lab().args(["verify", "--manifest"]).arg(&manifest).status().unwrap().code(), Some(1));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "kind = she\nkappa = 3.5\n");
    let o = lab().args(["she", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("κ ∈ (2, d)"));
    let conf = write_config(dir.path(), SHE);
    assert_eq!(lab().args(["homog", "--config"]).arg(&conf).status().unwrap().code(), Some(2));
    assert_eq!(lab().args(["she"]).status().unwrap().code(), Some(2));
    assert_eq!(lab().args(["she", "--config", "/nonexistent/x.conf"]).status().unwrap().code(), Some(2));
    let typo = write_config(dir.path(), "kind = she\nreplica = 3\n");
    let o = lab().args(["she", "--config"]).arg(&typo).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown keys: replica"));
}

#[test]
fn output_dir_from_environment_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SHE);
    let env_out = dir.path().join("env_out");
    let st = lab()
        .env("OUTPUT_DIR", &env_out)
        .args(["she", "--config"])
        .arg(&conf)
        .args(["--seed", "5", "--replicas", "3"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(env_out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn worker_counts_give_identical_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), SHE);
    let mut sums = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("t{threads}"));
        let st =
            lab().env("THREADS", threads).args(["she", "--config"]).arg(&conf).arg("--out").arg(&out).status().unwrap();
        assert_eq!(st.code(), Some(0));
        let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
        sums.push(m["files"].clone());
    }
    assert_eq!(sums[0], sums[1]);
    assert_eq!(lab().env("THREADS", "zero").args(["she", "--config"]).arg(&conf).status().unwrap().code(), Some(2));
}
