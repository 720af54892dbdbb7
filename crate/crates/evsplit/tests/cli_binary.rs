//! End-to-end checks of the compiled `evsplit` binary: subcommands, override
//! grammar, output files, and error reporting.

use std::path::PathBuf;
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evsplit"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("evsplit_bin_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &[&str] = &[
    "-s",
    "clients=3",
    "-s",
    "clients_per_round=3",
    "-s",
    "samples_per_class=12",
    "-s",
    "eval_samples_per_class=6",
    "-s",
    "rounds=2",
    "-s",
    "batch_size=4",
    "-s",
    "hidden_dim=4",
    "-s",
    "aux_hidden_dim=3",
];

#[test]
fn validate_prints_canonical_config() {
    let out = binary()
        .args(["validate", "-s", "seed=9", "-s", "rounds=5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 9"));
    assert!(text.contains("rounds = 5"));
    assert!(text.contains("ema_beta = 0.9"));
}

#[test]
fn validate_rejects_unknown_key_with_its_name() {
    let out = binary()
        .args(["validate", "-s", "bogus_key=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bogus_key"), "{err}");
}

#[test]
fn run_writes_the_four_artifacts() {
    let dir = temp_dir("run");
    let out = binary()
        .arg("run")
        .args(TINY)
        .args(["--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["metrics.csv", "summary.json", "partition.json", "csr.json"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_accuracy"].as_f64().unwrap() >= 0.0);
    assert_eq!(summary["config"]["clients"], 3);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn run_uses_config_file_with_flag_overrides_winning() {
    let dir = temp_dir("cfgfile");
    let cfg_path = dir.join("exp.cfg");
    std::fs::write(
        &cfg_path,
        "clients = 3\nclients_per_round = 3\nsamples_per_class = 12\n\
         eval_samples_per_class = 6\nrounds = 9\nbatch_size = 4\n\
         hidden_dim = 4\naux_hidden_dim = 3\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = binary()
        .args(["run", "--config", cfg_path.to_str().unwrap()])
        .args(["-s", "rounds=2"])
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3); // header + the two overridden rounds
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn ablate_emits_matrix_report() {
    let dir = temp_dir("ablate");
    let out = binary()
        .arg("ablate")
        .args(TINY)
        .args(["--num-seeds", "2", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report["variants"].as_array().unwrap().len(), 6);
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    let csv = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    // six per-run directories per variant seed
    assert!(dir
        .join("full")
        .join("seed_0")
        .join("summary.json")
        .exists());
    assert!(dir
        .join("wo_bcc")
        .join("seed_1")
        .join("metrics.csv")
        .exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn invalid_range_fails_with_field_and_bound() {
    let out = binary()
        .args(["run", "-s", "dirichlet_kappa=-1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("dirichlet_kappa") && err.contains("positive"),
        "{err}"
    );
}
