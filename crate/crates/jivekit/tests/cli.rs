//! Black-box tests of the command-line interface and its exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_jivekit")
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn toy_decompose_succeeds_with_additivity() {
    let out_dir = tempfile::tempdir().unwrap();
    let manifest = repo_root().join("data/toy/manifest.json");
    let config = repo_root().join("data/toy/config.json");
    let out = run(&[
        "decompose",
        "--manifest",
        manifest.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["schema_version"], "1");
    assert!(report["additivity_max_error"].as_f64().unwrap() < 1e-8);
    for name in ["expr", "meth", "mirna"] {
        for tag in ["joint", "individual", "noise"] {
            assert!(out_dir.path().join(format!("{name}_{tag}.csv")).exists());
        }
    }
    assert!(out_dir.path().join("joint_scores.csv").exists());
    assert!(out_dir.path().join("variance_explained.tsv").exists());
}

#[test]
fn mismatched_subject_counts_exit_2_naming_block() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "id,s1,s2,s3\nv1,1,2,3\nv2,2,1,4\n").unwrap();
    fs::write(dir.path().join("b.csv"), "id,s1,s2\nw1,1,2\nw2,3,4\n").unwrap();
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"schema_version":"1","blocks":[
            {"name":"alpha","csv_path":"a.csv","orientation":"variables-in-rows"},
            {"name":"beta","csv_path":"b.csv","orientation":"variables-in-rows"}]}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("config.json"),
        r#"{"schema_version":"1","initial_ranks":[1,1],"backend":"classical"}"#,
    )
    .unwrap();
    let out = run(&[
        "decompose",
        "--manifest",
        dir.path().join("manifest.json").to_str().unwrap(),
        "--config",
        dir.path().join("config.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("beta"), "{}", stderr_of(&out));
}

fn tiny_study(dir: &Path) -> PathBuf {
    let path = dir.join("study.json");
    fs::write(
        &path,
        r#"{
  "schema_version": "1",
  "generator": {"n": 12, "p": [10, 9], "joint_rank": 1, "individual_ranks": [1, 1],
                "signal_scale": 5.0, "joint_scale_boost": 1.3, "noise_sd": 0.1, "seed": 11},
  "outliers": {"configuration": "O1",
               "distribution": {"kind": "fixed", "mean": 10.0, "sd": 2.0},
               "observation_fraction": 0.2, "seed": 22},
  "replications": 3,
  "ajive": {"initial_ranks": [2, 2], "backend": "classical",
            "segmentation": {"n_resamples": 20, "quantile": 0.95, "seed": 5}},
  "methods": ["classical"]
}"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_then_report_round_trips_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let study = tiny_study(dir.path());
    let sim_out = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--study",
        study.to_str().unwrap(),
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));

    let rep_out = dir.path().join("rep");
    let out = run(&[
        "report",
        "--input",
        sim_out.join("study_report.json").to_str().unwrap(),
        "--out",
        rep_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    for tsv in ["ranks_median.tsv", "sre.tsv", "auc.tsv", "variance.tsv"] {
        let a = fs::read(sim_out.join(tsv)).unwrap();
        let b = fs::read(rep_out.join(tsv)).unwrap();
        assert_eq!(a, b, "{tsv} differs after round trip");
    }
}

#[test]
fn simulate_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let study = tiny_study(dir.path());
    let out1 = dir.path().join("w1");
    let out2 = dir.path().join("w2");
    for (out, workers) in [(&out1, "1"), (&out2, "2")] {
        let r = run(&[
            "simulate",
            "--study",
            study.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert!(r.status.success(), "{}", stderr_of(&r));
    }
    for f in ["study_report.json", "ranks_median.tsv", "sre.tsv", "auc.tsv", "variance.tsv"] {
        let a = fs::read_to_string(out1.join(f)).unwrap();
        let b = fs::read_to_string(out2.join(f)).unwrap();
        // the config echoes the worker count; ignore that one field
        let a = a.replace("\"parallel_workers\": 1", "\"parallel_workers\": 0");
        let b = b.replace("\"parallel_workers\": 2", "\"parallel_workers\": 0");
        assert_eq!(a, b, "{f} differs between worker counts");
    }
}

#[test]
fn zero_replications_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let study = tiny_study(dir.path());
    let text = fs::read_to_string(&study)
        .unwrap()
        .replace("\"replications\": 3", "\"replications\": 0");
    fs::write(&study, text).unwrap();
    let out = run(&[
        "simulate",
        "--study",
        study.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_rejects_truncated_json_and_old_schema() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("truncated.json");
    fs::write(&bad, "{\"schema_version\": \"1\", \"config\"").unwrap();
    let out = run(&[
        "report",
        "--input",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let study = tiny_study(dir.path());
    let sim_out = dir.path().join("sim");
    let out = run(&[
        "simulate",
        "--study",
        study.to_str().unwrap(),
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report_path = sim_out.join("study_report.json");
    let text = fs::read_to_string(&report_path)
        .unwrap()
        .replacen("\"schema_version\": \"1\"", "\"schema_version\": \"0\"", 1);
    fs::write(&report_path, text).unwrap();
    let out = run(&[
        "report",
        "--input",
        report_path.to_str().unwrap(),
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("0") && err.contains("1"), "{err}");
}

#[test]
fn backend_and_seed_overrides_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let study = tiny_study(dir.path());
    let out = run(&[
        "simulate",
        "--study",
        study.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
        "--seed",
        "12345",
        "--backend",
        "robust",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/study_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["config"]["generator"]["seed"], 12345);
    assert_eq!(report["config"]["methods"][0], "robust");
}
