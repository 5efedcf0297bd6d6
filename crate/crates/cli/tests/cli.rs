use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ucfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucfl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn presets_list_and_show() {
    let out = ucfl(&["presets", "list"]);
    assert!(out.status.success());
    let names = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        names.lines().collect::<Vec<_>>(),
        [
            "label_shift_small",
            "covariate_shift_small",
            "concept_shift_small"
        ]
    );

    let shown = ucfl(&["presets", "show", "label_shift_small"]);
    assert!(shown.status.success());
    let cfg: Value = serde_json::from_slice(&shown.stdout).unwrap();
    assert_eq!(cfg["federation"]["num_clients"], 20);
    assert_eq!(cfg["federation"]["dirichlet_alpha"], 0.4);
}

#[test]
fn run_writes_four_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = ucfl(&[
            "run",
            "--preset",
            "concept_shift_small",
            "--out",
            path_str(out),
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let mut files: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "manifest.json",
            "metrics.csv",
            "streamplan.json",
            "summary.json"
        ]
    );
    for name in ["metrics.csv", "summary.json", "streamplan.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = read_json(&a.join("manifest.json"));
    let summary = read_json(&a.join("summary.json"));
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["config_digest"], summary["config_digest"]);
    assert_eq!(summary["mean_curve"].as_array().unwrap().len(), 31);
    assert_eq!(read_json(&a.join("streamplan.json"))["m_t"], 4);
}

#[test]
fn config_file_matches_preset() {
    let dir = tempfile::tempdir().unwrap();
    let shown = ucfl(&["presets", "show", "label_shift_small"]);
    let mut cfg: Value = serde_json::from_slice(&shown.stdout).unwrap();
    cfg["rounds"] = 3.into();
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = dir.path().join("from_file");
    assert!(ucfl(&[
        "run",
        "--config",
        path_str(&cfg_path),
        "--out",
        path_str(&out)
    ])
    .status
    .success());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4 * 20);
    assert!(metrics.starts_with("round,user,val_acc,train_loss\n"));

    let other = dir.path().join("reseeded");
    let args = [
        "run",
        "--config",
        path_str(&cfg_path),
        "--seed-override",
        "7",
        "--out",
        path_str(&other),
    ];
    assert!(ucfl(&args).status.success());
    assert_ne!(
        metrics,
        fs::read_to_string(other.join("metrics.csv")).unwrap()
    );
}

#[test]
fn invalid_configs_exit_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let shown = ucfl(&["presets", "show", "concept_shift_small"]);
    let mut cfg: Value = serde_json::from_slice(&shown.stdout).unwrap();
    cfg["val_fraction"] = 1.5.into();
    let bad_value = dir.path().join("bad_value.json");
    fs::write(&bad_value, cfg.to_string()).unwrap();
    let malformed = dir.path().join("malformed.json");
    fs::write(&malformed, "{\"rounds\": ").unwrap();

    for (cfg, needle) in [(&bad_value, "val_fraction"), (&malformed, "malformed.json")] {
        let out = dir.path().join("out");
        let res = ucfl(&["run", "--config", path_str(cfg), "--out", path_str(&out)]);
        assert_eq!(res.status.code(), Some(1));
        assert!(String::from_utf8_lossy(&res.stderr).contains(needle));
        assert!(!out.exists());
    }
    let res = ucfl(&[
        "run",
        "--preset",
        "concept_shift_small",
        "--streams",
        "0",
        "--out",
        path_str(&dir.path().join("s")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("streams"));
}

#[test]
fn similarity_report_peaks_at_four_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let res = ucfl(&[
        "similarity",
        "--preset",
        "concept_shift_small",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(res.status.success());
    let report = read_json(&dir.path().join("similarity.json"));
    assert_eq!(report["m"], 20);
    for row in report["w"].as_array().unwrap() {
        let total: f64 = row
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .sum();
        assert!((total - 1.0).abs() <= 1e-9);
    }
    let table = report["silhouette"].as_array().unwrap();
    let ks: Vec<u64> = table.iter().map(|r| r["k"].as_u64().unwrap()).collect();
    assert_eq!(ks, (2..=10).collect::<Vec<u64>>());
    let best = table
        .iter()
        .max_by(|a, b| {
            a["score"]
                .as_f64()
                .unwrap()
                .total_cmp(&b["score"].as_f64().unwrap())
        })
        .unwrap();
    assert_eq!(best["k"], 4);
}

#[test]
fn two_users_give_a_single_silhouette_row() {
    let dir = tempfile::tempdir().unwrap();
    let shown = ucfl(&["presets", "show", "concept_shift_small"]);
    let mut cfg: Value = serde_json::from_slice(&shown.stdout).unwrap();
    cfg["federation"]["num_clients"] = 2.into();
    cfg["federation"]["num_clusters"] = 2.into();
    cfg["federation"]["samples_per_client"] = 50.into();
    let path = dir.path().join("two.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let res = ucfl(&[
        "similarity",
        "--config",
        path_str(&path),
        "--streams",
        "2",
        "--out",
        path_str(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let table = read_json(&out.join("similarity.json"))["silhouette"].clone();
    assert_eq!(table.as_array().unwrap().len(), 1);
    assert_eq!(table[0]["k"], 2);
}

#[test]
fn timing_curves_follow_the_stage_formula() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(ucfl(&[
        "run",
        "--preset",
        "concept_shift_small",
        "--out",
        path_str(&run)
    ])
    .status
    .success());
    let metrics = run.join("metrics.csv");
    let (t1, t2) = (dir.path().join("t1"), dir.path().join("t2"));
    for out in [&t1, &t2] {
        let args = [
            "timing",
            "--preset",
            "concept_shift_small",
            "--metrics",
            path_str(&metrics),
            "--out",
            path_str(out),
        ];
        assert!(ucfl(&args).status.success());
    }
    for system in ["wireless_slow", "wireless_fast", "wired"] {
        let name = format!("timing_{system}.csv");
        assert_eq!(
            fs::read(t1.join(&name)).unwrap(),
            fs::read(t2.join(&name)).unwrap()
        );
    }
    let wired = fs::read_to_string(t1.join("timing_wired.csv")).unwrap();
    let times: Vec<f64> = wired
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(times.len(), 31);
    assert_eq!(times[0], 0.0);
    // similarity round (1 + 1 + 1), then (m_t + 1 + 1) per round with m_t = 4
    assert_eq!(times[1], 3.0 + 6.0);
    for pair in times[1..].windows(2) {
        assert_eq!(pair[1] - pair[0], 6.0);
    }

    let missing = ucfl(&[
        "timing",
        "--preset",
        "concept_shift_small",
        "--metrics",
        "/no/such/metrics.csv",
        "--out",
        path_str(&dir.path().join("m")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn validate_bound_default_grid_and_trial_floor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ok");
    let res = ucfl(&["validate-bound", "--out", path_str(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let report = read_json(&out.join("bound_report.json"));
    assert_eq!(report["records"].as_array().unwrap().len(), 10);
    assert_eq!(report["all_within_delta"], true);

    let cfg = dir.path().join("few.json");
    fs::write(&cfg, r#"{"trials": 999}"#).unwrap();
    let res = ucfl(&[
        "validate-bound",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("few")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!dir.path().join("few").exists());
}
