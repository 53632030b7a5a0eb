use std::path::Path;
use std::process::{Command, Output};

fn fairgrad(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fairgrad"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fairgrad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTHETIC: &str = r#"{"kind": "synthetic", "name": "toy", "n": 600, "d_x": 4, "base_rates": [0.5, 0.5], "shift": [0.15, -0.15], "feature_shift": 2.0, "seed": 1}"#;
const SMALL_TRAIN: &str = r#"{"hidden_sizes": [8], "epochs": 4, "warmup_epochs": 1, "batch_size": 128, "learning_rate": 0.01"#;

#[test]
fn project_reads_scores_and_writes_the_projection() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("scores.csv");
    std::fs::write(
        &input,
        "score,label,a,b\n0.8,1,1,0\n0.6,0,1,0\n0.3,1,0,1\n0.1,0,0,1\n",
    )
    .unwrap();
    let out = fairgrad(&[
        "project",
        "--scores",
        path(&input),
        "--sensitive",
        "a,b",
        "--divergence",
        "sed",
        "--statistic",
        "dp",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let projected: Vec<f64> = rows
        .records()
        .map(|r| r.unwrap()[1].parse().unwrap())
        .collect();
    assert_eq!(projected.len(), 4);
    // Both groups end up at the overall mean 0.45.
    assert!(((projected[0] + projected[1]) / 2.0 - 0.45).abs() < 1e-6);
    assert!(((projected[2] + projected[3]) / 2.0 - 0.45).abs() < 1e-6);
}

#[test]
fn project_rejects_a_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("scores.csv");
    std::fs::write(&input, "score,label,a\n0.8,1,1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fairgrad"))
        .args(["project", "--scores", path(&input), "--sensitive", "a,zzz"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzz"));
}

#[test]
fn train_prints_a_summary_and_saves_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.json");
    std::fs::write(
        &config,
        format!(r#"{{"data": {SYNTHETIC}, "train": {SMALL_TRAIN}, "fairret": "kl", "strength": 1.0}}, "split_ratio": 0.75}}"#),
    )
    .unwrap();
    let model = dir.path().join("model.json");
    let out = fairgrad(&[
        "train",
        "--config",
        path(&config),
        "--model-out",
        path(&model),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["dataset"], "toy");
    assert!(summary["test_auroc"].as_f64().unwrap() > 0.5);
    assert_eq!(summary["test_violation"].as_array().unwrap().len(), 4);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model).unwrap()).unwrap();
    assert_eq!(saved["hidden_sizes"], serde_json::json!([8]));
}

#[test]
fn grid_writes_results_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"data": {SYNTHETIC}, "statistics": ["dp"], "fairrets": ["smoothmax", "norm1"], "strengths": [1.0], "seeds": [0], "train": {SMALL_TRAIN}}}}}"#
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let svg = dir.path().join("plot.svg");
    fairgrad(&[
        "grid",
        "--config",
        path(&config),
        "--out",
        path(&out_dir),
        "--svg",
        path(&svg),
    ]);
    let rows = csv::Reader::from_path(out_dir.join("results.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 2);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
    let again = fairgrad(&["grid", "--config", path(&config), "--out", path(&out_dir)]);
    assert!(String::from_utf8_lossy(&again.stderr).contains("0 cells computed"));
}

#[test]
fn batch_study_prints_one_line_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synthetic.json");
    std::fs::write(
        &config,
        r#"{"n": 5000, "base_rates": [0.5, 0.5], "shift": [0.1, -0.1], "seed": 3}"#,
    )
    .unwrap();
    let out = fairgrad(&[
        "study-batches",
        "--config",
        path(&config),
        "--sizes",
        "64,512",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("5000,1,0,"));
}

#[test]
fn shipped_bank_grid_parses_and_reports_the_missing_data() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let out = Command::new(env!("CARGO_BIN_EXE_fairgrad"))
        .args([
            "grid",
            "--config",
            path(&root.join("grid_bank.json")),
            "--out",
        ])
        .arg(tempfile::tempdir().unwrap().path())
        .output()
        .unwrap();
    // The bank data is not shipped, so only the load step may fail.
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("parsing"));
}
