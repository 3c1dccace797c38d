use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn data_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/pima.csv")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptstack"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn conceptstack")
}

fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = run(
            dir.path(),
            &["train", "--smoke", "--data", data_path().to_str().unwrap()],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
    .path()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn missing_data_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--smoke", "--data", "no/such/pima.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/pima.csv"));
}

#[test]
fn malformed_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "folds = \"five\"\n").unwrap();
    let out = run(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        dir.path(),
        &[
            "train",
            "--smoke",
            "--folds",
            "1",
            "--data",
            data_path().to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_tables_figures_and_artifact() {
    let dir = trained();
    assert!(dir.join("models/stack_artifact.json").is_file());
    assert!(dir.join("outputs/config_snapshot.toml").is_file());
    assert_eq!(lines(&dir.join("outputs/perf_table.csv")).len(), 1 + 2 * 6);
    assert_eq!(lines(&dir.join("outputs/model_summary.csv")).len(), 1 + 6);
    assert_eq!(lines(&dir.join("outputs/oof_predictions.csv")).len(), 1 + 768);
    assert_eq!(lines(&dir.join("outputs/calibration_bins.csv")).len(), 1 + 10);
    assert_eq!(lines(&dir.join("outputs/graph_stats.csv")).len(), 1 + 2);
    for fold in 1..=2 {
        let dot = fs::read_to_string(dir.join(format!("outputs/concept_graph_fold{fold}.dot"))).unwrap();
        assert!(dot.starts_with("digraph"));
    }
}

#[test]
fn predict_scores_rows_and_accepts_empty_input() {
    let dir = trained();
    let out = run(
        dir,
        &[
            "predict",
            "--model",
            "models/stack_artifact.json",
            "--input",
            data_path().to_str().unwrap(),
            "--output",
            "scored.csv",
        ],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("rows/second"));
    let scored = lines(&dir.join("scored.csv"));
    assert_eq!(scored.len(), 769);
    assert!(scored[0].ends_with("p_rf,p_et,p_transformer,p_cnn,p_ffnn,p_meta"));
    for row in &scored[1..] {
        let cells: Vec<f64> = row.rsplit(',').take(6).map(|c| c.parse().unwrap()).collect();
        assert!(cells.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    let header = fs::read_to_string(data_path())
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    fs::write(dir.join("empty.csv"), format!("{header}\n")).unwrap();
    let out = run(
        dir,
        &[
            "predict",
            "--model",
            "models/stack_artifact.json",
            "--input",
            "empty.csv",
            "--output",
            "empty_scored.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.join("empty_scored.csv")).len(), 1);
}

#[test]
fn missing_artifact_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["evaluate", "--model", "absent.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_prints_every_model() {
    let out = run(trained(), &["evaluate", "--model", "models/stack_artifact.json"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["rf", "et", "transformer", "cnn", "ffnn", "meta"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
}

#[test]
fn report_and_export_reproduce_training_outputs() {
    let dir = trained();
    let out = run(
        dir,
        &[
            "report",
            "--model",
            "models/stack_artifact.json",
            "--output-dir",
            "again",
        ],
    );
    assert!(out.status.success());
    for name in [
        "perf_table.csv",
        "calibration_bins.csv",
        "graph_stats.csv",
        "refine_log.csv",
        "concept_graph_fold2.dot",
    ] {
        assert_eq!(
            fs::read(dir.join("outputs").join(name)).unwrap(),
            fs::read(dir.join("again").join(name)).unwrap(),
            "{name}"
        );
    }
    let out = run(
        dir,
        &[
            "export-graph",
            "--model",
            "models/stack_artifact.json",
            "--output-dir",
            "graphs",
        ],
    );
    assert!(out.status.success());
    assert_eq!(fs::read_dir(dir.join("graphs")).unwrap().count(), 2);
}
