use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tabmda::harness::ExperimentConfig;
use tabmda_cli::{parse_config, CliError, CONFIG_ECHO_FILE, RESULTS_FILE, SUMMARY_CSV_FILE, SUMMARY_MD_FILE};

const SMALL_ENCODER: &str = r#""encoder_config": {"f_max": 8, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "c_max": 10, "layer_norm_eps": 1e-5}"#;

fn tabmda(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabmda")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn empty_config_uses_protocol_defaults() {
    let cfg = parse_config("{}").unwrap();
    assert_eq!(cfg.n_real_grid, vec![20, 50, 100, 200, 500]);
    assert_eq!(cfg.ics.fractions, vec![0.5, 0.7, 0.9, 1.0]);
    assert_eq!(cfg.ics.k_grid, vec![5, 20, 50]);
    assert_eq!(cfg.repeats, 10);
    assert_eq!(cfg.experiment().sweep_cells().len(), 12);
}

#[test]
fn type_mismatch_is_a_config_error() {
    let err = parse_config(r#"{"repeats": "ten"}"#).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = parse_config(r#"{"repeat": 3}"#).unwrap_err();
    assert!(matches!(&err, CliError::Config(m) if m.contains("repeat")), "{err}");
    assert!(parse_config(r#"{"ics": {"kk": 3}}"#).is_err());
}

#[test]
fn trivial_augment_adds_a_cell() {
    let cfg = parse_config(r#"{"ics": {"trivial_augment": true}}"#).unwrap();
    let exp: ExperimentConfig = cfg.experiment();
    let cells = exp.sweep_cells();
    assert_eq!(cells.len(), 13);
    assert!(cells.last().unwrap().fraction.is_trivial_augment());
}

#[test]
fn gen_weights_then_evaluate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(r#"{{"n_real_grid": [20], "repeats": 2, "ics": {{"k_grid": [5]}}, {SMALL_ENCODER}}}"#);
    fs::write(dir.path().join("cfg.json"), cfg).unwrap();

    let out = tabmda(&["gen-weights", "--config", "cfg.json", "--weights", "w.pfnw"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("w.pfnw").exists());

    let out = tabmda(&["evaluate", "--config", "cfg.json", "--weights", "w.pfnw", "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let results = fs::read_to_string(run.join(RESULTS_FILE)).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 5 * 2);
    assert!(fs::read_to_string(run.join(SUMMARY_CSV_FILE)).unwrap().contains("Average accuracy"));
    assert!(run.join(SUMMARY_MD_FILE).exists());
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(CONFIG_ECHO_FILE)).unwrap()).unwrap();
    assert_eq!(echo["command"], "evaluate");
    assert_eq!(echo["repeats"], 2);
}

#[test]
fn transformer_without_weights_fails_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = tabmda(&["augment"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn bad_config_file_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"repeats": "ten"}"#).unwrap();
    let out = tabmda(&["evaluate", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tabmda(&["augment", "--encoder", "centroid", "--dataset", "nope.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"ics": {"k": 3}}"#).unwrap();
    for out in ["a", "b"] {
        let o = tabmda(&["pca", "--encoder", "centroid", "--config", "cfg.json", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = tabmda(&["augment", "--encoder", "centroid", "--config", "cfg.json", "--out", out], dir.path());
        assert!(o.status.success());
    }
    for file in tabmda_cli::PCA_FILES.iter().chain(&[tabmda_cli::AUGMENTED_FILE]) {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn sweep_writes_ablation_columns() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"n_real_grid": [20], "repeats": 1, "classifiers": ["knn", "tree"]}"#).unwrap();
    let out = tabmda(&["sweep", "--encoder", "centroid", "--config", "cfg.json", "--out", "s"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s").join(tabmda_cli::ABLATION_CSV_FILE)).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["Full context (no ICS)", "N_ctx = 0.5", "N_ctx = 0.7", "N_ctx = 0.9", "N_ctx ~ U[0.5, 0.99]"] {
        assert!(header.contains(col), "{header}");
    }
}
