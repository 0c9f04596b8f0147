use std::path::PathBuf;

use gnp_core::experiment::*;
use gnp_core::models::Model;
use gnp_core::taskgen::SplitKind;
use gnp_core::training::EvalResult;
use gnp_core::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const CONFIG: &str = r#"{
  "seed": 3,
  "generator": { "process": { "kind": "eq", "lengthscale": 1.0 }, "noise_std": 0.05 },
  "model": { "kind": "gnp", "discretisation": { "points_per_unit": 8.0, "margin": 0.5 },
             "mean_cnn": { "layers": 2, "channels": 4, "kernel_size": 3 },
             "kernel_cnn": { "layers": 2, "channels": 3, "kernel_size": 3 } },
  "training": { "epochs": 1 }
}"#;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gnp-experiment-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn hash_ignores_layout_and_key_order() {
    let a = ExperimentConfig::from_json(CONFIG).unwrap();
    let reordered = r#"{"training":{"epochs":1},"model":{"kernel_cnn":{"kernel_size":3,"channels":3,"layers":2},
        "mean_cnn":{"kernel_size":3,"layers":2,"channels":4},"discretisation":{"margin":0.5,"points_per_unit":8.0},
        "kind":"gnp"},"generator":{"noise_std":0.05,"process":{"lengthscale":1.0,"kind":"eq"}},"seed":3}"#;
    let b = ExperimentConfig::from_json(reordered).unwrap();
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let mut c = a.clone();
    c.seed = 4;
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());
}

#[test]
fn hash_is_sha256_of_sorted_compact_json() {
    let value = serde_json::json!({ "b": [1, 2], "a": { "d": true, "c": "x" } });
    let want = hex::encode(Sha256::digest(br#"{"a":{"c":"x","d":true},"b":[1,2]}"#));
    assert_eq!(config_hash(&value).unwrap(), want);
}

#[test]
fn unknown_keys_are_rejected() {
    for (from, to) in [
        (r#""seed": 3,"#, r#""seed": 3, "seeed": 4,"#),
        (r#""epochs": 1"#, r#""epochs": 1, "lr": 0.1"#),
        (r#""margin": 0.5"#, r#""margin": 0.5, "extra": 1"#),
    ] {
        let text = CONFIG.replacen(from, to, 1);
        assert_ne!(text, CONFIG);
        assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::Config(_))), "{to}");
    }
}

#[test]
fn invalid_values_are_rejected() {
    let text = CONFIG.replacen(r#""kernel_size": 3 } }"#, r#""kernel_size": 4 } }"#, 1);
    assert!(ExperimentConfig::from_json(&text).is_err());
    let text = CONFIG.replacen(r#""epochs": 1"#, r#""epochs": 1, "batch_size": 7"#, 1);
    assert!(ExperimentConfig::from_json(&text).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let config = ExperimentConfig::from_json(CONFIG).unwrap();
    let model = Model::new(&config.model.model_spec().unwrap(), config.seed).unwrap();
    let path = scratch("rt").join("ck.json");
    Checkpoint::new(&config, 1, &model).unwrap().save(&path).unwrap();
    let ck = Checkpoint::load(&path, Some(&config.hash().unwrap())).unwrap();
    assert_eq!(ck.epoch, 1);
    assert_eq!(ck.seed, 3);
    assert_eq!(ck.code_version, CODE_VERSION);
    assert_eq!(ck.into_model().unwrap(), model);
}

#[test]
fn checkpoint_rejects_foreign_or_edited_config() {
    let config = ExperimentConfig::from_json(CONFIG).unwrap();
    let model = Model::new(&config.model.model_spec().unwrap(), 1).unwrap();
    let dir = scratch("reject");
    let path = dir.join("ck.json");
    Checkpoint::new(&config, 0, &model).unwrap().save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path, Some("00")), Err(Error::HashMismatch { .. })));

    let text = std::fs::read_to_string(&path).unwrap().replacen(r#""seed":3"#, r#""seed":9"#, 2);
    let edited = dir.join("edited.json");
    std::fs::write(&edited, text).unwrap();
    assert!(matches!(Checkpoint::load(&edited, None), Err(Error::HashMismatch { .. })));
}

#[test]
fn meta_sidecar_carries_provenance() {
    let path = scratch("meta").join("results.csv");
    ArtifactMeta::new("abc".into(), 7).write_beside(&path).unwrap();
    let meta: ArtifactMeta =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta, ArtifactMeta::new("abc".into(), 7));
}

fn row(task: &str, split: SplitKind, predictor: &str, mean: Option<f64>) -> ResultRow {
    ResultRow {
        task: task.into(),
        split,
        predictor: predictor.into(),
        result: mean.map(|m| EvalResult {
            mean: m,
            ci95: 0.125,
            n_tasks: 8,
            seed: 2,
        }),
        n_tasks: 8,
        seed: 2,
    }
}

fn sample_rows() -> Vec<ResultRow> {
    vec![
        row("sawtooth", SplitKind::InterpInRange, "oracle-full", None),
        row("eq", SplitKind::InterpInRange, "oracle-full", Some(1.0)),
        row("eq", SplitKind::Extrapolation, "gnp", Some(-0.5)),
        row("eq", SplitKind::InterpInRange, "gnp", Some(0.75)),
        row("eq", SplitKind::InterpBeyondRange, "gnp", Some(0.5)),
    ]
}

#[test]
fn results_csv_schema_and_order() {
    let table = ResultsTable { rows: sample_rows() };
    let mut out = Vec::new();
    table.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "task,split,predictor,mean,ci95,n_tasks,seed");
    let keys: Vec<_> = lines[1..].iter().map(|l| l.split(',').take(3).collect::<Vec<_>>().join(",")).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(lines.contains(&"eq,interp_in_range,gnp,0.750000,0.125000,8,2"));
    assert!(lines.contains(&"sawtooth,interp_in_range,oracle-full,n/a,n/a,8,2"));
    assert!(text.ends_with('\n') && !text.contains('\r'));
}

proptest! {
    #[test]
    fn results_csv_is_independent_of_insertion_order(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let rows = sample_rows();
        let shuffled = ResultsTable { rows: perm.iter().map(|&i| rows[i].clone()).collect() };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        ResultsTable { rows }.write_csv(&mut a).unwrap();
        shuffled.write_csv(&mut b).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hash_is_stable_under_json_round_trip(seed in any::<u64>(), epochs in 0usize..1000) {
        let mut config = ExperimentConfig::from_json(CONFIG).unwrap();
        config.seed = seed;
        config.training.epochs = epochs;
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(config.hash().unwrap(), back.hash().unwrap());
    }
}
