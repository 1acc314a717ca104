use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tiny_config() -> Value {
    json!({
        "data": {"n_samples": 60, "d": 6, "l": 4, "m": 6, "seq_len": 3, "t": 2, "k_true": 2, "noise_sigma": 0.02, "seed": 3},
        "model": {"hidden": 6},
        "train": {"base_epochs": 3, "drive_epochs": 2, "learning_rate": 0.001,
                  "pgd": {"rho": 0.2, "alpha": 0.1, "steps": 2}, "seed": 3},
        "metrics": {"k": 2},
        "output_dir": "unused"
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(cfg: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn write(&self, name: &str, v: &Value) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, v.to_string()).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_drive"))
            .args(args)
            .arg("--config")
            .arg(self.path("cfg.json"))
            .env("DRIVE_OUTPUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn trained(cfg: &Value, mask: Option<&str>) -> Self {
        let ws = Workspace::new(cfg);
        ws.ok(&["generate"]);
        ws.ok(&["train", "--stage", "base"]);
        match mask {
            Some(m) => ws.ok(&["train", "--stage", "drive", "--mask", m]),
            None => ws.ok(&["train", "--stage", "drive"]),
        };
        ws
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(workspace_root().join("schemas").join(name)).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, doc: &Value) {
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn generate_is_deterministic() {
    let a = Workspace::new(&tiny_config());
    let b = Workspace::new(&tiny_config());
    let ha = a.ok(&["generate"])["sha256"].clone();
    let hb = b.ok(&["generate"])["sha256"].clone();
    assert_eq!(ha, hb);
    assert_eq!(
        std::fs::read(a.out().join("dataset.drvb")).unwrap(),
        std::fs::read(b.out().join("dataset.drvb")).unwrap()
    );
    let again = a.ok(&["generate"])["sha256"].clone();
    assert_eq!(ha, again);
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new(&tiny_config());
    let out = Command::new(env!("CARGO_BIN_EXE_drive"))
        .args(["generate", "--config"])
        .arg(ws.path("does-not-exist.json"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let mut cfg = tiny_config();
    cfg["model"]["depth"] = json!(2);
    let ws = Workspace::new(&cfg);
    let out = ws.run(&["generate"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.depth"), "{stderr}");

    let mut cfg = tiny_config();
    cfg["data"]["k_true"] = json!(6);
    assert_eq!(code(&Workspace::new(&cfg).run(&["generate"])), 2);

    let ws = Workspace::new(&tiny_config());
    assert_eq!(code(&ws.run(&["train", "--stage", "sideways"])), 2);
    assert_eq!(code(&ws.run(&["train", "--stage", "base", "--mask", "BC"])), 2);
}

#[test]
fn missing_prerequisites_exit_3() {
    let ws = Workspace::new(&tiny_config());
    assert_eq!(code(&ws.run(&["train", "--stage", "base"])), 3);
    ws.ok(&["generate"]);
    assert_eq!(code(&ws.run(&["train", "--stage", "drive"])), 3);
    assert_eq!(code(&ws.run(&["evaluate"])), 3);
    ws.ok(&["train", "--stage", "base"]);
    assert_eq!(code(&ws.run(&["evaluate"])), 3);
}

#[test]
fn output_dir_env_overrides_config() {
    let ws = Workspace::new(&tiny_config());
    ws.ok(&["generate"]);
    assert!(ws.out().join("dataset.drvb").is_file());
    assert!(!ws.path("unused").exists());
}

#[test]
fn concept_only_mask_leaves_output_terms_blank() {
    let ws = Workspace::trained(&tiny_config(), Some("A,BC"));
    let log = std::fs::read_to_string(ws.out().join("drive_log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r[col("l_co")].is_empty() && r[col("l_so")].is_empty(), "{r:?}");
        assert!(!r[col("l_ci")].is_empty() && !r[col("l_si")].is_empty(), "{r:?}");
    }
}

#[test]
fn evaluate_and_audit_outputs() {
    let ws = Workspace::trained(&tiny_config(), None);
    let table_schema = schema("result_table.schema.json");

    let empty = ws.write("empty.json", &json!([]));
    let table = ws.ok(&["evaluate", "--sweep", empty.to_str().unwrap()]);
    assert_valid(&table_schema, &table);
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["perturbation"] == "No" && r["metrics"]["top_k"].is_null()));
    let csv = std::fs::read_to_string(ws.out().join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,perturbation,a-MAE,d-MAE,\"(a,d)-MAE\",top-k");
    assert_eq!(csv.lines().count(), 3);

    let zero = ws.write("zero.json", &json!([{"kind": "P1", "sigma": 0.0}]));
    let table = ws.ok(&["evaluate", "--sweep", zero.to_str().unwrap()]);
    assert_valid(&table_schema, &table);
    let rows = table["rows"].as_array().unwrap();
    for model in ["DCG", "DRIVE"] {
        let mine: Vec<&Value> = rows.iter().filter(|r| r["model"] == model).collect();
        assert_eq!(mine.len(), 2);
        assert_eq!(mine[0]["perturbation"], "No");
        assert!(mine[1]["perturbation"].as_str().unwrap().starts_with("P1("));
        let (clean, noisy) = (&mine[0]["metrics"], &mine[1]["metrics"]);
        assert_eq!(noisy["top_k"], json!(1.0));
        assert_eq!(clean["a_mae"], noisy["a_mae"]);
        assert_eq!(clean["ad_mae"], noisy["ad_mae"]);
    }

    let full = ws.ok(&["evaluate"]);
    assert_valid(&table_schema, &full);
    assert_eq!(full["rows"].as_array().unwrap().len(), 12);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("results.json")).unwrap()).unwrap();
    assert_eq!(on_disk, full);

    let bogus = ws.write("bogus.json", &json!([{"kind": "P9", "sigma": 0.1}]));
    assert_eq!(code(&ws.run(&["evaluate", "--sweep", bogus.to_str().unwrap()])), 2);

    let audit_schema = schema("audit_report.schema.json");
    let inf = ws.write("inf.json", &json!({"ci": "inf", "si": "inf", "co": "inf", "so": "inf"}));
    let report = ws.ok(&["audit", "--thresholds", inf.to_str().unwrap()]);
    assert_valid(&audit_schema, &report);
    assert_eq!(report["perturbation"]["kind"], "PGD");

    let zero_t = ws.write("zero_t.json", &json!({"ci": 0, "si": 0, "co": 0, "so": 0}));
    let out = ws.run(&["audit", "--thresholds", zero_t.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid(&audit_schema, &report);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(ws.out().join("audit.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    let p1 = ws.write("p1.json", &json!({"kind": "P1", "sigma": 0.05, "seed": 1}));
    let report = ws.ok(&["audit", "--thresholds", inf.to_str().unwrap(), "--spec", p1.to_str().unwrap()]);
    assert_valid(&audit_schema, &report);

    let negative = ws.write("neg.json", &json!({"ci": -1, "si": 0, "co": 0, "so": 0}));
    assert_eq!(code(&ws.run(&["audit", "--thresholds", negative.to_str().unwrap()])), 2);
    let garbled = ws.write("garbled.json", &json!({"ci": "lots"}));
    assert_eq!(code(&ws.run(&["audit", "--thresholds", garbled.to_str().unwrap()])), 2);
}

#[test]
fn audit_of_base_against_itself_passes_consistency() {
    let mut cfg = tiny_config();
    cfg["train"]["drive_epochs"] = json!(0);
    let ws = Workspace::trained(&cfg, None);
    let zero_t = ws.write("zero_t.json", &json!({"ci": 0, "si": 0, "co": 0, "so": 0}));
    let none = ws.write("none.json", &json!({"kind": "P1", "sigma": 0.0}));
    let out = ws.run(&["audit", "--thresholds", zero_t.to_str().unwrap(), "--spec", none.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["gamma"]["ci"], json!(0.0));
    assert_eq!(report["gamma"]["co"], json!(0.0));
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let a = Workspace::trained(&tiny_config(), None);
    let b = Workspace::trained(&tiny_config(), None);
    a.ok(&["evaluate"]);
    b.ok(&["evaluate"]);
    for f in ["dataset.drvb", "base.ckpt", "drive.ckpt", "results.csv", "results.json"] {
        assert_eq!(
            std::fs::read(a.out().join(f)).unwrap(),
            std::fs::read(b.out().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn bundled_config_matches_schema_and_loads() {
    let path = workspace_root().join("configs/bundled.json");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_valid(&schema("experiment_config.schema.json"), &doc);
    drive_core::experiment::ExperimentConfig::load(&path).unwrap();
    assert_valid(&schema("experiment_config.schema.json"), &tiny_config());
    let mut bad = tiny_config();
    bad["train"]["nesterov"] = json!(true);
    assert!(!schema("experiment_config.schema.json").is_valid(&bad));
}
