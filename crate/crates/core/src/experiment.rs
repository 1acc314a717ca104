//! End-to-end experiment steps driven by one JSON config: generate data,
//! train both stages, evaluate the sweep, audit.
//!
//! Files in the output directory:
//!
//! | file | written by |
//! |------|------------|
//! | `dataset.drvb` | generate |
//! | `base.ckpt`, `base_log.csv` | train, base stage |
//! | `drive.ckpt`, `drive_log.csv` | train, drive stage |
//! | `results.csv`, `results.json` | evaluate |
//! | `audit.json` | audit |

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointMeta, Stage, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::losses::LossMask;
use crate::metrics::{dependability_report, DependabilityReport, Thresholds};
use crate::model::{CbmParams, Dims, Sample};
use crate::perturb::PerturbationSpec;
use crate::report::{evaluate_sweep, ResultTable};
use crate::synth::{generate, SynthDataset, SynthSpec};
use crate::training::{default_k, train_base, train_drive, TrainConfig, TrainLog};

pub const OUTPUT_DIR_ENV: &str = "DRIVE_OUTPUT_DIR";
pub const DATASET_FILE: &str = "dataset.drvb";
pub const BASE_CKPT: &str = "base.ckpt";
pub const DRIVE_CKPT: &str = "drive.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    /// Top-k size for overlaps and audits; `None` means `ceil(m / 5)`.
    #[serde(default)]
    pub k: Option<usize>,
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "PerturbationSpec::default_sweep")]
    pub sweep: Vec<PerturbationSpec>,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

/// Parses JSON, reporting the failing field path.
pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." { what.to_string() } else { format!("{what}:{path}") },
            detail: e.into_inner().to_string(),
        }
    })
}

/// Reads and parses a user-supplied JSON file; an unreadable file is a config error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_json(&text, &path.display().to_string())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.dims().validate()?;
        self.train.validate()?;
        for (i, s) in self.sweep.iter().enumerate() {
            s.validate().map_err(|e| match e {
                Error::Config { path, detail } => Error::Config {
                    path: format!("sweep[{i}].{path}"),
                    detail,
                },
                other => other,
            })?;
        }
        let k = self.k();
        if k == 0 || k > self.data.m {
            return Err(Error::Config {
                path: "metrics.k".into(),
                detail: format!("must lie in 1..={}, got {k}", self.data.m),
            });
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d: self.data.d,
            l: self.data.l,
            m: self.data.m,
            hidden: self.model.hidden,
            t: self.data.t,
        }
    }

    pub fn k(&self) -> usize {
        self.metrics.k.unwrap_or_else(|| default_k(self.data.m))
    }
}

/// Output directory: the environment override if set, else the configured one.
pub fn resolve_output_dir(cfg: &ExperimentConfig, env_override: Option<&str>) -> PathBuf {
    match env_override {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output_dir),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn require(path: &Path, what: &'static str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|_| Error::Missing {
        what,
        path: path.display().to_string(),
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Summary printed after generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub version: String,
    pub path: String,
    pub sha256: String,
    pub concept_space: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub spec: SynthSpec,
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetSummary> {
    let ds = generate(&cfg.data)?;
    let bytes = ds.to_bytes()?;
    let path = out.join(DATASET_FILE);
    write(&path, &bytes)?;
    Ok(DatasetSummary {
        version: crate::synth::FORMAT_VERSION.into(),
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        concept_space: ds.space.id().into(),
        n_train: ds.split.train.len(),
        n_val: ds.split.val.len(),
        n_test: ds.split.test.len(),
        spec: ds.spec,
    })
}

/// A loaded dataset plus its file hash.
pub struct LoadedData {
    pub dataset: SynthDataset,
    pub hash: String,
}

pub fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<LoadedData> {
    let bytes = require(&out.join(DATASET_FILE), "dataset")?;
    let dataset = SynthDataset::from_bytes(&bytes)?;
    if dataset.spec != cfg.data {
        return Err(Error::Incompatible {
            expected: "dataset generated from this config".into(),
            found: "dataset from a different data spec".into(),
        });
    }
    Ok(LoadedData {
        hash: sha256_hex(&bytes),
        dataset,
    })
}

#[derive(Clone, Debug, Copy, PartialEq, Eq)]
pub enum StageArg {
    Base,
    Drive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub log: String,
    pub sha256: String,
    pub epochs: usize,
    pub mask: Option<String>,
}

fn load_ckpt(out: &Path, name: &str, what: &'static str, data: &LoadedData) -> Result<(CbmParams, CheckpointMeta, String)> {
    let bytes = require(&out.join(name), what)?;
    let (params, meta) = checkpoint::from_bytes(&bytes, &data.dataset.space)?;
    if meta.dataset_hash != data.hash {
        return Err(Error::Incompatible {
            expected: format!("{what} trained on dataset {}", data.hash),
            found: meta.dataset_hash,
        });
    }
    Ok((params, meta, sha256_hex(&bytes)))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, stage: StageArg, mask: Option<LossMask>) -> Result<TrainSummary> {
    let data = load_dataset(cfg, out)?;
    let space = &data.dataset.space;
    let splits = data.dataset.splits();
    let (params, log, meta, ckpt_name, log_name): (CbmParams, TrainLog, CheckpointMeta, &str, &str) = match stage {
        StageArg::Base => {
            let (p, log) = train_base(&splits, space, cfg.dims(), &cfg.train)?;
            let meta = CheckpointMeta {
                version: CHECKPOINT_VERSION.into(),
                stage: Stage::Base,
                dims: cfg.dims(),
                concept_space: space.id().into(),
                seed: cfg.train.seed,
                mask: None,
                base_hash: None,
                dataset_hash: data.hash.clone(),
            };
            (p, log, meta, BASE_CKPT, "base_log.csv")
        }
        StageArg::Drive => {
            let (base, _, base_hash) = load_ckpt(out, BASE_CKPT, "base checkpoint", &data)?;
            let mask = mask.unwrap_or(cfg.train.weights.mask);
            let (p, log) = train_drive(&base, &splits, space, &cfg.train, mask)?;
            let meta = CheckpointMeta {
                version: CHECKPOINT_VERSION.into(),
                stage: Stage::Drive,
                dims: cfg.dims(),
                concept_space: space.id().into(),
                seed: cfg.train.seed,
                mask: Some(mask.label()),
                base_hash: Some(base_hash),
                dataset_hash: data.hash.clone(),
            };
            (p, log, meta, DRIVE_CKPT, "drive_log.csv")
        }
    };
    let bytes = checkpoint::to_bytes(&params, &meta)?;
    let ckpt = out.join(ckpt_name);
    let log_path = out.join(log_name);
    write(&ckpt, &bytes)?;
    write(&log_path, log.to_csv())?;
    Ok(TrainSummary {
        checkpoint: ckpt.display().to_string(),
        log: log_path.display().to_string(),
        sha256: sha256_hex(&bytes),
        epochs: log.records.len(),
        mask: meta.mask,
    })
}

/// Both checkpoints, checked to belong together.
pub struct TrainedPair {
    pub data: LoadedData,
    pub base: CbmParams,
    pub drive: CbmParams,
    pub mask: LossMask,
}

pub fn load_pair(cfg: &ExperimentConfig, out: &Path) -> Result<TrainedPair> {
    let data = load_dataset(cfg, out)?;
    let (base, _, base_hash) = load_ckpt(out, BASE_CKPT, "base checkpoint", &data)?;
    let (drive, meta, _) = load_ckpt(out, DRIVE_CKPT, "drive checkpoint", &data)?;
    if meta.base_hash.as_deref() != Some(base_hash.as_str()) {
        return Err(Error::Incompatible {
            expected: format!("drive checkpoint fine-tuned from base {base_hash}"),
            found: meta.base_hash.unwrap_or_else(|| "<none>".into()),
        });
    }
    let mask = match meta.mask.as_deref() {
        Some(label) => LossMask::parse(label)?,
        None => cfg.train.weights.mask,
    };
    Ok(TrainedPair { data, base, drive, mask })
}

fn test_refs(ds: &SynthDataset) -> Vec<&Sample> {
    ds.split.test.iter().map(|&i| &ds.samples[i]).collect()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, sweep: &[PerturbationSpec]) -> Result<ResultTable> {
    for s in sweep {
        s.validate()?;
    }
    let pair = load_pair(cfg, out)?;
    let ds = &pair.data.dataset;
    let ctx = cfg.train.pgd_context(ds.space.len(), pair.mask);
    let table = evaluate_sweep(&pair.base, &pair.drive, &ds.space, &test_refs(ds), sweep, cfg.k(), &ctx)?;
    write(&out.join("results.csv"), table.to_csv())?;
    write(&out.join("results.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    Ok(table)
}

pub fn cmd_audit(
    cfg: &ExperimentConfig,
    out: &Path,
    thresholds: Thresholds,
    spec: &PerturbationSpec,
) -> Result<DependabilityReport> {
    thresholds.validate()?;
    spec.validate()?;
    let pair = load_pair(cfg, out)?;
    let ds = &pair.data.dataset;
    let ctx = cfg.train.pgd_context(ds.space.len(), pair.mask);
    let report = dependability_report(
        &pair.base,
        &pair.drive,
        &ds.space,
        &test_refs(ds),
        spec,
        thresholds,
        cfg.k(),
        Some(&ctx),
    )?;
    write(&out.join("audit.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
