//! Model checkpoints: a JSON manifest plus the parameter tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CbmParams, ConceptSpace, Dims, Encoder, Head};
use crate::tensor::{read_bundle, write_bundle, Bundle, Tensor};

pub const CHECKPOINT_VERSION: &str = "drive-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Drive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: String,
    pub stage: Stage,
    pub dims: Dims,
    pub concept_space: String,
    pub seed: u64,
    /// Ablation mask label for fine-tuned checkpoints.
    pub mask: Option<String>,
    /// Content hash of the base checkpoint a fine-tuned model started from.
    pub base_hash: Option<String>,
    pub dataset_hash: String,
}

pub fn to_bytes(params: &CbmParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.concept_space != params.concept_space_ref() {
        return Err(Error::Binding {
            expected: params.concept_space_ref().into(),
            found: meta.concept_space.clone(),
        });
    }
    write_bundle(&serde_json::to_value(meta)?, &params.named_tensors())
}

/// Restores params and binds them to `space`, which must be the one they were trained on.
pub fn from_bytes(bytes: &[u8], space: &ConceptSpace) -> Result<(CbmParams, CheckpointMeta)> {
    let bundle = read_bundle(bytes)?;
    let version = bundle.manifest.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            expected: CHECKPOINT_VERSION.into(),
            found: version.into(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(bundle.manifest.clone()).map_err(|e| Error::Format {
        offset: 8,
        detail: format!("bad checkpoint manifest: {e}"),
    })?;
    if meta.concept_space != space.id() {
        return Err(Error::Binding {
            expected: meta.concept_space.clone(),
            found: space.id().into(),
        });
    }
    let t = |name: &str| -> Result<Tensor> { bundle.tensor(name).cloned() };
    let encoder = if has(&bundle, "enc.w") {
        Encoder::Linear {
            w: t("enc.w")?,
            b: t("enc.b")?,
        }
    } else {
        Encoder::Mlp {
            w1: t("enc.w1")?,
            b1: t("enc.b1")?,
            w2: t("enc.w2")?,
            b2: t("enc.b2")?,
        }
    };
    let head = Head {
        w1: t("head.w1")?,
        b1: t("head.b1")?,
        w2: t("head.w2")?,
        b2: t("head.b2")?,
    };
    Ok((CbmParams::from_parts(encoder, head, space)?, meta))
}

fn has(bundle: &Bundle, name: &str) -> bool {
    bundle.tensors.iter().any(|(n, _)| n == name)
}

pub fn save(path: &Path, params: &CbmParams, meta: &CheckpointMeta) -> Result<()> {
    std::fs::write(path, to_bytes(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path, space: &ConceptSpace) -> Result<(CbmParams, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?, space)
}
