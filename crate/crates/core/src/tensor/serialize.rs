//! Binary container shared by checkpoints and dataset files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DRVB" | u32 manifest_len | manifest JSON
//!        | u32 tensor_count
//!        | repeated: u32 header_len | {"name","shape"} JSON | f64 payload
//! ```

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRVB";

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// A JSON manifest plus an ordered list of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("missing tensor {name:?}"),
            })
    }
}

pub fn write_bundle(manifest: &serde_json::Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let m = serde_json::to_vec(manifest)?;
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&m);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let header = serde_json::to_vec(&TensorHeader {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
        })?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, n: usize, what: &str) -> Result<T> {
        let at = self.pos as u64;
        let bytes = self.take(n, what)?;
        serde_json::from_slice(bytes).map_err(|e| Error::Format {
            offset: at,
            detail: format!("bad {what}: {e}"),
        })
    }
}

pub fn read_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let n = r.u32("manifest length")?;
    let manifest = r.json(n, "manifest")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32("tensor header length")?;
        let at = r.pos as u64;
        let header: TensorHeader = r.json(n, "tensor header")?;
        let len: usize = header.shape.iter().product();
        let payload = r.take(len * 8, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(header.shape, data).map_err(|e| Error::Format {
            offset: at,
            detail: format!("tensor {}: {e}", header.name),
        })?;
        tensors.push((header.name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(Bundle { manifest, tensors })
}
