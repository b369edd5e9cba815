//! Self-describing tensor container.
//!
//! Layout: the 8-byte magic `TRYONCK\0`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian `f32` payload. The header
//! records the format version, free-form metadata (model config, training
//! state), and one entry per tensor with its name, shape, group, trainable
//! flag and element offset into the payload. A SHA-256 of the payload guards
//! against truncation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"TRYONCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    group: Group,
    #[serde(default)]
    trainable: bool,
    offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Group {
    Param,
    Aux,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    payload_sha256: String,
}

/// Model parameters, auxiliary tensors (optimizer moments) and metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
    pub aux: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, params: ParamSet) -> Self {
        Self { meta, params, aux: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, t: &Tensor, group, trainable| {
            entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), group, trainable, offset });
            offset += t.len();
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (name, p) in self.params.iter() {
            push(name, &p.value, Group::Param, p.trainable);
        }
        for (name, t) in &self.aux {
            push(name, t, Group::Aux, false);
        }
        let header = Header {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: entries,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 12 && &bytes[..8] == MAGIC, Format, "not a checkpoint (bad magic)");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        ensure!(bytes.len() >= 12 + hlen, Format, "truncated header");
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        ensure!(
            header.version == FORMAT_VERSION,
            Format,
            "checkpoint format version {} is not supported",
            header.version
        );
        let payload = &bytes[12 + hlen..];
        ensure!(
            hex::encode(Sha256::digest(payload)) == header.payload_sha256,
            Format,
            "checkpoint payload checksum mismatch"
        );
        ensure!(payload.len() % 4 == 0, Format, "payload is not a whole number of floats");
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut ck = Checkpoint { meta: header.meta, ..Default::default() };
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            ensure!(e.offset + n <= floats.len(), Format, "tensor `{}` runs past the payload", e.name);
            let t = Tensor::new(e.shape, floats[e.offset..e.offset + n].to_vec())?;
            match e.group {
                Group::Param => ck.params.insert(e.name, t, e.trainable),
                Group::Aux => {
                    ck.aux.insert(e.name, t);
                }
            }
        }
        Ok(ck)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
