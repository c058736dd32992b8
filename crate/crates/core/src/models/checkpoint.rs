//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "CBNT" | u32 version | u32 len | metadata JSON
//! repeated: u32 len | name | u32 rank | u32 extent × rank | f32 × product(extents)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::network::{Network, NetworkMeta};
use crate::nn::LayerSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CBNT";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the layer graph before loading weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    #[serde(flatten)]
    meta: NetworkMeta,
    input_shape: Vec<usize>,
    trunk: Vec<LayerSpec>,
    branches: Vec<BranchMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BranchMeta {
    tap: usize,
    layers: Vec<LayerSpec>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let metadata = Metadata {
        meta: net.meta.clone(),
        input_shape: net.input_shape().to_vec(),
        trunk: net.trunk().iter().map(|l| l.spec().clone()).collect(),
        branches: net
            .branches()
            .iter()
            .map(|b| BranchMeta { tap: b.tap, layers: b.layers.iter().map(|l| l.spec().clone()).collect() })
            .collect(),
    };
    let json = serde_json::to_vec(&metadata)?;
    let mut out = Vec::with_capacity(json.len() + 4 * net.param_count() + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    for (name, p) in net.named_params() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncation(format!("{what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let len = r.u32("metadata length")?;
    let json = r.take(len, "metadata")?;
    let md: Metadata = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let branches = md.branches.into_iter().map(|b| (b.tap, b.layers)).collect();
    let mut net = Network::build(md.meta, md.input_shape, md.trunk, branches)?;

    let mut loaded = std::collections::HashMap::new();
    while !r.done() {
        let n = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(n, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank).map(|_| r.u32("tensor extent")).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("tensor `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        loaded.insert(name, Tensor::new(shape, data)?);
    }
    for (name, p) in net.named_params_mut() {
        let t = loaded.remove(&name).ok_or_else(|| Error::Truncation(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, architecture expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Short content hash of a network's serialized form.
pub fn checkpoint_id(net: &Network) -> Result<String> {
    let digest = Sha256::digest(encode_checkpoint(net)?);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}
