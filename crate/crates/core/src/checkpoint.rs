//! Binary model checkpoints. Layout: the 8-byte magic "ADVDEFv1", a
//! little-endian u32 format version, a length-prefixed JSON metadata
//! document, then one record per parameter tensor until end of file.
//! Each record is name length + name bytes, rank, the dims (all u32
//! little-endian), and the raw little-endian f32 payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ClassifierSpec, VaeSpec};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ADVDEFv1";
pub const FORMAT_VERSION: u32 = 1;

/// Which kind of model the parameters belong to, with its full
/// architecture so a checkpoint is self-describing.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelDesc {
    Classifier(ClassifierSpec),
    Vae(VaeSpec),
}

impl ModelDesc {
    pub fn name(&self) -> &str {
        match self {
            ModelDesc::Classifier(s) => &s.name,
            ModelDesc::Vae(s) => &s.name,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelDesc,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamSet) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            meta,
            params,
        }
    }
}

/// Running statistics are carried by name, not trained; everything else
/// is a trainable weight. Used to rebuild the flags on load.
fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&ckpt.version.to_le_bytes())?;
    let meta = serde_json::to_vec(&ckpt.meta)?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    for (name, tensor) in ckpt.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(tensor.len() * 4);
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

/// Byte reader over the whole file that remembers its offset so parse
/// errors can point at the failing position.
struct Reader {
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_eof(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, pos: 0 };

    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

    let mut params = ParamSet::new();
    while !r.at_eof() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32(&format!("rank of tensor '{name}'"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(r.u32(&format!("dim {i} of tensor '{name}'"))? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= r.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}': dims {dims:?} exceed payload"))
            })?;
        let payload = r
            .take(count * 4, "payload")
            .map_err(|_| Error::Checkpoint(format!("tensor '{name}': payload truncated")))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(dims, data)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
        let trainable = is_trainable(&name);
        params.add(&name, tensor, trainable)?;
    }

    Ok(Checkpoint {
        version,
        meta,
        params,
    })
}
