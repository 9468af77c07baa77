//! Versioned binary container for adapter tensors.
//!
//! Layout (little endian): magic `MCFUSECK`, `u32` version, `u64` length of
//! a JSON header echoing the configuration, the header, `u32` tensor count,
//! then per tensor a `u32`-prefixed UTF-8 name, `u32` rank, `u64` dims and
//! the `f64` values. The backbone is not stored; it is rebuilt from the
//! echoed config and verified against the recorded checksum.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::store::write_atomic;
use crate::backends::{BackendDescriptor, ScoringMode, ToyBackbone, ToyConfig, ToyModel, Vocabulary};
use crate::error::{Error, Result};

use super::{AdapterState, RankingConfig, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MCFUSECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub toy_config: ToyConfig,
    pub vocabulary: Vec<String>,
    pub backbone_checksum: String,
    pub adapter_checksum: String,
    pub mode: ScoringMode,
    #[serde(default)]
    pub visual_encoder: Option<BackendDescriptor>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub ranking: Option<RankingConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel, mode: ScoringMode) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            toy_config: model.config().clone(),
            vocabulary: model.backbone.vocab.words().to_vec(),
            backbone_checksum: model.backbone.checksum(),
            adapter_checksum: model.adapters.checksum(),
            mode,
            visual_encoder: None,
            train_config: None,
            ranking: None,
        };
        let tensors = model
            .adapters
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape, t.data.to_vec()))
            .collect();
        Self { header, tensors }
    }

    /// Rebuilds the backbone, checks it matches, and installs the adapters.
    pub fn into_model(&self) -> Result<ToyModel> {
        let h = &self.header;
        let vocab = Vocabulary::new(&h.vocabulary, h.toy_config.oov_buckets)?;
        let backbone = ToyBackbone::new(h.toy_config.clone(), vocab)?;
        if backbone.checksum() != h.backbone_checksum {
            return Err(Error::schema(None, "backbone checksum mismatch"));
        }
        let mut adapters = AdapterState::new(
            h.toy_config.dim,
            h.toy_config.visual_dim,
            h.toy_config.reduction_factor,
            h.toy_config.seed,
        );
        let expected: Vec<(String, Vec<usize>)> = adapters
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::schema(None, "adapter tensor count mismatch"));
        }
        for ((name, shape), (cname, cshape, data)) in expected.iter().zip(&self.tensors) {
            if name != cname || shape != cshape {
                return Err(Error::schema(
                    None,
                    format!("tensor `{cname}` {cshape:?} where `{name}` {shape:?} was expected"),
                ));
            }
            adapters.set_tensor(name, data)?;
        }
        if adapters.checksum() != h.adapter_checksum {
            return Err(Error::schema(None, "adapter checksum mismatch"));
        }
        ToyModel::from_parts(backbone, adapters)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let bad = |m: &str| Error::schema(None, format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = read_u64(&mut r)? as usize;
        let header_bytes = read_vec(&mut r, hlen)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| bad(&format!("header: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_vec(&mut r, nlen)?).map_err(|_| bad("tensor name"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            if n > bytes.len() / 8 {
                return Err(bad("tensor larger than file"));
            }
            let raw = read_vec(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, shape, data));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, tensors })
    }
}

fn read_vec(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(Error::schema(None, "checkpoint: truncated"));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    Ok(u32::from_le_bytes(read_vec(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    Ok(u64::from_le_bytes(read_vec(r, 8)?.try_into().expect("8 bytes")))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
